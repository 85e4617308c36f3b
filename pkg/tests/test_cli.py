import json

import pytest
from typer.testing import CliRunner

from oscar_kv.cli import EXIT_BAD_INPUT, app

runner = CliRunner()

SMALL = ["--tokens", "48", "--head-dim", "16", "--layers", "1", "--kv-heads", "2",
         "--gqa-ratio", "2", "--outlier-channels", "2"]


def _invoke(*args):
    return runner.invoke(app, ["--log-level", "WARNING", *args])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert _invoke("synth", "--out", str(root / "acts.oscr"), *SMALL).exit_code == 0
    result = _invoke(
        "calibrate", "--activations", str(root / "acts.oscr"),
        "--out", str(root / "bundle.oscr"), "--group-size", "8",
    )
    assert result.exit_code == 0, result.output
    return root


def test_synth_is_deterministic(workdir, tmp_path):
    assert _invoke("synth", "--out", str(tmp_path / "again.oscr"), *SMALL).exit_code == 0
    assert (tmp_path / "again.oscr").read_bytes() == (workdir / "acts.oscr").read_bytes()


def test_calibrate_writes_bundle(workdir):
    assert (workdir / "bundle.oscr").stat().st_size > 0


def test_eval_passthrough_is_lossless(workdir):
    out = workdir / "passthrough.json"
    result = _invoke(
        "eval", "--activations", str(workdir / "acts.oscr"), "--bundle", str(workdir / "bundle.oscr"),
        "--sink", "4", "--recent", "8", "--rotation", "passthrough", "--metrics", str(out),
    )
    assert result.exit_code == 0, result.output
    means = json.loads(out.read_text())["means"]
    for name in ("rel_mse_k", "rel_mse_v", "logit_mse", "output_mse", "attention_kl"):
        assert means[name] == pytest.approx(0.0, abs=1e-9)
    assert means["effective_bpe"] == 16.0


def test_eval_reports_every_head(workdir):
    out = workdir / "oscar.json"
    result = _invoke(
        "eval", "--activations", str(workdir / "acts.oscr"), "--bundle", str(workdir / "bundle.oscr"),
        "--sink", "4", "--recent", "8", "--metrics", str(out),
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text())
    assert payload["mode"] == "oscar"
    assert len(payload["reports"]) == 2
    assert payload["means"]["logit_mse"] > 0.0


def test_sweep(workdir):
    out = workdir / "sweep.json"
    result = _invoke(
        "sweep", "--activations", str(workdir / "acts.oscr"), "--bundle", str(workdir / "bundle.oscr"),
        "--windows", "0:0,4:8", "--metrics", str(out),
    )
    assert result.exit_code == 0, result.output
    windows = json.loads(out.read_text())["windows"]
    assert [(w["sink"], w["recent"]) for w in windows] == [(0, 0), (4, 8)]


def test_report(workdir):
    out = workdir / "report.json"
    result = _invoke("report", "--activations", str(workdir / "acts.oscr"), "--group-size", "8", "--out", str(out))
    assert result.exit_code == 0, result.output
    assert len(json.loads(out.read_text())["rows"]) == 5


def test_verify_passes(tmp_path):
    out = tmp_path / "verify.json"
    result = _invoke("verify", "--dims", "4", "--trials", "20", "--report", str(out))
    assert result.exit_code == 0, result.output
    assert all(c["passed"] for c in json.loads(out.read_text())["checks"])


@pytest.mark.parametrize(
    "args",
    [
        ["verify", "--dims", "9"],
        ["report", "--activations", "missing.oscr"],
        ["synth", "--out", "x.oscr", "--head-dim", "12"],
    ],
)
def test_bad_input_exits_two(args, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert _invoke(*args).exit_code == EXIT_BAD_INPUT


def test_unknown_rotation(workdir):
    result = _invoke(
        "eval", "--activations", str(workdir / "acts.oscr"), "--bundle", str(workdir / "bundle.oscr"),
        "--rotation", "bogus",
    )
    assert result.exit_code == EXIT_BAD_INPUT


def test_missing_head(workdir):
    result = _invoke("report", "--activations", str(workdir / "acts.oscr"), "--head", "5")
    assert result.exit_code == EXIT_BAD_INPUT


@pytest.mark.slow
def test_oscar_beats_hadamard_on_default_dump(tmp_path):
    acts, bundle = tmp_path / "acts.oscr", tmp_path / "bundle.oscr"
    assert _invoke("synth", "--out", str(acts)).exit_code == 0
    assert _invoke("calibrate", "--activations", str(acts), "--out", str(bundle)).exit_code == 0
    trace = {}
    for mode in ("oscar", "hadamard"):
        out = tmp_path / f"{mode}.json"
        result = _invoke(
            "eval", "--activations", str(acts), "--bundle", str(bundle), "--rotation", mode,
            "--sink", "0", "--recent", "0", "--prefill-tokens", "512", "--metrics", str(out),
        )
        assert result.exit_code == 0, result.output
        trace[mode] = json.loads(out.read_text())["means"]["trace_e_k"]
    assert trace["oscar"] <= trace["hadamard"]
