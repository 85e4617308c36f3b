"""
oscar-kv command line: synth, calibrate, eval, verify, report, sweep.

Exit codes: 0 success, 1 failed verification check, 2 bad input.
"""

import functools
import json
import logging
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import coloredlogs
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from oscar_kv.cache_sim import evaluate_dump
from oscar_kv.calibration import calibrate_bundle
from oscar_kv.config import (
    DEFAULT_CLIP_GRID,
    ROTATION_MODES,
    CacheLayout,
    CalibrationOptions,
    EvalOptions,
    SynthConfig,
    load_settings,
)
from oscar_kv.container import (
    bundle_from_arrays,
    bundle_to_arrays,
    dump_from_arrays,
    dump_to_arrays,
    read_container,
    write_container,
)
from oscar_kv.errors import InputError, OscarError
from oscar_kv.synth import generate_dump
from oscar_kv.verify import run_all_checks, worked_example_report

logger = logging.getLogger("oscar_kv")
console = Console()

app = typer.Typer(
    add_completion=False,
    help="Attention-aware KV-cache rotation calibration and INT-b cache simulation.",
)

EXIT_CHECK_FAILED = 1
EXIT_BAD_INPUT = 2


def _guarded(fn: Callable) -> Callable:
    """Map library errors to exit status 2 with a one-line message."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (OscarError, ValidationError) as e:
            console.print(f"[bold red]error:[/bold red] {e}")
            raise typer.Exit(code=EXIT_BAD_INPUT)

    return wrapper


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from e


def _parse_ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise InputError(f"expected comma-separated integers, got {text!r}") from e


def _parse_windows(text: str) -> List[Tuple[int, int]]:
    pairs = []
    for item in text.split(","):
        if not item.strip():
            continue
        try:
            sink, recent = item.split(":")
            pairs.append((int(sink), int(recent)))
        except ValueError as e:
            raise InputError(f"window pairs look like 64:256, got {item!r}") from e
    if not pairs:
        raise InputError("no window pairs given")
    return pairs


def _write_json(path: Optional[Path], payload: dict) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("✅ Metrics written to %s", path)


@app.callback()
def main(
    log_level: Optional[str] = typer.Option(None, help="Logging level (default: OSCAR_LOG_LEVEL or INFO)."),
):
    settings = load_settings()
    coloredlogs.install(
        level=(log_level or settings.log_level).upper(),
        logger=logger,
        fmt="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@app.command()
@_guarded
def synth(
    out: Path = typer.Option(..., help="Output container path."),
    tokens: int = typer.Option(512),
    head_dim: int = typer.Option(128),
    layers: int = typer.Option(2),
    kv_heads: int = typer.Option(2),
    gqa_ratio: int = typer.Option(4),
    outlier_channels: int = typer.Option(4),
    outlier_scale: float = typer.Option(4.0),
    spectrum_decay: float = typer.Option(1.5),
    seed: int = typer.Option(7),
):
    """Generate a synthetic activation dump."""
    config = SynthConfig(
        tokens=tokens, head_dim=head_dim, layers=layers, kv_heads=kv_heads,
        gqa_ratio=gqa_ratio, outlier_channels=outlier_channels,
        outlier_scale=outlier_scale, spectrum_decay=spectrum_decay, seed=seed,
    )
    write_container(out, dump_to_arrays(generate_dump(config)))
    console.print(f"✅ Wrote activations to [bold]{out}[/bold]")


@app.command()
@_guarded
def calibrate(
    activations: Path = typer.Option(..., help="Activation container."),
    out: Path = typer.Option(..., help="Bundle container to write."),
    bits: int = typer.Option(2),
    group_size: int = typer.Option(128, help="Group size for both K and V."),
    group_size_k: Optional[int] = typer.Option(None, help="Override the K group size."),
    clip_grid: str = typer.Option(",".join(str(x) for x in DEFAULT_CLIP_GRID)),
    share_heads: bool = typer.Option(False, "--share-heads/--per-head"),
    per_layer_clip: bool = typer.Option(True, "--per-layer-clip/--global-clip"),
    target: str = typer.Option("attention", help="attention or raw."),
    n_jobs: Optional[int] = typer.Option(None, help="Worker processes (default: OSCAR_N_JOBS)."),
):
    """Calibrate rotations and clip ratios from an activation dump."""
    settings = load_settings()
    options = CalibrationOptions(
        bits=bits,
        group_size_k=group_size if group_size_k is None else group_size_k,
        group_size_v=group_size,
        clip_grid=_parse_floats(clip_grid),
        share_heads=share_heads,
        per_layer_clip=per_layer_clip,
        target=target,
        softmax_block=settings.softmax_block,
        n_jobs=settings.n_jobs if n_jobs is None else n_jobs,
    )
    dump = dump_from_arrays(read_container(activations))
    bundle = calibrate_bundle(dump, options)
    write_container(out, bundle_to_arrays(bundle))

    table = Table(title="Clip ratios")
    table.add_column("layer", justify="right")
    table.add_column("rho_K", justify="right")
    table.add_column("rho_V", justify="right")
    for i, row in enumerate(bundle.slots):
        table.add_row(str(i), f"{row[0].clip_k:.2f}", f"{row[0].clip_v:.2f}")
    console.print(table)
    console.print(f"✅ Wrote bundle to [bold]{out}[/bold]")


@app.command("eval")
@_guarded
def evaluate(
    activations: Path = typer.Option(...),
    bundle: Path = typer.Option(...),
    bits: Optional[int] = typer.Option(None, help="Override the bundle's bit width."),
    group_size: Optional[int] = typer.Option(None, help="Override both group sizes."),
    clip_ratio: Optional[float] = typer.Option(None, help="Override calibrated clip ratios."),
    sink: int = typer.Option(64),
    recent: int = typer.Option(256),
    rotation: str = typer.Option("oscar", help="One of: " + ", ".join(ROTATION_MODES)),
    bf16_meta: bool = typer.Option(False, "--bf16-meta"),
    prefill_tokens: Optional[int] = typer.Option(None),
    context_length: Optional[int] = typer.Option(None, help="Context length for BPE accounting."),
    metrics: Optional[Path] = typer.Option(None, help="Write the JSON report here."),
):
    """Simulate the mixed-precision cache and report distortion."""
    options = EvalOptions(
        mode=rotation, bits=bits, group_size=group_size, clip_ratio=clip_ratio,
        bf16_meta=bf16_meta, prefill_tokens=prefill_tokens, context_length=context_length,
    )
    layout = CacheLayout(sink=sink, recent=recent)
    dump = dump_from_arrays(read_container(activations))
    rot = bundle_from_arrays(read_container(bundle))
    summary = evaluate_dump(dump, rot, layout, options)

    table = Table(title=f"Distortion ({rotation}, mean over {len(summary.reports)} heads)")
    table.add_column("metric")
    table.add_column("value", justify="right")
    for name, value in summary.means.items():
        table.add_row(name, f"{value:.6g}")
    console.print(table)
    _write_json(metrics, summary.model_dump())


@app.command()
@_guarded
def verify(
    seed: int = typer.Option(0),
    dims: str = typer.Option("5,6", help="Sizes for the exhaustive permutation check (<= 7)."),
    trials: int = typer.Option(200),
    alignment: bool = typer.Option(False, "--alignment/--no-alignment", help="Include the random alignment baseline."),
    n_jobs: Optional[int] = typer.Option(None),
    report: Optional[Path] = typer.Option(None, help="Write the JSON report here."),
):
    """Run the numerical oracle battery; exit 1 if any check fails."""
    settings = load_settings()
    result = run_all_checks(
        seed=seed,
        dims=_parse_ints(dims),
        trials=trials,
        n_jobs=settings.n_jobs if n_jobs is None else n_jobs,
        include_alignment=alignment,
    )
    table = Table(title=f"Verification (seed {seed})")
    for col in ("check", "status", "measured", "tolerance", "trials"):
        table.add_column(col)
    for c in result.checks:
        status = "[green]pass[/green]" if c.passed else "[red]FAIL[/red]"
        table.add_row(c.name, status, f"{c.measured:.3e}", f"{c.tolerance:.1e}", str(c.trials))
    console.print(table)
    _write_json(report, result.model_dump())
    if not result.passed:
        console.print(f"[bold red]failed:[/bold red] {', '.join(result.failed())}")
        raise typer.Exit(code=EXIT_CHECK_FAILED)


@app.command()
@_guarded
def report(
    activations: Path = typer.Option(...),
    layer: int = typer.Option(0),
    head: int = typer.Option(0),
    group_size: int = typer.Option(128),
    bits: int = typer.Option(2),
    out: Optional[Path] = typer.Option(None, help="Write the table as JSON here."),
):
    """Worked-example table comparing key rotations for one head."""
    dump = dump_from_arrays(read_container(activations))
    if not (0 <= layer < dump.layers and 0 <= head < dump.kv_heads):
        raise InputError(f"no head ({layer}, {head}) in a {dump.layers}x{dump.kv_heads} dump")
    rows = worked_example_report(dump.head(layer, head), group_size=group_size, bits=bits)

    table = Table(title=f"Key rotations, layer {layer} head {head}, G={group_size}")
    for col in ("rotation", "max|X|", "mean group range", "importance", "tr(E_K)", "diag energy"):
        table.add_column(col, justify="right")
    for r in rows:
        table.add_row(
            r.mode, f"{r.max_abs:.3f}", f"{r.mean_group_range:.3f}",
            f"{r.importance_ratio:.2f}", f"{r.trace_e_k:.2f}", f"{r.diag_energy_k:.3f}",
        )
    console.print(table)
    _write_json(out, {"layer": layer, "head": head, "rows": [r.model_dump() for r in rows]})


@app.command()
@_guarded
def sweep(
    activations: Path = typer.Option(...),
    bundle: Path = typer.Option(...),
    windows: str = typer.Option("0:0,16:64,64:256", help="sink:recent pairs."),
    rotation: str = typer.Option("oscar"),
    context_length: Optional[int] = typer.Option(None),
    metrics: Optional[Path] = typer.Option(None),
):
    """Evaluate several sink/recent window sizes."""
    dump = dump_from_arrays(read_container(activations))
    rot = bundle_from_arrays(read_container(bundle))
    options = EvalOptions(mode=rotation, context_length=context_length)

    table = Table(title=f"Window sweep ({rotation})")
    for col in ("sink", "recent", "BPE", "attention KL", "logit MSE"):
        table.add_column(col, justify="right")
    results = []
    for sink, recent in _parse_windows(windows):
        summary = evaluate_dump(dump, rot, CacheLayout(sink=sink, recent=recent), options)
        means = summary.means
        results.append({"sink": sink, "recent": recent, **means})
        table.add_row(
            str(sink), str(recent), f"{means['effective_bpe']:.3f}",
            f"{means['attention_kl']:.4e}", f"{means['logit_mse']:.4e}",
        )
    console.print(table)
    _write_json(metrics, {"mode": rotation, "windows": results})
