import math

import numpy as np
import pytest

from oscar_kv.calibration import (
    ActivationDump,
    CovarianceTarget,
    RotationCalibrator,
    calibrate_bundle,
    calibrate_clip,
    clip_objective,
    compose_rotation,
    estimate_query_covariance,
    estimate_raw_covariance,
    estimate_score_value_covariance,
    orthogonality_error,
    pbr_permutation,
    select_clip_pair,
)
from oscar_kv.config import DEFAULT_CLIP_GRID, CalibrationOptions, QuantConfig
from oscar_kv.errors import DimensionError, EmptyDumpError, InputError
from oscar_kv.linalg_core import bit_reversal, hadamard_matrix, random_orthogonal, sym_eig


def _naive_score_value(q, k, v, causal):
    t, d = k.shape
    total = np.zeros((d, d))
    for qi in q:
        for i in range(t):
            w = np.array([qi[i] @ k[j] / math.sqrt(d) for j in range(t)])
            if causal:
                w[i + 1:] = -np.inf
            p = np.exp(w - w.max())
            p /= p.sum()
            row = p @ v
            total += np.outer(row, row)
    return total / (len(q) * t)


class TestActivationDump:
    def test_shapes(self, dump):
        assert (dump.layers, dump.kv_heads, dump.gqa_ratio, dump.tokens, dump.head_dim) == (2, 2, 4, 512, 128)
        assert dump.q.dtype == np.float32

    def test_head_slice(self, dump):
        h = dump.head(1, 0)
        assert h.q.shape == (4, 512, 128) and h.k.shape == (512, 128)
        assert h.stacked_queries().shape == (2048, 128)

    def test_fingerprint_is_stable(self, dump):
        assert dump.fingerprint() == ActivationDump(dump.q, dump.k, dump.v).fingerprint()

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(DimensionError):
            ActivationDump(np.zeros((1, 1, 1, 4, 8)), np.zeros((1, 1, 4, 8)), np.zeros((1, 1, 5, 8)))

    def test_rejects_empty(self):
        with pytest.raises(EmptyDumpError):
            ActivationDump(np.zeros((1, 1, 1, 0, 8)), np.zeros((1, 1, 0, 8)), np.zeros((1, 1, 0, 8)))

    def test_rejects_nan(self):
        k = np.zeros((1, 1, 2, 4))
        k[0, 0, 0, 0] = np.nan
        with pytest.raises(InputError):
            ActivationDump(np.zeros((1, 1, 1, 2, 4)), k, np.zeros((1, 1, 2, 4)))


class TestTargets:
    def test_query_trace_matches_direct_sum(self, head):
        c_q = estimate_query_covariance(head.q)
        direct = float(np.sum(head.q ** 2)) / (head.tokens * head.q.shape[0])
        assert c_q.trace == pytest.approx(direct, rel=1e-10)

    def test_query_spectrum_is_anisotropic(self, head):
        values = sym_eig(estimate_query_covariance(head.q).matrix).values
        assert values[0] / values.mean() >= 10.0

    @pytest.mark.parametrize("causal", [True, False])
    def test_score_value_matches_loop(self, rng, causal):
        q = rng.standard_normal((2, 6, 4))
        k = rng.standard_normal((6, 4))
        v = rng.standard_normal((6, 4))
        expected = _naive_score_value(q, k, v, causal)
        for block in (1, 4, 1024):
            got = estimate_score_value_covariance(q, k, v, causal=causal, block=block)
            np.testing.assert_allclose(got.matrix, expected, atol=1e-12)

    def test_single_token_is_raw_value(self, rng):
        v = rng.standard_normal((1, 4))
        c_s = estimate_score_value_covariance(rng.standard_normal((1, 4)), rng.standard_normal((1, 4)), v)
        np.testing.assert_allclose(c_s.matrix, np.outer(v[0], v[0]), atol=1e-14)

    def test_raw_target(self, head):
        c = estimate_raw_covariance(head.k, "raw-key")
        np.testing.assert_allclose(c.matrix, head.k.T @ head.k / head.tokens, atol=1e-10)

    def test_query_target_scales_quadratically(self, head):
        base = estimate_query_covariance(head.q).matrix
        np.testing.assert_allclose(estimate_query_covariance(2.0 * head.q).matrix, 4.0 * base, rtol=1e-12)

    @pytest.mark.parametrize("layer, kv_head", [(0, 0), (1, 1)])
    def test_score_value_target_is_psd(self, dump, layer, kv_head):
        _, c_s = RotationCalibrator().targets(dump, layer, kv_head)
        assert np.linalg.eigvalsh(c_s.matrix).min() >= -1e-12 * c_s.trace

    def test_small_dump_targets_are_psd(self, small_dump):
        for kv_head in range(small_dump.kv_heads):
            _, c_s = RotationCalibrator().targets(small_dump, 0, kv_head)
            assert np.linalg.eigvalsh(c_s.matrix).min() >= -1e-12 * c_s.trace

    def test_rejects_asymmetric(self):
        with pytest.raises(InputError):
            CovarianceTarget("query", np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(InputError):
            CovarianceTarget("query", np.diag([1.0, -1.0]))

    def test_empty_queries(self):
        with pytest.raises(EmptyDumpError):
            estimate_query_covariance(np.zeros((2, 0, 4)))


class TestRotation:
    def test_pbr_with_sorted_spectrum_is_bit_reversal(self):
        p = pbr_permutation(np.array([8.0, 7, 6, 5, 4, 3, 2, 1]), 8)
        assert p == bit_reversal(8)

    def test_pbr_places_ranks(self, rng):
        lam = rng.permutation(16).astype(float)
        mapping = pbr_permutation(lam, 16).mapping
        beta = bit_reversal(16).mapping
        sigma = np.argsort(-lam)
        for rank in range(16):
            assert mapping[sigma[rank]] == beta[rank]

    def test_pbr_spreads_top_ranks(self, rng):
        lam = rng.exponential(size=128)
        mapping = pbr_permutation(lam, 128).mapping
        top = np.argsort(-lam)[:4]
        assert sorted(mapping[top] // 32) == [0, 1, 2, 3]

    def test_pbr_top_ranks_at_full_width(self, rng):
        lam = rng.permutation(128).astype(float)
        mapping = pbr_permutation(lam, 128).mapping
        top = np.argsort(-lam)[:8]
        assert mapping[top].tolist() == [0, 64, 32, 96, 16, 80, 48, 112]

    def test_compose_on_diagonal_target(self):
        eig = sym_eig(np.diag([4.0, 3.0, 2.0, 1.0]))
        np.testing.assert_array_equal(eig.vectors, np.eye(4))
        p = pbr_permutation(eig.values, 4)
        assert p.mapping.tolist() == [0, 2, 1, 3]
        r = compose_rotation(eig.vectors, hadamard_matrix(4), p)
        np.testing.assert_array_equal(r, hadamard_matrix(4)[:, [0, 2, 1, 3]])

    def test_compose_matches_dense(self, rng):
        u = random_orthogonal(16, rng)
        h = hadamard_matrix(16)
        p = pbr_permutation(rng.standard_normal(16), 16)
        np.testing.assert_allclose(compose_rotation(u, h, p), u @ h @ p.matrix(), atol=1e-14)

    def test_compose_rejects_non_orthogonal(self):
        with pytest.raises(InputError):
            compose_rotation(2 * np.eye(4), hadamard_matrix(4), bit_reversal(4))

    def test_key_importance_is_equalized(self, dump, bundle):
        c_q, _ = RotationCalibrator().targets(dump, 0, 0)
        r = bundle.slot_for(0, 0).r_k
        diag = np.diag(r.T @ c_q.matrix @ r)
        np.testing.assert_allclose(diag, c_q.trace / dump.head_dim, rtol=1e-6)

    def test_value_importance_is_equalized(self, dump, bundle):
        _, c_s = RotationCalibrator().targets(dump, 1, 1)
        r = bundle.slot_for(1, 1).r_v
        diag = np.diag(r.T @ c_s.matrix @ r)
        np.testing.assert_allclose(diag, c_s.trace / dump.head_dim, rtol=1e-6)


class TestClipSearch:
    def test_picks_minimum(self):
        grid = [0.9, 0.95, 1.0]
        assert select_clip_pair(grid, np.array([3.0, 1.0, 2.0]), np.array([0.5, 0.7, 0.2])) == (0.95, 1.0)

    def test_ties_prefer_larger_ratio(self):
        grid = [0.9, 1.0]
        assert select_clip_pair(grid, np.ones(2), np.ones(2)) == (1.0, 1.0)

    def test_empty_grid(self):
        with pytest.raises(InputError):
            select_clip_pair([], np.array([]), np.array([]))

    def test_calibrate_clip_is_exhaustive(self, dump, head, bundle):
        slot = bundle.slot_for(0, 0)
        k_rot = head.k @ slot.r_k
        v_rot = head.v @ slot.r_v
        c_k, c_v = RotationCalibrator().targets(dump, 0, 0)
        c_k_rot = slot.r_k.T @ c_k.matrix @ slot.r_k
        c_v_rot = slot.r_v.T @ c_v.matrix @ slot.r_v
        config = QuantConfig(bits=2, group_size=128)
        pair = calibrate_clip(k_rot, v_rot, c_k_rot, c_v_rot, config, config, DEFAULT_CLIP_GRID)

        best = min(
            (
                clip_objective(k_rot, c_k_rot, config.model_copy(update={"clip_ratio": a}))
                + clip_objective(v_rot, c_v_rot, config.model_copy(update={"clip_ratio": b})),
                -a, -b,
            )
            for a in DEFAULT_CLIP_GRID
            for b in DEFAULT_CLIP_GRID
        )
        assert pair == (-best[1], -best[2])

    def test_singleton_grid(self, rng):
        x = rng.standard_normal((20, 16)) * 4.0
        config = QuantConfig(bits=2, group_size=8)
        assert calibrate_clip(x, x, np.eye(16), np.eye(16), config, config, [1.0]) == (1.0, 1.0)

    def test_equal_magnitude_rows_keep_full_range(self, rng):
        x = rng.choice([-1.0, 1.0], size=(32, 16))
        config = QuantConfig(bits=2, group_size=16)
        assert calibrate_clip(x, x, np.eye(16), np.eye(16), config, config, [0.9, 1.0]) == (1.0, 1.0)

    def test_objective_is_zero_without_error(self, rng):
        x = np.repeat(rng.standard_normal((5, 1)), 8, axis=1)
        assert clip_objective(x, np.eye(8), QuantConfig(group_size=8)) == pytest.approx(0.0, abs=1e-20)


class TestBundle:
    def test_layout(self, dump, bundle):
        assert bundle.layers == 2
        assert all(len(row) == dump.kv_heads for row in bundle.slots)
        assert bundle.head_dim == 128
        assert bundle.provenance["dump_sha256"] == dump.fingerprint()
        assert bundle.provenance["clip_scope"] == "per-layer"

    def test_rotations_are_orthogonal(self, bundle):
        for row in bundle.slots:
            for slot in row:
                assert orthogonality_error(slot.r_k) < 1e-10
                assert orthogonality_error(slot.r_v) < 1e-10

    def test_clip_ratios_come_from_grid(self, bundle):
        for row in bundle.slots:
            assert row[0].clip_k in DEFAULT_CLIP_GRID and row[0].clip_v in DEFAULT_CLIP_GRID
            # one pair per layer
            assert len({(s.clip_k, s.clip_v) for s in row}) == 1

    def test_quant_configs(self, bundle):
        config_k, config_v = bundle.quant_configs(0, 1, bits=3)
        assert config_k.bits == 3 and config_k.group_size == 128
        assert config_v.clip_ratio == bundle.slot_for(0, 1).clip_v

    def test_shared_heads(self, small_dump):
        bundle = calibrate_bundle(small_dump, CalibrationOptions(group_size_k=8, group_size_v=8, share_heads=True))
        assert [len(row) for row in bundle.slots] == [1]
        assert bundle.slot_for(0, 1) is bundle.slot_for(0, 0)

    def test_shared_matches_per_head_on_identical_heads(self, small_dump):
        q, k, v = small_dump.q.copy(), small_dump.k.copy(), small_dump.v.copy()
        q[:, 1], k[:, 1], v[:, 1] = q[:, 0], k[:, 0], v[:, 0]
        twins = ActivationDump(q=q, k=k, v=v)
        shared = calibrate_bundle(twins, CalibrationOptions(group_size_k=8, group_size_v=8, share_heads=True))
        per_head = calibrate_bundle(twins, CalibrationOptions(group_size_k=8, group_size_v=8))
        a, b = shared.slot_for(0, 0), per_head.slot_for(0, 0)
        np.testing.assert_allclose(a.r_k, b.r_k, atol=1e-10)
        np.testing.assert_allclose(a.r_v, b.r_v, atol=1e-10)
        assert (a.clip_k, a.clip_v) == (b.clip_k, b.clip_v)

    def test_key_rotation_ignores_query_scale(self, small_dump):
        scaled = ActivationDump(q=2.0 * small_dump.q, k=small_dump.k, v=small_dump.v)
        calibrator = RotationCalibrator(CalibrationOptions(group_size_k=8, group_size_v=8))
        base = calibrator.calibrate_slot(small_dump, 0, 0).slot
        again = calibrator.calibrate_slot(scaled, 0, 0).slot
        np.testing.assert_allclose(again.lambda_k, 4.0 * base.lambda_k, rtol=1e-12)
        np.testing.assert_allclose(again.r_k, base.r_k, atol=1e-8)

    def test_global_clip_scope(self, small_dump):
        opts = CalibrationOptions(group_size_k=8, group_size_v=8, per_layer_clip=False)
        assert calibrate_bundle(small_dump, opts).provenance["clip_scope"] == "global"

    def test_raw_target_differs(self, small_dump, small_bundle):
        raw = calibrate_bundle(small_dump, CalibrationOptions(group_size_k=8, group_size_v=8, target="raw"))
        assert raw.provenance["target"] == "raw"
        assert not np.allclose(raw.slots[0][0].r_v, small_bundle.slots[0][0].r_v)

    def test_deterministic(self, small_dump, small_bundle):
        again = calibrate_bundle(small_dump, CalibrationOptions(group_size_k=8, group_size_v=8))
        for a, b in zip(again.slots[0], small_bundle.slots[0]):
            np.testing.assert_array_equal(a.r_k, b.r_k)
            assert (a.clip_k, a.clip_v) == (b.clip_k, b.clip_v)

    def test_parallel_matches_serial(self, small_dump, small_bundle):
        par = calibrate_bundle(small_dump, CalibrationOptions(group_size_k=8, group_size_v=8, n_jobs=2))
        np.testing.assert_allclose(par.slots[0][1].r_v, small_bundle.slots[0][1].r_v, atol=1e-12)

    def test_group_size_must_divide(self, small_dump):
        with pytest.raises(DimensionError):
            calibrate_bundle(small_dump, CalibrationOptions(group_size_k=12))

    def test_empty_grid(self, small_dump):
        with pytest.raises(InputError):
            calibrate_bundle(small_dump, CalibrationOptions(clip_grid=[], group_size_k=8, group_size_v=8))

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            CalibrationOptions(clip_grid=[0.5, 1.2])
