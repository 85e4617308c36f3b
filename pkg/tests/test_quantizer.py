import numpy as np
import pytest

from oscar_kv.config import QuantConfig
from oscar_kv.errors import DimensionError, FormatError, InputError
from oscar_kv.quantizer import (
    dequantize_row,
    dequantize_rows,
    effective_bpe,
    fake_quantize_rows,
    group_dynamic_range_stats,
    pack_codes,
    percentile_clip,
    percentile_clip_rows,
    quantize_row,
    quantize_rows,
    residual_covariance,
    to_bf16,
    unpack_codes,
)


class TestClip:
    def test_nearest_rank_quantile(self):
        tau, clipped = percentile_clip(np.arange(1.0, 11.0), 0.9)
        assert tau == 9.0
        assert clipped.max() == 9.0
        assert clipped.tolist()[:9] == list(range(1, 10))

    def test_full_ratio_keeps_row(self, rng):
        row = rng.standard_normal(32)
        tau, clipped = percentile_clip(row, 1.0)
        assert tau == np.max(np.abs(row))
        np.testing.assert_array_equal(clipped, row)

    def test_symmetric_clip(self):
        tau, clipped = percentile_clip(np.array([-8.0, 1.0, 2.0, 3.0]), 0.75)
        assert tau == 3.0
        assert clipped.tolist() == [-3.0, 1.0, 2.0, 3.0]

    def test_rows_are_independent(self):
        x = np.array([[1.0, 2.0, 3.0, 4.0], [10.0, 20.0, 30.0, 40.0]])
        tau, _ = percentile_clip_rows(x, 0.5)
        assert tau.tolist() == [2.0, 20.0]

    def test_bad_ratio(self):
        with pytest.raises(InputError):
            percentile_clip(np.ones(4), 0.0)


class TestPacking:
    def test_little_endian_layout(self):
        assert pack_codes(np.array([0, 1, 2, 3]), 2).tolist() == [0xE4]

    @pytest.mark.slow
    def test_round_trip_fuzz(self, rng):
        codes = rng.integers(0, 4, size=(100_000, 16), dtype=np.uint8)
        packed = pack_codes(codes, 2)
        assert packed.shape == (100_000, 4)
        np.testing.assert_array_equal(unpack_codes(packed, 16, 2), codes)

    @pytest.mark.parametrize("bits", [1, 3, 4, 5, 8])
    def test_round_trip_other_widths(self, rng, bits):
        codes = rng.integers(0, 1 << bits, size=(200, 24), dtype=np.uint8)
        packed = pack_codes(codes, bits)
        assert packed.shape[1] == (24 * bits + 7) // 8
        np.testing.assert_array_equal(unpack_codes(packed, 24, bits), codes)

    def test_code_too_large(self):
        with pytest.raises(InputError):
            pack_codes(np.array([4]), 2)

    def test_wrong_byte_length(self):
        with pytest.raises(FormatError):
            unpack_codes(np.zeros(3, dtype=np.uint8), 16, 2)

    def test_bf16_truncation(self):
        assert to_bf16(np.array([1.0]))[0] == 1.0
        assert to_bf16(np.array([1.0 + 2.0 ** -10]))[0] == 1.0
        assert to_bf16(np.array([1.0 + 2.0 ** -7]))[0] == 1.0 + 2.0 ** -7


class TestQuantize:
    def test_error_within_half_step(self, rng):
        x = rng.standard_normal((1000, 128)) * 3.0
        config = QuantConfig(bits=2, group_size=32)
        block = quantize_rows(x, config)
        recon = dequantize_rows(block, config)
        err = np.abs(recon - x).reshape(1000, 4, 32)
        assert np.all(err <= block.scales[..., None] / 2 + 1e-9)

    def test_requantizing_reconstruction_keeps_codes(self, rng):
        for bits in (2, 3, 4):
            config = QuantConfig(bits=bits, group_size=16)
            for _ in range(200):
                row = rng.standard_normal(64) * rng.uniform(0.1, 10.0)
                first = quantize_row(row, config)
                again = quantize_row(dequantize_row(first, config), config)
                np.testing.assert_array_equal(again.codes(config), first.codes(config))

    def test_more_bits_never_add_residual(self, rng):
        for _ in range(100):
            x = rng.standard_normal((16, 64)) * rng.uniform(0.5, 5.0)
            traces = [
                residual_covariance(x, fake_quantize_rows(x, QuantConfig(bits=b, group_size=32))).trace
                for b in (2, 4, 8)
            ]
            assert traces[0] >= traces[1] >= traces[2]

    def test_residual_trace_is_squared_error_of_clipped_rows(self, rng):
        x = rng.standard_normal((50, 64))
        config = QuantConfig(bits=2, group_size=16, clip_ratio=0.92)
        _, clipped = percentile_clip_rows(x, config.clip_ratio)
        recon = fake_quantize_rows(x, config)
        res = residual_covariance(clipped, recon)
        assert res.trace == pytest.approx(float(np.sum((clipped - recon) ** 2)), rel=1e-9)

    def test_codes_in_range(self, rng):
        config = QuantConfig(bits=3, group_size=16, clip_ratio=0.9)
        block = quantize_rows(rng.standard_normal((20, 64)), config)
        codes = unpack_codes(block.packed, 64, 3)
        assert codes.max() <= 7

    def test_constant_group_is_exact(self):
        row = np.concatenate([np.full(16, 3.7), np.full(16, -1.25), np.zeros(16), np.full(16, 1e-3)])
        config = QuantConfig(bits=2, group_size=16)
        recon = dequantize_row(quantize_row(row, config), config)
        np.testing.assert_allclose(recon, row, rtol=1e-14, atol=0.0)

    def test_group_extremes_are_exact(self, rng):
        # min maps to code 0 and max to q_max
        x = rng.standard_normal((4, 8))
        config = QuantConfig(bits=2, group_size=8)
        recon = fake_quantize_rows(x, config)
        np.testing.assert_allclose(recon.min(axis=1), x.min(axis=1), atol=1e-12)
        np.testing.assert_allclose(recon.max(axis=1), x.max(axis=1), atol=1e-12)

    def test_row_and_block_agree(self, rng):
        x = rng.standard_normal((3, 32))
        config = QuantConfig(bits=2, group_size=8, clip_ratio=0.92)
        block = quantize_rows(x, config)
        for i in range(3):
            np.testing.assert_array_equal(
                dequantize_row(quantize_row(x[i], config), config),
                dequantize_rows(block, config)[i],
            )

    def test_clip_bounds_reconstruction(self, rng):
        x = rng.standard_normal((10, 64))
        config = QuantConfig(bits=2, group_size=64, clip_ratio=0.88)
        block = quantize_rows(x, config)
        recon = dequantize_rows(block, config)
        assert np.all(np.abs(recon) <= block.taus[:, None] + 1e-9)

    def test_passthrough_is_identity(self, rng):
        x = rng.standard_normal((5, 16))
        out = fake_quantize_rows(x, QuantConfig(passthrough=True, group_size=16))
        np.testing.assert_array_equal(out, x)

    def test_bf16_metadata(self, rng):
        config = QuantConfig(bits=2, group_size=16, bf16_meta=True)
        block = quantize_rows(rng.standard_normal((4, 32)), config)
        np.testing.assert_array_equal(to_bf16(block.scales), block.scales)

    def test_group_must_divide(self):
        with pytest.raises(DimensionError):
            quantize_rows(np.zeros((1, 10)), QuantConfig(group_size=4))

    def test_rejects_non_finite(self):
        with pytest.raises(InputError):
            quantize_rows(np.array([[np.inf, 0.0]]), QuantConfig(group_size=2))


class TestStatistics:
    def test_residual_trace_matches_loop(self, rng):
        x = rng.standard_normal((30, 8))
        recon = x + 0.1 * rng.standard_normal((30, 8))
        res = residual_covariance(x, recon)
        naive = sum(float(np.sum((recon[j] - x[j]) ** 2)) for j in range(30))
        assert res.trace == pytest.approx(naive, rel=1e-12)
        assert res.tokens == 30

    def test_group_ranges(self):
        x = np.array([[0.0, 1.0, 5.0, 9.0], [2.0, 2.0, -1.0, 1.0]])
        stats = group_dynamic_range_stats(x, 2)
        assert stats.mean_range.tolist() == [0.5, 3.0]
        assert stats.max_abs == 9.0
        assert stats.mean_over_groups == 1.75

    def test_bpe_without_protection(self):
        assert effective_bpe(2, 128, 0, 1024) == pytest.approx(2.25)

    def test_bpe_long_context(self):
        assert effective_bpe(2, 128, 320, 131072) == pytest.approx(2.28, abs=0.005)

    def test_bpe_32k(self):
        assert effective_bpe(2, 128, 320, 32768) == pytest.approx(2.38, abs=0.005)

    def test_bpe_needs_unprotected_tokens(self):
        with pytest.raises(InputError):
            effective_bpe(2, 128, 320, 320)
