"""
Per-token clipping and per-group affine INT-b quantization of rotated cache rows.

Rows are clipped at the nearest-rank rho-quantile of their absolute values,
split into contiguous groups of G channels, and each group is mapped to codes
in [0, 2^b - 1] with a min-max scale and zero point (round half to even).
Codes are packed little-end-first: code i occupies bits b*i .. b*i+b-1 of the
row's bit stream, bit n living in bit (n % 8) of byte n // 8.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from oscar_kv.config import QuantConfig
from oscar_kv.errors import DimensionError, FormatError, InputError

META_BITS_PER_GROUP = 32
FULL_PRECISION_BITS = 16


# ============================================
# CLIPPING
# ============================================

def _rank_index(ratio: float, d: int) -> int:
    # ceil(rho * d) - 1, guarded against float noise such as 0.9 * 10 = 9.000000000000002
    k = math.ceil(round(ratio * d, 9))
    return min(max(k, 1), d) - 1


def percentile_clip_rows(x: np.ndarray, ratio: float) -> Tuple[np.ndarray, np.ndarray]:
    """Clip every row of x to [-tau, tau], tau the nearest-rank quantile of |row|."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"expected a (tokens, d) matrix, got shape {x.shape}")
    if not 0.0 < ratio <= 1.0:
        raise InputError(f"clip ratio {ratio} outside (0, 1]")
    idx = _rank_index(ratio, x.shape[1])
    tau = np.partition(np.abs(x), idx, axis=1)[:, idx]
    return tau, np.clip(x, -tau[:, None], tau[:, None])


def percentile_clip(row: np.ndarray, ratio: float) -> Tuple[float, np.ndarray]:
    tau, clipped = percentile_clip_rows(np.asarray(row)[None, :], ratio)
    return float(tau[0]), clipped[0]


# ============================================
# PACKING
# ============================================

def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack integer codes of the last axis into bytes (b bits per code)."""
    codes = np.asarray(codes, dtype=np.uint8)
    if np.any(codes > (1 << bits) - 1):
        raise InputError(f"codes do not fit in {bits} bits")
    lead, n = codes.shape[:-1], codes.shape[-1]
    bit_stream = (codes[..., None] >> np.arange(bits, dtype=np.uint8)) & 1
    bit_stream = bit_stream.reshape(*lead, n * bits)
    return np.packbits(bit_stream, axis=-1, bitorder="little")


def unpack_codes(packed: np.ndarray, count: int, bits: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    expected = (count * bits + 7) // 8
    if packed.shape[-1] != expected:
        raise FormatError(
            f"packed row has {packed.shape[-1]} bytes, expected {expected} for "
            f"{count} codes of {bits} bits"
        )
    bit_stream = np.unpackbits(packed, axis=-1, count=count * bits, bitorder="little")
    bit_stream = bit_stream.reshape(*packed.shape[:-1], count, bits)
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return np.sum(bit_stream * weights, axis=-1, dtype=np.uint16).astype(np.uint8)


def to_bf16(x: np.ndarray) -> np.ndarray:
    """Round-trip through bfloat16 by truncating the low 16 bits of a float32."""
    f32 = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    bits = f32.view(np.uint32) & np.uint32(0xFFFF0000)
    return bits.view(np.float32).astype(np.float64)


# ============================================
# QUANTIZE / DEQUANTIZE
# ============================================

@dataclass(frozen=True, eq=False)
class QuantizedBlock:
    """Packed codes and per-group metadata for a batch of rows."""

    packed: np.ndarray  # (n, ceil(d*b/8)) uint8
    scales: np.ndarray  # (n, d/G)
    zeros: np.ndarray  # (n, d/G)
    taus: np.ndarray  # (n,)
    dim: int

    def __len__(self) -> int:
        return int(self.packed.shape[0])

    def row(self, i: int) -> "QuantizedCacheRow":
        return QuantizedCacheRow(
            packed=self.packed[i].copy(),
            scales=self.scales[i].copy(),
            zeros=self.zeros[i].copy(),
            tau=float(self.taus[i]),
            dim=self.dim,
        )


@dataclass(frozen=True, eq=False)
class QuantizedCacheRow:
    """One token's rotated K or V row in packed form."""

    packed: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    tau: float
    dim: int

    def codes(self, config: QuantConfig) -> np.ndarray:
        return unpack_codes(self.packed, self.dim, config.bits)


def quantize_rows(x: np.ndarray, config: QuantConfig, clip: bool = True) -> QuantizedBlock:
    """
    Clip (when clip is set) and quantize every row of x.

    Per group: a = min, b = max, s = max((b - a) / q_max, eps), z = -a / s,
    code = clip(round_half_even(x / s + z), 0, q_max).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a (tokens, d) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("cannot quantize non-finite values")
    n, d = x.shape
    groups = config.groups_for(d)

    if clip and config.clip_ratio < 1.0:
        taus, x = percentile_clip_rows(x, config.clip_ratio)
    else:
        taus = np.max(np.abs(x), axis=1) if d else np.zeros(n)

    g = x.reshape(n, groups, config.group_size)
    lo = g.min(axis=2)
    hi = g.max(axis=2)
    scales = np.maximum((hi - lo) / config.q_max, config.scale_floor)
    zeros = -lo / scales
    if config.bf16_meta:
        scales = np.maximum(to_bf16(scales), config.scale_floor)
        zeros = to_bf16(zeros)
    codes = np.clip(np.rint(g / scales[..., None] + zeros[..., None]), 0, config.q_max)
    packed = pack_codes(codes.reshape(n, d).astype(np.uint8), config.bits)
    return QuantizedBlock(packed=packed, scales=scales, zeros=zeros, taus=taus, dim=d)


def dequantize_rows(block: QuantizedBlock, config: QuantConfig) -> np.ndarray:
    """Per element s_g * (code - z_g)."""
    n, d = len(block), block.dim
    groups = config.groups_for(d)
    if block.scales.shape != (n, groups) or block.zeros.shape != (n, groups):
        raise FormatError("scale/zero metadata does not match the group layout")
    codes = unpack_codes(block.packed, d, config.bits).astype(np.float64)
    codes = codes.reshape(n, groups, config.group_size)
    out = block.scales[..., None] * (codes - block.zeros[..., None])
    return out.reshape(n, d)


def quantize_row(row: np.ndarray, config: QuantConfig, clip: bool = True) -> QuantizedCacheRow:
    return quantize_rows(np.asarray(row, dtype=np.float64)[None, :], config, clip=clip).row(0)


def dequantize_row(q: QuantizedCacheRow, config: QuantConfig) -> np.ndarray:
    block = QuantizedBlock(
        packed=np.asarray(q.packed, dtype=np.uint8)[None, :],
        scales=np.asarray(q.scales)[None, :],
        zeros=np.asarray(q.zeros)[None, :],
        taus=np.array([q.tau]),
        dim=q.dim,
    )
    return dequantize_rows(block, config)[0]


def fake_quantize_rows(x: np.ndarray, config: QuantConfig, clip: bool = True) -> np.ndarray:
    """Quantize then dequantize; identity when the config is a passthrough."""
    x = np.asarray(x, dtype=np.float64)
    if config.passthrough:
        return x.copy()
    return dequantize_rows(quantize_rows(x, config, clip=clip), config)


# ============================================
# RESIDUALS AND STATISTICS
# ============================================

@dataclass(frozen=True, eq=False)
class ResidualCovariance:
    """E = sum_j e_j^T e_j over residual rows e_j = reconstruction_j - original_j."""

    matrix: np.ndarray
    tokens: int

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


def residual_covariance(original: np.ndarray, reconstructed: np.ndarray) -> ResidualCovariance:
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if original.shape != reconstructed.shape or original.ndim != 2:
        raise DimensionError(
            f"residual shapes differ: {original.shape} vs {reconstructed.shape}"
        )
    e = reconstructed - original
    return ResidualCovariance(matrix=e.T @ e, tokens=original.shape[0])


@dataclass(frozen=True, eq=False)
class GroupRangeStats:
    """Mean within-group max-min per group, plus the global max |x|."""

    mean_range: np.ndarray
    max_abs: float

    @property
    def mean_over_groups(self) -> float:
        return float(np.mean(self.mean_range)) if self.mean_range.size else 0.0


def group_dynamic_range_stats(x: np.ndarray, group_size: int) -> GroupRangeStats:
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if group_size < 1 or d % group_size != 0:
        raise DimensionError(f"group size {group_size} does not divide row width {d}")
    g = x.reshape(n, d // group_size, group_size)
    ranges = g.max(axis=2) - g.min(axis=2)
    return GroupRangeStats(
        mean_range=ranges.mean(axis=0),
        max_abs=float(np.max(np.abs(x))) if x.size else 0.0,
    )


def effective_bpe(
    bits: int,
    group_size: int,
    protected_tokens: int,
    context_length: int,
    meta_bits: int = META_BITS_PER_GROUP,
) -> float:
    """
    Average stored bits per cache element.

    (1 - f) * (b + meta/G) + f * 16 with f = protected / L the fraction of
    sink + recent tokens kept at 16 bits.
    """
    if group_size < 1 or bits < 1:
        raise InputError("bits and group size must be positive")
    if context_length <= protected_tokens:
        raise InputError(
            f"context length {context_length} must exceed the {protected_tokens} protected tokens"
        )
    f = protected_tokens / context_length if protected_tokens else 0.0
    return (1.0 - f) * (bits + meta_bits / group_size) + f * FULL_PRECISION_BITS
