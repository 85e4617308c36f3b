"""
Mixed-precision KV-cache simulator.

The cache keeps the first S0 tokens (attention sinks) and the W most recent
tokens in full precision. Everything in between lives in rotated space as
packed INT-b codes. Each decode step attends over the three segments with an
online-softmax merge; quantized history is dequantized and rotated back by
R^T before use.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from oscar_kv.calibration import (
    ActivationDump,
    HeadSlice,
    RotationBundle,
    RotationSlot,
    estimate_query_covariance,
    estimate_score_value_covariance,
    pbr_permutation,
)
from oscar_kv.config import CacheLayout, EvalOptions, QuantConfig, RotationMode
from oscar_kv.errors import DimensionError, InputError, NumericalError
from oscar_kv.linalg_core import apply_permutation_columns, fwht_rows, masked_softmax_rows
from oscar_kv.quantizer import (
    FULL_PRECISION_BITS,
    QuantizedBlock,
    QuantizedCacheRow,
    dequantize_rows,
    effective_bpe,
    group_dynamic_range_stats,
    quantize_rows,
    residual_covariance,
)

logger = logging.getLogger(__name__)

KL_EPS = 1e-12
IDENTITY_RTOL = 1e-8


# ============================================
# ROTATION PLANS
# ============================================

@dataclass(frozen=True, eq=False)
class RotationPlan:
    """Rotations and quantizer configs a cache uses for one head."""

    r_k: np.ndarray
    r_v: np.ndarray
    config_k: QuantConfig
    config_v: QuantConfig
    mode: str = "oscar"


def rotation_for_mode(
    slot: RotationSlot,
    mode: RotationMode,
    config_k: QuantConfig,
    config_v: QuantConfig,
) -> RotationPlan:
    """
    Resolve a rotation mode against a calibrated slot.

    oscar uses R = U.H.P as stored; hadamard uses H alone; eigen uses U alone;
    no-pbr drops P, no-hadamard drops H, hadamard-pbr drops U. none keeps the
    identity with the calibrated clip, naive is identity with no clipping, and
    passthrough stores rows exactly.
    """
    d = slot.r_k.shape[0]
    eye = np.eye(d)
    h = fwht_rows(eye)
    if mode == "oscar" or mode == "passthrough":
        r_k, r_v = slot.r_k, slot.r_v
    elif mode == "hadamard":
        r_k, r_v = h, h
    elif mode == "eigen":
        r_k, r_v = slot.u_k, slot.u_v
    elif mode == "no-pbr":
        r_k, r_v = fwht_rows(slot.u_k), fwht_rows(slot.u_v)
    elif mode == "no-hadamard":
        r_k = apply_permutation_columns(slot.u_k, pbr_permutation(slot.lambda_k, d))
        r_v = apply_permutation_columns(slot.u_v, pbr_permutation(slot.lambda_v, d))
    elif mode == "hadamard-pbr":
        r_k = apply_permutation_columns(h, pbr_permutation(slot.lambda_k, d))
        r_v = apply_permutation_columns(h, pbr_permutation(slot.lambda_v, d))
    elif mode in ("none", "naive"):
        r_k, r_v = eye, eye
    else:
        raise InputError(f"unknown rotation mode {mode!r}")

    if mode == "naive":
        config_k = config_k.model_copy(update={"clip_ratio": 1.0})
        config_v = config_v.model_copy(update={"clip_ratio": 1.0})
    if mode == "passthrough":
        config_k = config_k.model_copy(update={"passthrough": True})
        config_v = config_v.model_copy(update={"passthrough": True})
    return RotationPlan(
        r_k=np.array(r_k, dtype=np.float64),
        r_v=np.array(r_v, dtype=np.float64),
        config_k=config_k,
        config_v=config_v,
        mode=mode,
    )


# ============================================
# ATTENTION
# ============================================

Segment = Tuple[np.ndarray, ...]


def segmented_attention(q: np.ndarray, segments: Sequence[Segment], scale: Optional[float] = None) -> np.ndarray:
    """
    softmax(q K^T * scale) V over the concatenation of segments, without
    concatenating them.

    Each segment is (K, V) or (K, V, bias) where bias is added to the logits
    (-inf masks a position). Partial results are merged with a running max
    and normalizer. Empty segments are skipped; a query with no visible
    position raises NumericalError.
    """
    q = np.array(q, dtype=np.float64, ndmin=2)
    d = q.shape[1]
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    m = np.full(q.shape[0], -np.inf)
    norm = np.zeros(q.shape[0])
    acc: Optional[np.ndarray] = None

    for seg in segments:
        k, v = np.asarray(seg[0], dtype=np.float64), np.asarray(seg[1], dtype=np.float64)
        if k.shape[0] == 0:
            continue
        if k.shape[1] != d or v.shape[0] != k.shape[0]:
            raise DimensionError(f"segment shapes k {k.shape}, v {v.shape} do not match q {q.shape}")
        logits = q @ k.T * scale
        if len(seg) > 2 and seg[2] is not None:
            logits = logits + np.asarray(seg[2], dtype=np.float64)
        if acc is None:
            acc = np.zeros((q.shape[0], v.shape[1]))

        new_m = np.maximum(m, np.max(logits, axis=1))
        finite = np.isfinite(new_m)
        with np.errstate(invalid="ignore"):
            alpha = np.where(np.isfinite(m) & finite, np.exp(np.where(finite, m - new_m, 0.0)), 0.0)
        shifted = np.where(finite[:, None], logits - np.where(finite, new_m, 0.0)[:, None], -np.inf)
        p = np.exp(shifted)
        norm = norm * alpha + p.sum(axis=1)
        acc = acc * alpha[:, None] + p @ v
        m = new_m

    if acc is None:
        raise NumericalError("attention over an empty cache")
    if np.any(norm <= 0.0):
        raise NumericalError("a query row sees no unmasked position")
    return acc / norm[:, None]


def full_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool = False) -> np.ndarray:
    """Monolithic softmax(q K^T / sqrt d) V."""
    q = np.array(q, dtype=np.float64, ndmin=2)
    k = np.asarray(k, dtype=np.float64)
    scores = masked_softmax_rows(q @ k.T / math.sqrt(q.shape[1]), causal=causal)
    return scores @ np.asarray(v, dtype=np.float64)


def attention_kl(p: np.ndarray, p_hat: np.ndarray, eps: float = KL_EPS) -> float:
    """Mean over rows of KL(p || p_hat), with p_hat floored at eps and 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p.shape != p_hat.shape:
        raise DimensionError(f"distribution shapes differ: {p.shape} vs {p_hat.shape}")
    ratio = np.where(p > 0.0, p / np.maximum(p_hat, eps), 1.0)
    terms = np.where(p > 0.0, p * np.log(ratio), 0.0)
    return float(np.mean(np.sum(terms, axis=-1)))


# ============================================
# CACHE STATE
# ============================================

class KvCacheState:
    """
    Sink / quantized history / recent window partition of one head's cache.

    Positions are 1-based. The sink fills first; after that new tokens enter
    the recent window and the oldest recent token is demoted (quantized in
    rotated space) once the window holds more than W tokens.
    """

    def __init__(self, plan: RotationPlan, layout: CacheLayout):
        self.plan = plan
        self.layout = layout
        self.sink_k: List[np.ndarray] = []
        self.sink_v: List[np.ndarray] = []
        # (position, k, v) raw rows plus their rotated copies awaiting demotion
        self.recent: Deque[Tuple[int, np.ndarray, np.ndarray]] = deque()
        self.staging: Deque[Tuple[np.ndarray, np.ndarray]] = deque()
        self.history_positions: List[int] = []
        self.history_k: List[QuantizedCacheRow] = []
        self.history_v: List[QuantizedCacheRow] = []
        # passthrough keeps the rotated float rows instead of codes
        self._exact_k: List[np.ndarray] = []
        self._exact_v: List[np.ndarray] = []
        self.t = 0

    @property
    def head_dim(self) -> int:
        return int(self.plan.r_k.shape[0])

    @property
    def history_len(self) -> int:
        return len(self.history_positions)

    def _check_rows(self, k: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        k = np.array(k, dtype=np.float64, ndmin=2)
        v = np.array(v, dtype=np.float64, ndmin=2)
        d = self.head_dim
        if k.shape != v.shape or k.shape[1] != d:
            raise DimensionError(f"expected (n, {d}) K and V rows, got {k.shape} and {v.shape}")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
            raise InputError("cache rows must be finite")
        return k, v

    def _store_history(self, positions: Sequence[int], k_rot: np.ndarray, v_rot: np.ndarray) -> None:
        if len(positions) == 0:
            return
        self.history_positions.extend(positions)
        if self.plan.config_k.passthrough:
            self._exact_k.extend(k_rot)
            self._exact_v.extend(v_rot)
            return
        block_k = quantize_rows(k_rot, self.plan.config_k)
        block_v = quantize_rows(v_rot, self.plan.config_v)
        self.history_k.extend(block_k.row(i) for i in range(len(block_k)))
        self.history_v.extend(block_v.row(i) for i in range(len(block_v)))

    def _history_rows(self) -> Tuple[np.ndarray, np.ndarray]:
        """Dequantized history rotated back to the original basis."""
        d = self.head_dim
        if not self.history_positions:
            return np.zeros((0, d)), np.zeros((0, d))
        if self.plan.config_k.passthrough:
            k_rot, v_rot = np.stack(self._exact_k), np.stack(self._exact_v)
        else:
            k_rot = dequantize_rows(_stack_rows(self.history_k, d), self.plan.config_k)
            v_rot = dequantize_rows(_stack_rows(self.history_v, d), self.plan.config_v)
        return k_rot @ self.plan.r_k.T, v_rot @ self.plan.r_v.T

    def _demote_overflow(self) -> None:
        while len(self.recent) > self.layout.recent:
            pos, _, _ = self.recent.popleft()
            k_rot, v_rot = self.staging.popleft()
            self._store_history([pos], k_rot[None, :], v_rot[None, :])

    def prefill(self, k: np.ndarray, v: np.ndarray) -> "KvCacheState":
        """Place a prompt of n tokens: sink first, recent window last, history between."""
        if self.t:
            raise InputError("prefill requires an empty cache")
        k, v = self._check_rows(k, v)
        n = k.shape[0]
        if n < 1:
            raise InputError("prefill needs at least one token")
        s = min(n, self.layout.sink)
        r = min(n - s, self.layout.recent)
        mid = n - s - r

        self.sink_k.extend(k[:s])
        self.sink_v.extend(v[:s])
        k_rot = k[s:] @ self.plan.r_k
        v_rot = v[s:] @ self.plan.r_v
        self._store_history(list(range(s + 1, s + mid + 1)), k_rot[:mid], v_rot[:mid])
        for i in range(s + mid, n):
            self.recent.append((i + 1, k[i], v[i]))
            self.staging.append((k_rot[i - s], v_rot[i - s]))
        self.t = n
        logger.debug("prefill n=%d sink=%d history=%d recent=%d", n, s, mid, r)
        return self

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        """Insert one token and demote if the recent window overflows."""
        k, v = self._check_rows(k, v)
        k, v = k[0], v[0]
        self.t += 1
        if len(self.sink_k) < self.layout.sink:
            self.sink_k.append(k)
            self.sink_v.append(v)
            return
        self.recent.append((self.t, k, v))
        self.staging.append((k @ self.plan.r_k, v @ self.plan.r_v))
        self._demote_overflow()

    def segments(self) -> List[Segment]:
        d = self.head_dim
        hist_k, hist_v = self._history_rows()
        sink_k = np.stack(self.sink_k) if self.sink_k else np.zeros((0, d))
        sink_v = np.stack(self.sink_v) if self.sink_v else np.zeros((0, d))
        rec_k = np.stack([row[1] for row in self.recent]) if self.recent else np.zeros((0, d))
        rec_v = np.stack([row[2] for row in self.recent]) if self.recent else np.zeros((0, d))
        return [(sink_k, sink_v), (hist_k, hist_v), (rec_k, rec_v)]

    def decode_step(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Append (k, v) then attend with q (one row or a (g, d) group) over the cache."""
        self.append(k, v)
        return segmented_attention(q, self.segments())

    def reconstruct(self) -> Tuple[np.ndarray, np.ndarray]:
        """K-hat and V-hat for positions 1..t in order."""
        k_parts, v_parts = zip(*self.segments())
        return np.concatenate(k_parts), np.concatenate(v_parts)

    def check_partition(self) -> None:
        """Sink, history and recent positions must tile 1..t exactly."""
        sink = list(range(1, len(self.sink_k) + 1))
        recent = [row[0] for row in self.recent]
        positions = sink + self.history_positions + recent
        if positions != list(range(1, self.t + 1)):
            raise NumericalError("cache segments do not partition 1..t")
        if len(self.sink_k) != min(self.t, self.layout.sink):
            raise NumericalError("sink segment has the wrong length")
        if len(self.recent) > self.layout.recent:
            raise NumericalError("recent window exceeds its capacity")


def _stack_rows(rows: Sequence[QuantizedCacheRow], d: int) -> QuantizedBlock:
    return QuantizedBlock(
        packed=np.stack([r.packed for r in rows]),
        scales=np.stack([r.scales for r in rows]),
        zeros=np.stack([r.zeros for r in rows]),
        taus=np.array([r.tau for r in rows]),
        dim=d,
    )


def prefill(k: np.ndarray, v: np.ndarray, plan: RotationPlan, layout: CacheLayout) -> KvCacheState:
    return KvCacheState(plan, layout).prefill(k, v)


def decode_step(cache: KvCacheState, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    return cache.decode_step(q, k, v)


# ============================================
# DISTORTION REPORT
# ============================================

class DistortionReport(BaseModel):
    """Reconstruction and attention-level distortion of one head."""

    mode: str
    layer: int
    head: int
    tokens: int
    sink_tokens: int
    history_tokens: int
    recent_tokens: int
    bits: int
    group_size_k: int
    group_size_v: int
    clip_k: float
    clip_v: float
    rel_mse_k: float
    rel_mse_v: float
    logit_mse: float
    output_mse: float
    attention_kl: float
    trace_e_k: float
    trace_e_v: float
    importance_ratio_k: float
    importance_ratio_v: float
    group_range_k: List[float]
    group_range_v: List[float]
    mean_group_range_k: float
    mean_group_range_v: float
    max_abs_k: float
    max_abs_v: float
    effective_bpe: float
    decode_max_rel_error: float


def _relative_mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    denom = float(np.sum(x * x))
    return float(np.sum((x - x_hat) ** 2)) / denom if denom > 0.0 else 0.0


def _importance_ratio(c_rot: np.ndarray) -> float:
    diag = np.diag(c_rot)
    mean = float(np.mean(diag))
    return float(np.max(diag)) / mean if mean > 0.0 else 1.0


def _check_identity(name: str, direct: float, trace_form: float, scale: float) -> None:
    floor = 1e-24 * scale
    if abs(direct - trace_form) > IDENTITY_RTOL * max(abs(direct), abs(trace_form)) + floor:
        raise NumericalError(
            f"{name} identity violated: direct {direct:.6e} vs trace form {trace_form:.6e}"
        )


def _stacked_causal_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Causal softmax rows of every grouped query head, stacked to (g*T, T)."""
    scale = 1.0 / math.sqrt(k.shape[1])
    return np.concatenate([masked_softmax_rows(qi @ k.T * scale, causal=True) for qi in q])


def _resolve_configs(bundle: RotationBundle, slot: RotationSlot, options: EvalOptions) -> Tuple[QuantConfig, QuantConfig]:
    bits = bundle.bits if options.bits is None else options.bits
    gk = bundle.group_size_k if options.group_size is None else options.group_size
    gv = bundle.group_size_v if options.group_size is None else options.group_size
    clip_k = slot.clip_k if options.clip_ratio is None else options.clip_ratio
    clip_v = slot.clip_v if options.clip_ratio is None else options.clip_ratio
    config_k = QuantConfig(bits=bits, group_size=gk, clip_ratio=clip_k, bf16_meta=options.bf16_meta)
    config_v = QuantConfig(bits=bits, group_size=gv, clip_ratio=clip_v, bf16_meta=options.bf16_meta)
    return config_k, config_v


def evaluate_distortion(
    head: HeadSlice,
    bundle: RotationBundle,
    layout: CacheLayout,
    options: Optional[EvalOptions] = None,
) -> DistortionReport:
    """
    Run one head's tokens through the simulated cache and measure distortion.

    The first half of the tokens (or options.prefill_tokens) is prefilled,
    the rest decoded one at a time with the last grouped query. Metrics are
    computed on the final cache contents against full-precision K and V.
    """
    options = options or EvalOptions()
    slot = bundle.slot_for(head.layer, head.head)
    config_k, config_v = _resolve_configs(bundle, slot, options)
    plan = rotation_for_mode(slot, options.mode, config_k, config_v)

    k = np.asarray(head.k, dtype=np.float64)
    v = np.asarray(head.v, dtype=np.float64)
    q = np.asarray(head.q, dtype=np.float64)
    t, d = k.shape
    n0 = min(options.prefill_tokens or max(t // 2, 1), t)

    cache = prefill(k[:n0], v[:n0], plan, layout)
    decode_err = 0.0
    for i in range(n0, t):
        out = cache.decode_step(q[:, i, :], k[i], v[i])
        ref = full_attention(q[:, i, :], k[: i + 1], v[: i + 1])
        ref_norm = float(np.linalg.norm(ref))
        err = float(np.linalg.norm(out - ref))
        decode_err = max(decode_err, err / ref_norm if ref_norm > 0.0 else err)
    cache.check_partition()
    k_hat, v_hat = cache.reconstruct()

    q_rows = head.stacked_queries().astype(np.float64)
    dk = k - k_hat
    dv = v - v_hat
    logit_mse = float(np.sum((q_rows @ k.T - q_rows @ k_hat.T) ** 2))
    _check_identity(
        "logit", logit_mse, float(np.trace(dk @ (q_rows.T @ q_rows) @ dk.T)),
        float(np.sum(q_rows ** 2) * np.sum(k ** 2)),
    )
    scores = _stacked_causal_scores(q, k)
    output_mse = float(np.sum((scores @ v - scores @ v_hat) ** 2))
    _check_identity(
        "output", output_mse, float(np.trace(dv.T @ (scores.T @ scores) @ dv)),
        float(np.sum(scores ** 2) * np.sum(v ** 2)),
    )
    kl = attention_kl(scores, _stacked_causal_scores(q, k_hat))

    hist = np.asarray(cache.history_positions, dtype=np.int64) - 1
    e_k = residual_covariance(k[hist] @ plan.r_k, k_hat[hist] @ plan.r_k)
    e_v = residual_covariance(v[hist] @ plan.r_v, v_hat[hist] @ plan.r_v)

    c_q = estimate_query_covariance(q).matrix
    c_s = estimate_score_value_covariance(q, k, v, causal=True).matrix
    range_k = group_dynamic_range_stats(k @ plan.r_k, config_k.group_size)
    range_v = group_dynamic_range_stats(v @ plan.r_v, config_v.group_size)

    context = options.context_length or t
    if plan.config_k.passthrough or context <= layout.protected:
        bpe = float(FULL_PRECISION_BITS)
    else:
        bpe = 0.5 * (
            effective_bpe(config_k.bits, config_k.group_size, layout.protected, context)
            + effective_bpe(config_v.bits, config_v.group_size, layout.protected, context)
        )

    return DistortionReport(
        mode=options.mode,
        layer=head.layer,
        head=head.head,
        tokens=t,
        sink_tokens=len(cache.sink_k),
        history_tokens=cache.history_len,
        recent_tokens=len(cache.recent),
        bits=config_k.bits,
        group_size_k=config_k.group_size,
        group_size_v=config_v.group_size,
        clip_k=plan.config_k.clip_ratio,
        clip_v=plan.config_v.clip_ratio,
        rel_mse_k=_relative_mse(k, k_hat),
        rel_mse_v=_relative_mse(v, v_hat),
        logit_mse=logit_mse,
        output_mse=output_mse,
        attention_kl=kl,
        trace_e_k=e_k.trace,
        trace_e_v=e_v.trace,
        importance_ratio_k=_importance_ratio(plan.r_k.T @ c_q @ plan.r_k),
        importance_ratio_v=_importance_ratio(plan.r_v.T @ c_s @ plan.r_v),
        group_range_k=[float(x) for x in range_k.mean_range],
        group_range_v=[float(x) for x in range_v.mean_range],
        mean_group_range_k=range_k.mean_over_groups,
        mean_group_range_v=range_v.mean_over_groups,
        max_abs_k=range_k.max_abs,
        max_abs_v=range_v.max_abs,
        effective_bpe=bpe,
        decode_max_rel_error=decode_err,
    )


class EvalSummary(BaseModel):
    """Per-head reports plus their means over heads."""

    mode: str
    reports: List[DistortionReport]
    means: Dict[str, float]


SUMMARY_FIELDS = (
    "rel_mse_k", "rel_mse_v", "logit_mse", "output_mse", "attention_kl",
    "trace_e_k", "trace_e_v", "importance_ratio_k", "importance_ratio_v",
    "mean_group_range_k", "mean_group_range_v", "effective_bpe", "decode_max_rel_error",
)


def evaluate_dump(
    dump: ActivationDump,
    bundle: RotationBundle,
    layout: CacheLayout,
    options: Optional[EvalOptions] = None,
) -> EvalSummary:
    """Evaluate every (layer, kv-head) of a dump and average the metrics."""
    options = options or EvalOptions()
    if bundle.layers != dump.layers or bundle.head_dim != dump.head_dim:
        raise DimensionError(
            f"bundle ({bundle.layers} layers, d={bundle.head_dim}) does not match dump "
            f"({dump.layers} layers, d={dump.head_dim})"
        )
    if not bundle.share_heads and len(bundle.slots[0]) != dump.kv_heads:
        raise DimensionError(
            f"bundle has {len(bundle.slots[0])} head slots, dump has {dump.kv_heads} kv-heads"
        )
    reports = [
        evaluate_distortion(dump.head(layer, h), bundle, layout, options)
        for layer in range(dump.layers)
        for h in range(dump.kv_heads)
    ]
    means = {
        name: float(np.mean([getattr(r, name) for r in reports])) for name in SUMMARY_FIELDS
    }
    logger.info("✅ Evaluated %d heads in %s mode", len(reports), options.mode)
    return EvalSummary(mode=options.mode, reports=reports, means=means)
