"""
Offline calibration: attention-aware covariance targets -> rotations and clip ratios.

For every layer and kv-head (or one slot per layer when heads share a
rotation) the calibrator estimates C_Q from the grouped queries and C_S from
the attention-weighted values, diagonalizes both, and composes
R = U . H . P_br. Clip ratios come from an exhaustive grid search on the
frozen-error surrogate tr(R^T C R E(rho)).
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from oscar_kv.config import CalibrationOptions, QuantConfig, is_power_of_two
from oscar_kv.errors import DimensionError, EmptyDumpError, InputError
from oscar_kv.linalg_core import (
    Permutation,
    apply_permutation_columns,
    bit_reversal,
    hadamard_matrix,
    masked_softmax_rows,
    sym_eig,
)
from oscar_kv.quantizer import fake_quantize_rows, residual_covariance

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-6
PSD_TOL = 1e-8


# ============================================
# ACTIVATION DUMPS
# ============================================

@dataclass(frozen=True, eq=False)
class HeadSlice:
    """Calibration tensors of one (layer, kv-head): q is (g, T, d), k and v are (T, d)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    layer: int = 0
    head: int = 0

    @property
    def tokens(self) -> int:
        return int(self.k.shape[0])

    @property
    def head_dim(self) -> int:
        return int(self.k.shape[1])

    def stacked_queries(self) -> np.ndarray:
        """All grouped query rows as one (g*T, d) matrix."""
        return self.q.reshape(-1, self.head_dim)


@dataclass(frozen=True, eq=False)
class ActivationDump:
    """
    Per-layer Q, K, V calibration activations.

    q: (layers, kv_heads, gqa_ratio, T, d); k, v: (layers, kv_heads, T, d).
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float32)
        k = np.asarray(self.k, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if q.ndim != 5 or k.ndim != 4 or v.ndim != 4:
            raise DimensionError(
                f"expected q rank 5 and k, v rank 4; got {q.ndim}, {k.ndim}, {v.ndim}"
            )
        if k.shape != v.shape:
            raise DimensionError(f"k {k.shape} and v {v.shape} differ")
        if q.shape[:2] != k.shape[:2] or q.shape[3:] != k.shape[2:]:
            raise DimensionError(f"q {q.shape} does not match k {k.shape}")
        if k.shape[2] < 1:
            raise EmptyDumpError("activation dump has no tokens")
        if not is_power_of_two(k.shape[3]):
            raise DimensionError(f"head_dim must be a power of two, got {k.shape[3]}")
        for name, arr in (("q", q), ("k", k), ("v", v)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} has non-finite entries")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def layers(self) -> int:
        return int(self.k.shape[0])

    @property
    def kv_heads(self) -> int:
        return int(self.k.shape[1])

    @property
    def gqa_ratio(self) -> int:
        return int(self.q.shape[2])

    @property
    def tokens(self) -> int:
        return int(self.k.shape[2])

    @property
    def head_dim(self) -> int:
        return int(self.k.shape[3])

    def head(self, layer: int, head: int) -> HeadSlice:
        return HeadSlice(
            q=self.q[layer, head].astype(np.float64),
            k=self.k[layer, head].astype(np.float64),
            v=self.v[layer, head].astype(np.float64),
            layer=layer,
            head=head,
        )

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for arr in (self.q, self.k, self.v):
            digest.update(str(arr.shape).encode())
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()


# ============================================
# COVARIANCE TARGETS
# ============================================

TargetKind = Literal["query", "score-value", "raw-key", "raw-value"]


@dataclass(frozen=True, eq=False)
class CovarianceTarget:
    """Symmetric PSD second-moment matrix whose eigenbasis defines a rotation."""

    kind: TargetKind
    matrix: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.matrix, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise DimensionError(f"covariance must be square, got {c.shape}")
        if float(np.max(np.abs(c - c.T))) > 1e-7 * max(1.0, float(np.max(np.abs(c)))):
            raise InputError(f"{self.kind} covariance is not symmetric")
        c = 0.5 * (c + c.T)
        floor = -PSD_TOL * max(float(np.trace(c)), 0.0)
        if np.linalg.eigvalsh(c)[0] < floor - 1e-300:
            raise InputError(f"{self.kind} covariance is not positive semidefinite")
        object.__setattr__(self, "matrix", c)

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


def _gram_mean(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        raise EmptyDumpError("no calibration rows")
    return rows.T @ rows / rows.shape[0]


def estimate_query_covariance(q: np.ndarray) -> CovarianceTarget:
    """
    C_Q for one kv-head (q of shape (g, T, d)) or shared across heads
    (q of shape (H, g, T, d)).

    Every head and grouped query contributes (1/(T*g)) Q_i^T Q_i, averaged
    over the heads used.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim < 2 or q.shape[-2] == 0:
        raise EmptyDumpError("query slice has no tokens")
    return CovarianceTarget("query", _gram_mean(q.reshape(-1, q.shape[-1])))


def _score_value_sum(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool, block: int) -> np.ndarray:
    t, d = k.shape
    scale = 1.0 / math.sqrt(d)
    acc = np.zeros((v.shape[1], v.shape[1]))
    cols = np.arange(t)
    for start in range(0, q.shape[0], block):
        stop = min(start + block, q.shape[0])
        logits = q[start:stop] @ k.T * scale
        keep = cols[None, :] <= np.arange(start, stop)[:, None] if causal else None
        sv = masked_softmax_rows(logits, mask=keep) @ v
        acc += sv.T @ sv
    return acc


def estimate_score_value_covariance(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    causal: bool = True,
    block: int = 1024,
) -> CovarianceTarget:
    """
    C_S = (1/T) (SV)^T (SV) with S = softmax_row(Q K^T / sqrt d + M).

    q may be (T, d) or a (g, T, d) stack of grouped query heads, averaged.
    The score matrix is built block by block over query rows.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    if k.shape[0] == 0:
        raise EmptyDumpError("score-value slice has no tokens")
    if q.shape[1:] != k.shape or v.shape[0] != k.shape[0]:
        raise DimensionError(f"inconsistent shapes q {q.shape}, k {k.shape}, v {v.shape}")
    acc = sum(_score_value_sum(qi, k, v, causal, block) for qi in q)
    return CovarianceTarget("score-value", acc / (q.shape[0] * k.shape[0]))


def estimate_raw_covariance(x: np.ndarray, kind: TargetKind) -> CovarianceTarget:
    """Raw-cache reconstruction target X^T X / N (keys or values)."""
    x = np.asarray(x, dtype=np.float64)
    return CovarianceTarget(kind, _gram_mean(x.reshape(-1, x.shape[-1])))


# ============================================
# ROTATIONS
# ============================================

def pbr_permutation(eigenvalues: np.ndarray, d: int) -> Permutation:
    """
    Permuted bit-reversal: the k-th largest eigen-coordinate sigma(k) is
    placed at position beta(k), i.e. (P)_{:, beta(k)} = e_{sigma(k)}.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    if eigenvalues.shape != (d,):
        raise DimensionError(f"expected {d} eigenvalues, got shape {eigenvalues.shape}")
    sigma = np.argsort(-eigenvalues, kind="stable")
    beta = bit_reversal(d).mapping
    mapping = np.empty(d, dtype=np.int64)
    mapping[sigma] = beta
    return Permutation(mapping)


def orthogonality_error(r: np.ndarray) -> float:
    r = np.asarray(r, dtype=np.float64)
    return float(np.max(np.abs(r.T @ r - np.eye(r.shape[1]))))


def compose_rotation(u: np.ndarray, h: np.ndarray, p: Permutation) -> np.ndarray:
    """R = U . H . P."""
    u = np.asarray(u, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    d = u.shape[0]
    if u.shape != (d, d) or h.shape != (d, d) or p.size != d:
        raise DimensionError(f"rotation factors disagree: U {u.shape}, H {h.shape}, P {p.size}")
    if orthogonality_error(u) > ORTHO_TOL:
        raise InputError("eigenbasis is not orthonormal")
    return apply_permutation_columns(u @ h, p)


# ============================================
# CLIP CALIBRATION
# ============================================

def clip_objective(x_rot: np.ndarray, c_rot: np.ndarray, config: QuantConfig) -> float:
    """Frozen-error surrogate tr(C_rot E) for the config's clip ratio."""
    recon = fake_quantize_rows(x_rot, config)
    e = residual_covariance(x_rot, recon).matrix
    return float(np.sum(c_rot * e))


def clip_costs(x_rot: np.ndarray, c_rot: np.ndarray, config: QuantConfig, grid: Sequence[float]) -> np.ndarray:
    return np.array(
        [clip_objective(x_rot, c_rot, config.model_copy(update={"clip_ratio": r})) for r in grid]
    )


def select_clip_pair(grid: Sequence[float], cost_k: np.ndarray, cost_v: np.ndarray) -> Tuple[float, float]:
    """Grid pair with the smallest summed cost; ties go to the larger ratios."""
    if len(grid) == 0:
        raise InputError("clip grid is empty")
    order = sorted(range(len(grid)), key=lambda idx: -grid[idx])
    best: Optional[Tuple[float, float, float]] = None
    for i in order:
        for j in order:
            total = float(cost_k[i] + cost_v[j])
            if best is None or total < best[0]:
                best = (total, grid[i], grid[j])
    return best[1], best[2]


def calibrate_clip(
    k_rot: np.ndarray,
    v_rot: np.ndarray,
    c_k_rot: np.ndarray,
    c_v_rot: np.ndarray,
    config_k: QuantConfig,
    config_v: QuantConfig,
    grid: Sequence[float],
) -> Tuple[float, float]:
    """
    Exhaustive search over grid x grid for the pair minimizing
    tr(R_K^T C_Q R_K E_K(rho_K)) + tr(R_V^T C_S R_V E_V(rho_V)).

    k_rot / v_rot are the rotated calibration rows, c_*_rot the targets
    expressed in the rotated frame.
    """
    if len(grid) == 0:
        raise InputError("clip grid is empty")
    for ratio in grid:
        if not 0.0 < ratio <= 1.0:
            raise InputError(f"clip ratio {ratio} outside (0, 1]")
    cost_k = clip_costs(k_rot, c_k_rot, config_k, grid)
    cost_v = clip_costs(v_rot, c_v_rot, config_v, grid)
    return select_clip_pair(grid, cost_k, cost_v)


# ============================================
# BUNDLES
# ============================================

@dataclass(frozen=True, eq=False)
class RotationSlot:
    """Rotations, eigen-factors and clip ratios of one (layer, head-or-shared) slot."""

    r_k: np.ndarray
    r_v: np.ndarray
    u_k: np.ndarray
    u_v: np.ndarray
    lambda_k: np.ndarray
    lambda_v: np.ndarray
    clip_k: float = 1.0
    clip_v: float = 1.0

    def with_clip(self, clip_k: float, clip_v: float) -> "RotationSlot":
        return RotationSlot(self.r_k, self.r_v, self.u_k, self.u_v,
                            self.lambda_k, self.lambda_v, clip_k, clip_v)


@dataclass(frozen=True, eq=False)
class RotationBundle:
    """
    Calibration output reused at evaluation time.

    slots[layer] holds one slot per kv-head, or a single slot when heads share.
    """

    slots: List[List[RotationSlot]]
    group_size_k: int
    group_size_v: int
    bits: int = 2
    share_heads: bool = False
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.slots or not self.slots[0]:
            raise InputError("bundle has no slots")
        d = self.head_dim
        for size in (self.group_size_k, self.group_size_v):
            if size < 1 or d % size != 0:
                raise DimensionError(f"group size {size} does not divide head_dim {d}")
        for layer in self.slots:
            for slot in layer:
                for r in (slot.r_k, slot.r_v):
                    if orthogonality_error(r) > ORTHO_TOL:
                        raise InputError("stored rotation is not orthogonal")
                for ratio in (slot.clip_k, slot.clip_v):
                    if not 0.0 < ratio <= 1.0:
                        raise InputError(f"clip ratio {ratio} outside (0, 1]")

    @property
    def layers(self) -> int:
        return len(self.slots)

    @property
    def head_dim(self) -> int:
        return int(self.slots[0][0].r_k.shape[0])

    def slot_for(self, layer: int, head: int) -> RotationSlot:
        row = self.slots[layer]
        return row[0] if self.share_heads else row[head]

    def quant_configs(self, layer: int, head: int, bits: Optional[int] = None) -> Tuple[QuantConfig, QuantConfig]:
        slot = self.slot_for(layer, head)
        b = self.bits if bits is None else bits
        return (
            QuantConfig(bits=b, group_size=self.group_size_k, clip_ratio=slot.clip_k),
            QuantConfig(bits=b, group_size=self.group_size_v, clip_ratio=slot.clip_v),
        )


@dataclass(frozen=True, eq=False)
class _SlotResult:
    slot: RotationSlot
    cost_k: np.ndarray
    cost_v: np.ndarray


class RotationCalibrator:
    """
    Runs the offline phase over every (layer, slot) of an activation dump.
    """

    def __init__(self, options: Optional[CalibrationOptions] = None):
        self.options = options or CalibrationOptions()

    def targets(self, dump: ActivationDump, layer: int, head: Optional[int]) -> Tuple[CovarianceTarget, CovarianceTarget]:
        """Key and value targets for one head, or for the whole layer when head is None."""
        heads = range(dump.kv_heads) if head is None else [head]
        slices = [dump.head(layer, h) for h in heads]
        opts = self.options
        if opts.target == "raw":
            c_k = estimate_raw_covariance(np.stack([s.k for s in slices]), "raw-key")
            c_v = estimate_raw_covariance(np.stack([s.v for s in slices]), "raw-value")
            return c_k, c_v
        c_q = estimate_query_covariance(np.stack([s.q for s in slices]))
        c_s = np.mean(
            [
                estimate_score_value_covariance(s.q, s.k, s.v, opts.causal, opts.softmax_block).matrix
                for s in slices
            ],
            axis=0,
        )
        return c_q, CovarianceTarget("score-value", c_s)

    def calibrate_slot(self, dump: ActivationDump, layer: int, head: Optional[int]) -> _SlotResult:
        opts = self.options
        d = dump.head_dim
        hadamard = hadamard_matrix(d)
        c_k, c_v = self.targets(dump, layer, head)
        eig_k = sym_eig(c_k.matrix)
        eig_v = sym_eig(c_v.matrix)
        r_k = compose_rotation(eig_k.vectors, hadamard, pbr_permutation(eig_k.values, d))
        r_v = compose_rotation(eig_v.vectors, hadamard, pbr_permutation(eig_v.values, d))

        heads = range(dump.kv_heads) if head is None else [head]
        k_rows = np.concatenate([dump.k[layer, h] for h in heads]).astype(np.float64)
        v_rows = np.concatenate([dump.v[layer, h] for h in heads]).astype(np.float64)
        grid = opts.clip_grid
        cost_k = clip_costs(k_rows @ r_k, r_k.T @ c_k.matrix @ r_k, opts.quant_config("k"), grid)
        cost_v = clip_costs(v_rows @ r_v, r_v.T @ c_v.matrix @ r_v, opts.quant_config("v"), grid)
        slot = RotationSlot(
            r_k=r_k, r_v=r_v, u_k=eig_k.vectors, u_v=eig_v.vectors,
            lambda_k=eig_k.values, lambda_v=eig_v.values,
        )
        return _SlotResult(slot=slot, cost_k=cost_k, cost_v=cost_v)

    def calibrate(self, dump: ActivationDump) -> RotationBundle:
        opts = self.options
        if not opts.clip_grid:
            raise InputError("clip grid is empty")
        for size in (opts.group_size_k, opts.group_size_v):
            if dump.head_dim % size != 0:
                raise DimensionError(f"group size {size} does not divide head_dim {dump.head_dim}")

        heads: List[Optional[int]] = [None] if opts.share_heads else list(range(dump.kv_heads))
        jobs = [(layer, head) for layer in range(dump.layers) for head in heads]
        logger.info(
            "Calibrating %d slots (%d layers, %s, target=%s)",
            len(jobs), dump.layers, "shared heads" if opts.share_heads else "per kv-head", opts.target,
        )
        results = Parallel(n_jobs=opts.n_jobs)(
            delayed(self.calibrate_slot)(dump, layer, head)
            for layer, head in tqdm(jobs, desc="calibrate", disable=None, leave=False)
        )

        grid = opts.clip_grid
        per_layer: List[List[_SlotResult]] = [
            results[i * len(heads):(i + 1) * len(heads)] for i in range(dump.layers)
        ]
        if opts.per_layer_clip:
            pairs = [
                select_clip_pair(grid, sum(r.cost_k for r in row), sum(r.cost_v for r in row))
                for row in per_layer
            ]
        else:
            pair = select_clip_pair(
                grid, sum(r.cost_k for r in results), sum(r.cost_v for r in results)
            )
            pairs = [pair] * dump.layers

        slots = [
            [r.slot.with_clip(*pairs[i]) for r in row] for i, row in enumerate(per_layer)
        ]
        for i, (clip_k, clip_v) in enumerate(pairs):
            logger.debug("layer %d clip ratios rho_K=%.2f rho_V=%.2f", i, clip_k, clip_v)

        return RotationBundle(
            slots=slots,
            group_size_k=opts.group_size_k,
            group_size_v=opts.group_size_v,
            bits=opts.bits,
            share_heads=opts.share_heads,
            provenance={
                "tokens": dump.tokens,
                "dump_sha256": dump.fingerprint(),
                "target": opts.target,
                "clip_scope": "per-layer" if opts.per_layer_clip else "global",
                "clip_grid": list(grid),
            },
        )


def calibrate_bundle(dump: ActivationDump, options: Optional[CalibrationOptions] = None) -> RotationBundle:
    """
    Build a complete rotation bundle from an activation dump.
    """
    bundle = RotationCalibrator(options).calibrate(dump)
    logger.info(
        "✅ Bundle ready: %d layers x %d slots, d=%d",
        bundle.layers, len(bundle.slots[0]), bundle.head_dim,
    )
    return bundle
