"""
Dense linear algebra for calibration and simulation.

Normalized Walsh-Hadamard operator, permutations, a deterministic Jacobi
eigensolver for symmetric matrices and a masked row softmax. Everything
works in float64 and returns new arrays.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from oscar_kv.config import is_power_of_two
from oscar_kv.errors import ConvergenceError, DimensionError, InputError, NumericalError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-7
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


# ============================================
# HADAMARD
# ============================================

def _require_power_of_two(d: int) -> int:
    if not isinstance(d, (int, np.integer)) or not is_power_of_two(int(d)):
        raise DimensionError(f"dimension must be a power of two, got {d}")
    return int(d)


@lru_cache(maxsize=16)
def _hadamard_cached(d: int) -> np.ndarray:
    signs = np.ones((1, 1))
    while signs.shape[0] < d:
        signs = np.block([[signs, signs], [signs, -signs]])
    # one division keeps every entry the correctly rounded +-1/sqrt(d)
    h = signs / math.sqrt(d)
    h.setflags(write=False)
    return h


def hadamard_matrix(d: int) -> np.ndarray:
    """
    Normalized Walsh-Hadamard matrix in natural (Sylvester) order.

    The +-1 Sylvester matrix S_2m = [[S_m, S_m], [S_m, -S_m]] from S_1 = [1],
    divided by sqrt(d).
    """
    return _hadamard_cached(_require_power_of_two(d)).copy()


def fwht_rows(x: np.ndarray) -> np.ndarray:
    """Apply the normalized Hadamard to every row (x @ H) with butterflies."""
    x = np.array(x, dtype=np.float64, copy=True, ndmin=2)
    d = _require_power_of_two(x.shape[1])
    n = x.shape[0]
    h = 1
    while h < d:
        y = x.reshape(n, d // (2 * h), 2, h)
        a = y[:, :, 0, :].copy()
        b = y[:, :, 1, :]
        y[:, :, 0, :] = a + b
        y[:, :, 1, :] = a - b
        h *= 2
    return x / math.sqrt(d)


# ============================================
# PERMUTATIONS
# ============================================

@dataclass(frozen=True)
class Permutation:
    """
    Bijection on {0..d-1}; source coordinate i is placed at position mapping[i].

    The matching matrix P has P[i, mapping[i]] = 1, so (X @ P)[:, mapping[i]] = X[:, i].
    """

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64).copy()
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise InputError("mapping is not a bijection on {0..d-1}")
        m.setflags(write=False)
        object.__setattr__(self, "mapping", m)

    @property
    def size(self) -> int:
        return int(self.mapping.size)

    @classmethod
    def identity(cls, d: int) -> "Permutation":
        return cls(np.arange(d))

    def matrix(self) -> np.ndarray:
        p = np.zeros((self.size, self.size))
        p[np.arange(self.size), self.mapping] = 1.0
        return p

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.size)
        return Permutation(inv)

    def compose(self, other: "Permutation") -> "Permutation":
        """Apply self first, then other."""
        if other.size != self.size:
            raise DimensionError("permutation sizes differ")
        return Permutation(other.mapping[self.mapping])

    def __eq__(self, other) -> bool:
        return isinstance(other, Permutation) and np.array_equal(self.mapping, other.mapping)

    def __hash__(self) -> int:
        return hash(self.mapping.tobytes())


def bit_reversal(d: int) -> Permutation:
    """beta(k): reverse the m-bit binary representation of k, d = 2^m."""
    d = _require_power_of_two(d)
    bits = d.bit_length() - 1
    k = np.arange(d)
    rev = np.zeros(d, dtype=np.int64)
    for b in range(bits):
        rev |= ((k >> b) & 1) << (bits - 1 - b)
    return Permutation(rev)


def apply_permutation_columns(x: np.ndarray, p: Permutation) -> np.ndarray:
    """X @ P without forming P."""
    x = np.asarray(x)
    if x.shape[-1] != p.size:
        raise DimensionError(f"matrix has {x.shape[-1]} columns, permutation size {p.size}")
    out = np.empty_like(x)
    out[..., p.mapping] = x
    return out


# ============================================
# PLUMBING
# ============================================

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).T.copy()


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def random_orthogonal(d: int, rng: np.random.Generator, count: Optional[int] = None) -> np.ndarray:
    """
    Haar-like orthogonal matrices: QR of a Gaussian with a sign-fixed R diagonal.

    Returns shape (d, d), or (count, d, d) when count is given.
    """
    shape = (d, d) if count is None else (count, d, d)
    g = rng.standard_normal(shape)
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    signs[signs == 0] = 1.0
    return q * signs[..., None, :]


# ============================================
# SYMMETRIC EIGENDECOMPOSITION
# ============================================

@dataclass(frozen=True, eq=False)
class EigenDecomposition:
    """Eigenvectors in the columns of U, eigenvalues descending."""

    vectors: np.ndarray
    values: np.ndarray
    sweeps: int = 0

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


@lru_cache(maxsize=32)
def _round_robin_pairs(d: int) -> Tuple[Tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule: d-1 (or d) rounds of disjoint index pairs covering all pairs once."""
    n = d + (d % 2)
    players = list(range(n))
    rounds: List[Tuple[np.ndarray, np.ndarray]] = []
    for _ in range(n - 1):
        p_idx, q_idx = [], []
        for i in range(n // 2):
            a, b = players[i], players[n - 1 - i]
            if a >= d or b >= d:
                continue
            p_idx.append(min(a, b))
            q_idx.append(max(a, b))
        order = np.argsort(p_idx)
        rounds.append((np.asarray(p_idx)[order], np.asarray(q_idx)[order]))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(rounds)


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive, lowest index on ties
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig(a: np.ndarray) -> EigenDecomposition:
    """
    Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once in round-robin order, with
    the disjoint pairs of a round rotated together. Converged when the largest
    off-diagonal magnitude is at most 1e-12 * ||A||_F; 100 sweeps at most.
    Eigenvalues are returned descending (ties by ascending index) and each
    eigenvector has its largest-magnitude entry positive. Repeated eigenvalues
    leave the basis of their eigenspace non-unique.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError("matrix has non-finite entries")
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_TOL:
        raise InputError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    a = 0.5 * (a + a.T)

    d = a.shape[0]
    v = np.eye(d)
    threshold = JACOBI_TOL * float(np.linalg.norm(a))
    rounds = _round_robin_pairs(d) if d > 1 else ()

    sweeps = 0
    while True:
        off = a - np.diag(np.diag(a))
        if d < 2 or float(np.max(np.abs(off))) <= threshold:
            break
        if sweeps >= JACOBI_MAX_SWEEPS:
            raise ConvergenceError(
                f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps "
                f"(max off-diagonal {np.max(np.abs(off)):.3e})"
            )
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 0.0
            if not np.any(active):
                continue
            app = a[p, p]
            aqq = a[q, q]
            theta = np.zeros_like(apq)
            np.divide(aqq - app, 2.0 * apq, out=theta, where=active)
            t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            rows_p = a[p, :].copy()
            rows_q = a[q, :].copy()
            a[p, :] = c[:, None] * rows_p - s[:, None] * rows_q
            a[q, :] = s[:, None] * rows_p + c[:, None] * rows_q
            cols_p = a[:, p].copy()
            cols_q = a[:, q].copy()
            a[:, p] = cols_p * c - cols_q * s
            a[:, q] = cols_p * s + cols_q * c
            a[p, q] = 0.0
            a[q, p] = 0.0

            vp = v[:, p].copy()
            vq = v[:, q].copy()
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
        a = 0.5 * (a + a.T)
        sweeps += 1

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = _sign_fix(v[:, order])
    logger.debug("sym_eig d=%d converged in %d sweeps", d, sweeps)
    return EigenDecomposition(vectors=vectors, values=values, sweeps=sweeps)


# ============================================
# SOFTMAX
# ============================================

def causal_mask(rows: int, cols: int) -> np.ndarray:
    """Boolean keep-mask: row i sees columns j <= i + (cols - rows)."""
    offset = cols - rows
    return np.arange(cols)[None, :] <= (np.arange(rows)[:, None] + offset)


def masked_softmax_rows(
    logits: np.ndarray,
    causal: bool = False,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Row softmax with max subtraction. Masked positions (causal, an explicit
    keep-mask, or -inf logits) get probability 0; a row with nothing left
    raises NumericalError.
    """
    x = np.array(logits, dtype=np.float64, copy=True, ndmin=2)
    if np.any(np.isnan(x)) or np.any(x == np.inf):
        raise InputError("logits must be finite or -inf")
    keep = np.isfinite(x)
    if causal:
        keep &= causal_mask(*x.shape)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    if not np.all(np.any(keep, axis=1)):
        bad = int(np.flatnonzero(~np.any(keep, axis=1))[0])
        raise NumericalError(f"row {bad} is fully masked")
    x = np.where(keep, x, -np.inf)
    x -= np.max(x, axis=1, keepdims=True)
    e = np.where(keep, np.exp(x), 0.0)
    return e / np.sum(e, axis=1, keepdims=True)
