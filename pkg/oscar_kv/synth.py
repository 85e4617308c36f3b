"""
Synthetic activation dumps shaped like real attention heads.

Queries and keys share a per-head random basis with a power-law spectrum, so
a handful of directions carry most of tr(C_Q); a few ambient key channels are
scaled up to plant per-channel outliers. Values get their own basis and a
flatter spectrum. Every (layer, head, stream) draws from its own generator
so the output depends only on the config.
"""

import logging

import numpy as np

from oscar_kv.calibration import ActivationDump
from oscar_kv.config import SynthConfig
from oscar_kv.linalg_core import random_orthogonal

logger = logging.getLogger(__name__)

_BASIS, _QUERY, _KEY, _VALUE, _OUTLIER = range(5)


def power_law_spectrum(d: int, decay: float) -> np.ndarray:
    """s_i proportional to (i + 1)^-decay, scaled to mean 1."""
    s = (np.arange(1, d + 1, dtype=np.float64)) ** (-decay)
    return s * d / s.sum()


def _stream(config: SynthConfig, layer: int, head: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, layer, head, stream])


def generate_head(config: SynthConfig, layer: int, head: int):
    """Q (g, T, d), K (T, d) and V (T, d) for one kv-head."""
    t, d, g = config.tokens, config.head_dim, config.gqa_ratio
    basis_rng = _stream(config, layer, head, _BASIS)
    basis = random_orthogonal(d, basis_rng)
    value_basis = random_orthogonal(d, basis_rng)
    spec = np.sqrt(power_law_spectrum(d, config.spectrum_decay))
    value_spec = np.sqrt(power_law_spectrum(d, 0.5 * config.spectrum_decay))

    q_rng = _stream(config, layer, head, _QUERY)
    q = config.query_scale * (q_rng.standard_normal((g, t, d)) * spec) @ basis.T
    k = (_stream(config, layer, head, _KEY).standard_normal((t, d)) * spec) @ basis.T
    v = (_stream(config, layer, head, _VALUE).standard_normal((t, d)) * value_spec) @ value_basis.T

    if config.outlier_channels:
        channels = _stream(config, layer, head, _OUTLIER).choice(d, config.outlier_channels, replace=False)
        k[:, channels] *= config.outlier_scale
    return q, k, v


def generate_dump(config: SynthConfig) -> ActivationDump:
    """Deterministic activation dump for the given config."""
    shape_q = (config.layers, config.kv_heads, config.gqa_ratio, config.tokens, config.head_dim)
    shape_kv = (config.layers, config.kv_heads, config.tokens, config.head_dim)
    q = np.empty(shape_q, dtype=np.float32)
    k = np.empty(shape_kv, dtype=np.float32)
    v = np.empty(shape_kv, dtype=np.float32)
    for layer in range(config.layers):
        for head in range(config.kv_heads):
            q[layer, head], k[layer, head], v[layer, head] = generate_head(config, layer, head)
    logger.info(
        "Generated synthetic dump: %d layers x %d kv-heads x %d tokens, d=%d (seed %d)",
        config.layers, config.kv_heads, config.tokens, config.head_dim, config.seed,
    )
    return ActivationDump(q=q, k=k, v=v)
