"""
Attention-aware KV-cache rotation calibration and a mixed-precision cache simulator.
"""

from oscar_kv.cache_sim import DistortionReport, KvCacheState, evaluate_distortion
from oscar_kv.calibration import ActivationDump, RotationBundle, calibrate_bundle
from oscar_kv.config import CacheLayout, CalibrationOptions, EvalOptions, QuantConfig, SynthConfig
from oscar_kv.errors import OscarError

__version__ = "0.1.0"

__all__ = [
    "ActivationDump",
    "CacheLayout",
    "CalibrationOptions",
    "DistortionReport",
    "EvalOptions",
    "KvCacheState",
    "OscarError",
    "QuantConfig",
    "RotationBundle",
    "SynthConfig",
    "calibrate_bundle",
    "evaluate_distortion",
]
