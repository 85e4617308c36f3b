import numpy as np
import pytest

from oscar_kv.calibration import calibrate_bundle
from oscar_kv.config import CalibrationOptions, SynthConfig
from oscar_kv.synth import generate_dump


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def dump():
    """Seed-7 planted-outlier fixture: 2 layers x 2 kv-heads x 512 tokens, d=128, g=4."""
    return generate_dump(SynthConfig())


@pytest.fixture(scope="session")
def head(dump):
    return dump.head(0, 0)


@pytest.fixture(scope="session")
def bundle(dump):
    return calibrate_bundle(dump, CalibrationOptions())


@pytest.fixture(scope="session")
def bundle_g64(dump):
    return calibrate_bundle(dump, CalibrationOptions(group_size_k=64, group_size_v=64))


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(tokens=48, head_dim=16, layers=1, kv_heads=2, gqa_ratio=2, outlier_channels=2)


@pytest.fixture(scope="session")
def small_dump(small_config):
    return generate_dump(small_config)


@pytest.fixture(scope="session")
def small_bundle(small_dump):
    return calibrate_bundle(small_dump, CalibrationOptions(group_size_k=8, group_size_v=8))
