import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sar.synthworld import WorldConfig, generate_world

settings.register_profile("sar", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sar")

SMALL = WorldConfig(seed=3, num_images=150)


@pytest.fixture(scope="session")
def small_world():
    """(cfg, features dict, train, test_shifted, val_iid) for a 150-image world."""
    feats, train, test, val = generate_world(SMALL)
    return SMALL, {f.image_id: f for f in feats}, train, test, val


@pytest.fixture(scope="session")
def default_world():
    cfg = WorldConfig()
    feats, train, test, val = generate_world(cfg)
    return cfg, {f.image_id: f for f in feats}, train, test, val


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
