import numpy as np
import pytest

from hwtransfer.tank_sim import HouseholdProfile, TankConfig


@pytest.fixture
def cfg():
    return TankConfig()


def make_profile(rate=0.75, mean=8.0, sd=3.0, t_low=42.0, t_high=58.0, seed=7, hid="h"):
    rates = rate if isinstance(rate, tuple) else (float(rate),) * 24
    return HouseholdProfile(hid, rates, mean, sd, t_low, t_high, seed)


@pytest.fixture
def profile():
    return make_profile()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    RESULTS = getattr(mod, "RESULTS", None)
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
