import numpy as np
import pytest

from ttball.rallygen import build_pools, generate_rally, FailedPoint

ACCEPTANCE = []


def record_acceptance(name: str, passed: bool, detail: str):
    ACCEPTANCE.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def pools():
    return build_pools(300, rng_seed=11)


@pytest.fixture(scope="session")
def rallies(pools):
    """A few dozen generated rallies shared by unit tests."""
    out = []
    seed = 0
    while len(out) < 30:
        r = generate_rally(seed, pools)
        seed += 1
        if not isinstance(r, FailedPoint):
            out.append(r)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
