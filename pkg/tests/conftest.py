import numpy as np
import pytest

from streamgym.sim import SimConfig, Variant, make_manifest
from streamgym.trace import TimedTrace, TraceSample


@pytest.fixture(scope="session")
def manifest():
    return make_manifest()


@pytest.fixture(scope="session")
def small_manifest():
    return make_manifest((0.3, 1.2, 2.85), 4.0, 24.0, seed=2)


@pytest.fixture
def sim_t():
    return SimConfig(variant=Variant.SIM_T)


def random_trace(seed, n=40, lo=0.5, hi=6.0, name=None, step=1.0):
    rng = np.random.default_rng(seed)
    samples = tuple(TraceSample(i * step, float(rng.uniform(lo, hi)), float(rng.uniform(0.02, 0.15)))
                    for i in range(n))
    return TimedTrace(name or f"rand{seed}", samples)


ACCEPTANCE: list[str] = []


def verdict(number, title, ok, detail=""):
    """Record one acceptance line for the terminal summary, then assert it."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
