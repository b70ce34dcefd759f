import numpy as np
import pytest

from sirw.weights import WeightSpec

CONSTANT = WeightSpec.constant()
ONCE = WeightSpec.once_reinforced(0.5)
PL = WeightSpec.power_law(0.5, 0.2)
PL1 = WeightSpec.power_law(1.0, 0.3)
PL03 = WeightSpec.power_law(0.3, 0.2)
THREE = (CONSTANT, ONCE, PL)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def within_se(x, target, n_se=3.0):
    x = np.asarray(x, float)
    se = x.std(ddof=1) / np.sqrt(x.size)
    return abs(x.mean() - target) <= n_se * se


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
