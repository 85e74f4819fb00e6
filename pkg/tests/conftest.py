import numpy as np
import pytest

from mqiv.data import Dataset
from mqiv.simulation import DgpConfig, generate


def make_dataset(y, a, z, x, names=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    names = names or tuple(f"x{j + 1}" for j in range(x.shape[1]))
    return Dataset(np.asarray(y, float), np.asarray(a), np.asarray(z), x, names)


@pytest.fixture(scope="session")
def sim_small():
    return generate(DgpConfig(n=2000, seed=5, keep_latents=True))


@pytest.fixture(scope="session")
def sim_large():
    return generate(DgpConfig(n=50000, seed=11))


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``acceptance_log(label, ok, detail)``; the line is printed
    immediately and repeated in the terminal summary.
    """

    def record(label, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
