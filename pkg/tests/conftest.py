import numpy as np
import pytest

from conceptgcd.dataset import SyntheticSpec, generate_synthetic
from conceptgcd.numerics import RngState


@pytest.fixture
def rng():
    return RngState(1234)


@pytest.fixture(scope="session")
def small_ds():
    spec = SyntheticSpec(n_known=3, n_novel=2, input_dim=8, samples_per_class=20, noise_sigma=0.3)
    return generate_synthetic(spec, RngState(3))


def brute_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; a test that dies before recording is listed as FAIL."""
    recorded = []

    def record(name, passed, detail=""):
        line = (name, bool(passed), detail)
        recorded.append(line)
        _CRITERIA.append(line)
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        return bool(passed)

    yield record
    if not recorded:
        _CRITERIA.append((request.node.name, False, "did not complete"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
