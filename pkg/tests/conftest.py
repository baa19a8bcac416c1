import numpy as np
import pytest

from survey_dpd import _kernels
from survey_dpd.model import SurveyDataset


def random_dataset(rng, n=12, d=2, k=2, m_range=(3, 30), strata=2, weights=True,
                   beta_scale=0.8):
    """Random clustered dataset together with the coefficients that generated it."""
    X = np.column_stack([np.ones(n), rng.uniform(-1.5, 1.5, size=(n, k))])
    beta = beta_scale * rng.standard_normal((d, k + 1))
    P = _kernels.numpy_kernels.probabilities(beta, X)
    m = rng.integers(m_range[0], m_range[1] + 1, size=n)
    Y = np.array([rng.multinomial(mi, p) for mi, p in zip(m, P)])
    w = rng.uniform(0.5, 2.0, size=n) if weights else np.ones(n)
    h = np.arange(n) % strata + 1
    i = np.arange(n) // strata + 1
    return SurveyDataset(h, i, w, Y, X), beta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_data(rng):
    data, beta = random_dataset(rng)
    return data, beta


@pytest.fixture(params=["numpy", "numba"])
def kernels(request):
    ns = _kernels.numpy_kernels if request.param == "numpy" else _kernels.numba_kernels
    if ns is None:
        pytest.skip("numba unavailable")
    return ns


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Store and print one acceptance line; the summary hook repeats them at the end."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
