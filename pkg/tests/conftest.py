import numpy as np
import pytest

from ctrlinv import sysmodel as sm
from ctrlinv.cplqr import default_weights
from ctrlinv.inversion import reference_data


@pytest.fixture(scope="session")
def small_model():
    return sm.synth_random_model(6, seed=3)


@pytest.fixture(scope="session")
def small_reference(small_model):
    W = default_weights(small_model)
    return W, reference_data(small_model, W.Q, W.R, 1.0)


def random_hurwitz(n, rng, shift=0.5):
    """Random real Hurwitz matrix with spectral abscissa ``<= -shift``."""
    A = rng.standard_normal((n, n)) / np.sqrt(n)
    a = np.linalg.eigvals(A).real.max()
    return A - (a + shift) * np.eye(n)


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {verdict} {detail}")
