import numpy as np
import pytest

from focal.simulate import DgpConfig, generate


@pytest.fixture(scope="session")
def small_truth():
    """A modest simulated dataset shared by the fitting tests."""
    return generate(DgpConfig(n=1500, T=30, seed=7), 0)


@pytest.fixture(scope="session")
def small_model(small_truth):
    from focal.metalearner import fit_fcate, make_plan

    d = small_truth.dataset()
    return fit_fcate(d, plan=make_plan(d.n, 5, 11))


def pytest_report_header(config):
    return f"numpy {np.__version__}"
