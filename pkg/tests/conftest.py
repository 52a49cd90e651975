import logging
from pathlib import Path

import numpy as np
import pytest

from epi_ctrl.cost import CostParams
from epi_ctrl.pmp import SolverConfig, forward_backward_sweep
from epi_ctrl.seir import EpidemicState, ModelParams

BASE_PARAMS = ModelParams(beta=0.5, sigma=0.2, gamma=0.1, u_max=0.05, h_max=0.2, i_max=0.1)
BASE_X0 = EpidemicState(0.9, 0.05, 0.05, 0.0)
# penalty weight used for the optimized baseline throughout the suite
BASE_KAPPA = 100.0
SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def params():
    return BASE_PARAMS


@pytest.fixture
def x0():
    return BASE_X0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def baseline_result():
    logging.getLogger("epi_ctrl").setLevel(logging.ERROR)
    return forward_backward_sweep(BASE_X0, None, BASE_PARAMS, CostParams(kappa=BASE_KAPPA), 200.0,
                                  SolverConfig())


def random_params(rng, **fixed):
    beta = rng.uniform(0.2, 1.0)
    kw = dict(beta=beta, sigma=rng.uniform(0.1, 0.5), gamma=rng.uniform(0.05, 0.3),
              u_max=rng.uniform(0.0, 0.1), h_max=rng.uniform(0.0, 0.95) * beta,
              i_max=rng.uniform(0.02, 0.5))
    kw.update(fixed)
    return ModelParams(**kw)


def random_state(rng, i_min=1e-4):
    e = rng.uniform(0.0, 0.1)
    i = rng.uniform(i_min, 0.1)
    s = rng.uniform(0.2, 1.0 - e - i)
    r = 1.0 - s - e - i
    return EpidemicState(s, e, i, r)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
