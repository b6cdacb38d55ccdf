import numpy as np
import pytest

from ctdc.estimate import FixedParams
from ctdc.io import builtin_params
from ctdc.simulate import SimulationConfig, simulate_cohort
from ctdc.tasks import builtin_task


@pytest.fixture(scope="session")
def task1():
    return builtin_task("tickets-task1")


@pytest.fixture(scope="session")
def task2():
    return builtin_task("tickets-task2")


@pytest.fixture(scope="session")
def tasks(task1, task2):
    return [task1, task2]


@pytest.fixture(scope="session")
def reference_params():
    return builtin_params().params


@pytest.fixture(scope="session")
def small_cohort(tasks, reference_params):
    """50 simulated persons on both tasks, fixed seed."""
    config = SimulationConfig(
        num_persons=50, tasks=tuple(tasks), params=reference_params,
        rng_seed=20260819,
    )
    return simulate_cohort(config)


@pytest.fixture()
def diag_params():
    return FixedParams(
        betas=(1.5, 1.7),
        gammas=(-1.7, -1.4),
        sigma=np.array([[2.0, 0.0], [0.0, 0.1]]),
    )
