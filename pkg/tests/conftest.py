import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from policy_transfer.cargoal_env import default_base_tasks, default_target_task
from policy_transfer.pipelines import PretrainSpec, collect_demos, scripted_expert, train_base_policy

settings.register_profile("repo", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ACCEPTANCE_RESULTS: dict = {}


def record_acceptance(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[n] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def base_tasks():
    return default_base_tasks()


@pytest.fixture(scope="session")
def target_task():
    return default_target_task()


@pytest.fixture(scope="session")
def pretrained(base_tasks):
    """The three default base policies (seed 0) with their training results."""
    spec = PretrainSpec(tuple(base_tasks), seed=0)
    return [train_base_policy(t, spec) for t in base_tasks]


@pytest.fixture(scope="session")
def bases(pretrained):
    return [r.policy for r in pretrained]


@pytest.fixture(scope="session")
def demos(target_task):
    """~2000 expert timesteps on the target task, keyed by seed."""
    cache = {}

    def get(seed=0, budget=2000):
        key = (seed, budget)
        if key not in cache:
            cache[key] = collect_demos(lambda o: scripted_expert(o, target_task), target_task, budget, seed,
                                       noise=3.0)
        return cache[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
