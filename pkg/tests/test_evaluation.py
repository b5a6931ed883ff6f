import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from policy_transfer.cargoal_env import Task
from policy_transfer.evaluation import (
    Z95,
    evaluate,
    replay_switching_rate,
    sweep,
    switching_rate,
    wilson_interval,
    write_sweep_csv,
)
from policy_transfer.math_core import ConfigurationError
from policy_transfer.optim import SgdConfig
from policy_transfer.pipelines import AdaptSpec, scripted_expert

TASK = Task("g", (5.0, 3.0))


def wilson_by_root_finding(k, n, z=Z95):
    """Endpoints of {p : |k/n - p| <= z sqrt(p(1-p)/n)} found by bisection."""
    phat = k / n

    def inside(p):
        return abs(phat - p) <= z * math.sqrt(p * (1 - p) / n)

    def edge(lo, hi):  # lo inside, hi outside (or the reverse)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if inside(mid) == inside(lo):
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    low = 0.0 if inside(0.0) else edge(phat, 0.0)
    high = 1.0 if inside(1.0) else edge(phat, 1.0)
    return low, high


def test_wilson_all_successes():
    lo, hi = wilson_interval(100, 100)
    assert hi == 1.0
    assert lo == pytest.approx(100 / (100 + Z95 ** 2), abs=1e-12)
    assert lo == pytest.approx(0.963, abs=5e-4)


@given(st.integers(1, 500).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
def test_wilson_bounds_and_oracle(kn):
    k, n = kn
    lo, hi = wilson_interval(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0
    olo, ohi = wilson_by_root_finding(k, n)
    assert lo == pytest.approx(olo, abs=1e-9)
    assert hi == pytest.approx(ohi, abs=1e-9)


def test_wilson_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        wilson_interval(0, 0)
    with pytest.raises(ConfigurationError):
        wilson_interval(5, 3)


def test_expert_evaluation_and_determinism():
    ex = lambda o: scripted_expert(o, TASK)  # noqa: E731
    a = evaluate(ex, TASK, 100, seed=4)
    assert a.success_rate == 1.0 and a.ci_low == pytest.approx(0.963, abs=5e-4)
    assert a == evaluate(ex, TASK, 100, seed=4)
    assert "switching_rate" not in a.to_dict()


def test_zero_action_never_succeeds():
    rep = evaluate(lambda o: np.zeros((len(o), 2)), TASK, 10, seed=0)
    assert rep.success_rate == 0.0 and rep.mean_episode_len == 1000


def test_evaluate_validation():
    with pytest.raises(ConfigurationError):
        evaluate(lambda o: o[:, :2], TASK, 0)


def test_switching_rate_examples():
    assert switching_rate([np.zeros(50, int)]) == 0.0
    assert switching_rate([np.arange(100) % 2]) == pytest.approx(99.0)
    assert switching_rate([[0, 1], [1, 1, 1]]) == pytest.approx(20.0)
    with pytest.raises(ConfigurationError):
        switching_rate([])


@pytest.fixture(scope="module")
def small_switcher(bases, demos, target_task):
    from policy_transfer.pipelines import adapt

    spec = AdaptSpec("hard_switch", target_task, epsilon=0.1, sgd=SgdConfig(learning_rate=0.3, epochs=40))
    return adapt(bases, demos(0), spec).policy


def test_switching_eval_logs_and_read_only(small_switcher, target_task):
    digest = small_switcher.w_net.digest()
    rep, logs = evaluate(small_switcher, target_task, 20, seed=2, return_logs=True)
    assert rep.mode == "sample" and rep.switching_rate is not None
    assert switching_rate(logs.choices) == rep.switching_rate
    assert sum(len(c) for c in logs.choices) == pytest.approx(rep.mean_episode_len * 20)
    assert small_switcher.w_net.digest() == digest
    # replaying the logged weights at the policy's epsilon reproduces its selections
    assert replay_switching_rate(logs.weights, small_switcher.epsilon) == pytest.approx(rep.switching_rate)


def test_epsilon_sweep_reuses_net_and_is_order_independent(bases, demos, target_task, tmp_path):
    spec = AdaptSpec("hard_switch", target_task, sgd=SgdConfig(learning_rate=0.3, epochs=20))
    grid = [0.0, 0.05, 0.1, 0.2]
    rows = sweep("epsilon", grid, bases, spec, target_task, demos(0), n_episodes=20, seed=1)
    assert [r["value"] for r in rows] == grid
    assert len({r["final_loss"] for r in rows}) == 1
    back = sweep("epsilon", grid[::-1], bases, spec, target_task, demos(0), n_episodes=20, seed=1)
    assert back[::-1] == rows
    write_sweep_csv(tmp_path / "s.csv", rows, 1, "abc")
    with open(tmp_path / "s.csv") as f:
        table = list(csv.reader(f))
    assert len(table) == 5 and table[0][:7] == ["param", "value", "success", "ci_low", "ci_high",
                                                 "switching_rate", "final_loss"]


def test_sweep_validation(bases, demos, target_task):
    spec = AdaptSpec("obs_align", target_task)
    with pytest.raises(ConfigurationError):
        sweep("gamma", [1], bases, spec, target_task, demos(0))
    with pytest.raises(ConfigurationError):
        sweep("epsilon", [0.1], bases, spec, target_task, demos(0))
    with pytest.raises(ConfigurationError):
        sweep("alpha", [], bases, replace(spec, method="soft_switch"), target_task, demos(0))
