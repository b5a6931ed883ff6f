import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policy_transfer.cargoal_env import Task
from policy_transfer.evaluation import evaluate
from policy_transfer.math_core import ConfigurationError
from policy_transfer.optim import CemConfig, OptimizationError, SgdConfig
from policy_transfer.pipelines import (
    AdaptSpec,
    GateError,
    PretrainSpec,
    adapt,
    collect_demos,
    scripted_expert,
    train_base_policy,
)

TASK = Task("g", (5.0, 3.0))
QUICK_CEM = CemConfig(population=32, elite_frac=0.125, iterations=40, init_std=0.5)


def expert_for(task):
    return lambda o: scripted_expert(o, task)


# -------------------------------------------------------------------- expert


def test_expert_far_goal_ahead():
    obs = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
    a = scripted_expert(obs, Task("far", (9.0, 0.0)))
    assert abs(a[0]) <= 1e-12 and a[1] == pytest.approx(1.0, abs=1e-5)


def test_expert_goal_behind_saturates_steering():
    obs = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
    a = scripted_expert(obs, Task("behind", (-5.0, 0.0)))
    assert abs(a[0]) == pytest.approx(1.0, abs=1e-5)


@settings(max_examples=6)
@given(st.floats(0, 2 * math.pi), st.floats(2.0, 9.0))
def test_expert_reaches_arena_goals(angle, radius):
    g = (radius * math.cos(angle), radius * math.sin(angle))
    g = tuple(float(np.clip(v, -9.5, 9.5)) for v in g)
    task = Task("h", g)
    assert evaluate(expert_for(task), task, 100, seed=0).successes >= 99


# ----------------------------------------------------------------- collection


def test_collect_budget_and_success():
    d = collect_demos(expert_for(TASK), TASK, 2000, seed=0)
    lengths = np.bincount(d.episode_id)
    assert 2000 <= d.n_timesteps < 2000 + lengths.max()
    assert d.check_chaining()
    # every episode ends inside the goal region
    ends = d.next_obs[d.episode_final, :2]
    assert np.all(np.linalg.norm(ends - np.array(TASK.goal), axis=1) < TASK.goal_radius)
    assert d.task_id == "g" and d.source == "expert"


def test_collect_noise_keeps_clean_labels():
    d = collect_demos(expert_for(TASK), TASK, 500, seed=1, noise=3.0)
    np.testing.assert_allclose(d.action, scripted_expert(d.obs, TASK), atol=1e-12)
    assert d.check_chaining()


def test_collect_budget_one_keeps_one_whole_episode():
    d = collect_demos(expert_for(TASK), TASK, 1, seed=2)
    assert d.n_episodes == 1 and d.n_timesteps > 1
    np.testing.assert_array_equal(d.t, np.arange(d.n_timesteps))


def test_collect_deterministic():
    a = collect_demos(expert_for(TASK), TASK, 300, seed=5, noise=1.0)
    b = collect_demos(expert_for(TASK), TASK, 300, seed=5, noise=1.0)
    np.testing.assert_array_equal(a.obs, b.obs)
    np.testing.assert_array_equal(a.action, b.action)


def test_collect_errors():
    with pytest.raises(ConfigurationError):
        collect_demos(expert_for(TASK), TASK, 0, seed=0)
    with pytest.raises(OptimizationError, match="no successful episode"):
        collect_demos(lambda o: np.zeros((len(o), 2)), TASK, 50, seed=0)


# ---------------------------------------------------------------- pretraining


SMALL = dict(bc_states=3000, bc=SgdConfig(learning_rate=1e-3, batch_size=128, epochs=8),
             cem=CemConfig(population=10, elite_frac=0.2, iterations=1, init_std=0.005), gate_episodes=20)


def test_pretrain_is_deterministic():
    spec = PretrainSpec((TASK,), gate=0.0, **SMALL)
    a = train_base_policy(TASK, spec)
    b = train_base_policy(TASK, spec)
    assert a.policy.digest() == b.policy.digest()


def test_pretrain_gate_failure_carries_policy():
    spec = PretrainSpec((TASK,), gate=1.0, **{**SMALL, "bc": SgdConfig(epochs=0)})
    with pytest.raises(GateError) as e:
        train_base_policy(TASK, spec)
    assert e.value.result.success_rate < 1.0 and e.value.result.policy is not None


def test_pretrain_spec_rejects_duplicates():
    with pytest.raises(ConfigurationError):
        PretrainSpec((TASK, Task("g", (1.0, 1.0))))


def test_default_bases_pass_gate_and_show_transfer_gap(pretrained, target_task):
    for r in pretrained:
        assert r.success_rate >= 0.9
        assert evaluate(r.policy, target_task, 100, seed=3).success_rate <= 0.4


# ------------------------------------------------------------------ adaptation


def test_adapt_spec_validation(target_task):
    with pytest.raises(ConfigurationError, match="obs_align, action_align"):
        AdaptSpec("obs_algn", target_task)
    with pytest.raises(ConfigurationError):
        AdaptSpec("obs_align", target_task, demo_budget=0)


def test_obs_align_self_adaptation_is_near_identity(bases, base_tasks):
    task = base_tasks[1]
    own = bases[1]
    data = collect_demos(lambda o: own.act(o, "mean"), task, 1000, seed=0, source="policy")
    res = adapt(bases, data, AdaptSpec("obs_align", task, cem=QUICK_CEM))
    assert res.report["chosen_index"] == 1
    t = res.policy.t_obs
    assert np.max(np.abs(t.A - np.eye(5))) <= 0.1
    assert np.max(np.abs(t.b)) <= 0.1


@pytest.mark.parametrize("method", ["action_align", "action_realign"])
def test_ensemble_report_and_read_only_bases(bases, demos, target_task, method):
    digests = [b.digest() for b in bases]
    spec = AdaptSpec(method, target_task, cem=QUICK_CEM, sgd=SgdConfig(learning_rate=0.04, epochs=30))
    res = adapt(bases, demos(0), spec)
    losses = res.report["per_base_loss"]
    assert len(losses) == len(bases)
    assert res.report["chosen_index"] == int(np.argmin(losses))
    assert res.report["final_loss"] == min(losses)
    assert [b.digest() for b in bases] == digests


def test_ensemble_selection_is_permutation_invariant(bases, demos, target_task):
    spec = AdaptSpec("action_align", target_task, cem=QUICK_CEM)
    a = adapt(bases, demos(0), spec)
    perm = [2, 0, 1]
    b = adapt([bases[i] for i in perm], demos(0), spec)
    assert b.report["per_base_loss"] == [a.report["per_base_loss"][i] for i in perm]
    assert a.policy.base.digest() == b.policy.base.digest()
    np.testing.assert_array_equal(a.policy.t_act.A, b.policy.t_act.A)
    np.testing.assert_array_equal(a.policy.t_act.b, b.policy.t_act.b)


def test_switching_adapt_stores_epsilon_and_is_deterministic(bases, demos, target_task):
    spec = AdaptSpec("hard_switch", target_task, epsilon=0.15, sgd=SgdConfig(learning_rate=0.3, epochs=20))
    a = adapt(bases, demos(0), spec)
    b = adapt(bases, demos(0), spec)
    assert a.policy.epsilon == 0.15 and a.policy.mode == "hard"
    assert a.policy.w_net.digest() == b.policy.w_net.digest()
    soft = adapt(bases, demos(0), AdaptSpec("soft_switch", target_task, sgd=SgdConfig(learning_rate=0.3, epochs=20)))
    assert soft.policy.mode == "soft"


def test_adapt_rejects_wrong_task(bases, demos, base_tasks):
    with pytest.raises(ConfigurationError):
        adapt(bases, demos(0), AdaptSpec("action_realign", base_tasks[0]))
