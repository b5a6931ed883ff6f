"""Seeded rollout evaluation, binomial intervals, switching statistics, sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .cargoal_env import DEFAULT_PARAMS, EnvParams, Task, VecCarGoal
from .math_core import ConfigurationError
from .policies import SwitchingPolicy, replay_selections

Z95 = 1.959963984540054


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if not 0 <= successes <= n:
        raise ConfigurationError("successes must lie in [0, n]")
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo, hi = max(0.0, centre - half), min(1.0, centre + half)
    # guard rounding at the boundaries
    return min(lo, p), max(hi, p)


@dataclass(frozen=True)
class EvalReport:
    n_episodes: int
    successes: int
    success_rate: float
    ci_low: float
    ci_high: float
    mean_return: float
    mean_episode_len: float
    switching_rate: Optional[float] = None
    seed: int = 0
    mode: str = "mean"

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["switching_rate"] is None:
            del d["switching_rate"]
        return d

    def summary(self) -> str:
        s = f"success {self.success_rate:.3f} [{self.ci_low:.3f}, {self.ci_high:.3f}] over {self.n_episodes} episodes"
        if self.switching_rate is not None:
            s += f", switching rate {self.switching_rate:.2f}/100 steps"
        return s


@dataclass
class EpisodeLogs:
    """Per-episode hard/soft selections and weights of a switching rollout."""

    choices: list
    weights: list


def _seeds(seed: int, n: int):
    ss = np.random.SeedSequence([int(seed), 0xE7A1])
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def evaluate(policy, task: Task, n_episodes: int = 100, seed: int = 0, mode: str = "auto",
             params: EnvParams = DEFAULT_PARAMS, return_logs: bool = False):
    """Run ``n_episodes`` seeded episodes in lockstep.

    ``policy`` is either an object with ``act(obs, mode, rng)`` or a plain
    callable ``obs -> action``. ``mode="auto"`` samples for switching
    policies and uses the mean action otherwise. Switching policies are reset
    before the episodes start, and their selections are logged.
    """
    if n_episodes < 1:
        raise ConfigurationError("n_episodes must be >= 1")
    switching = isinstance(policy, SwitchingPolicy)
    if mode == "auto":
        mode = "sample" if switching else "mean"
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAC7]))
    if switching:
        policy.reset()
    env = VecCarGoal(task, n_episodes, params)
    obs = env.reset(_seeds(seed, n_episodes))
    ret = np.zeros(n_episodes)
    choices, weights, running = [], [], []
    while env.active.any():
        live = env.active.copy()
        if switching:
            act, w = policy.act(obs, mode, rng)
            choices.append(policy.last_choice.copy())
            weights.append(w)
            running.append(live)
        elif hasattr(policy, "act"):
            act = policy.act(obs, mode, rng)
        else:
            act = policy(obs)
        obs, r = env.step(act)
        ret += r
    k = int(env.success.sum())
    lo, hi = wilson_interval(k, n_episodes)
    rate, logs = None, None
    if switching:
        ch, wt, rn = np.array(choices), np.array(weights), np.array(running)
        logs = EpisodeLogs(
            [ch[rn[:, i], i] for i in range(n_episodes)],
            [wt[rn[:, i], i] for i in range(n_episodes)],
        )
        rate = switching_rate(logs.choices)
    rep = EvalReport(n_episodes, k, k / n_episodes, lo, hi, float(ret.mean()), float(env.steps.mean()),
                     rate, int(seed), mode)
    return (rep, logs) if return_logs else rep


def switching_rate(selection_logs: Sequence) -> float:
    """Changes of the selected base per 100 steps, pooled over episodes."""
    logs = [np.asarray(s) for s in selection_logs]
    steps = sum(len(s) for s in logs)
    if steps == 0:
        raise ConfigurationError("empty selection logs")
    switches = sum(int(np.count_nonzero(s[1:] != s[:-1])) for s in logs)
    return 100.0 * switches / steps


def replay_switching_rate(weight_logs: Sequence, epsilon: float) -> float:
    """Switching rate obtained by re-running the hysteresis rule on logged weights."""
    return switching_rate([replay_selections(w, epsilon) for w in weight_logs if len(w)])


# ---------------------------------------------------------------------- sweeps

SWEEP_PARAMS = ("epsilon", "alpha", "demo_budget")
SWEEP_HEADER = ["param", "value", "success", "ci_low", "ci_high", "switching_rate", "final_loss", "seed", "config_hash"]


def sweep(param: str, grid: Sequence, bases, spec, task: Task, demos, n_episodes: int = 100, seed: int = 0,
          params: EnvParams = DEFAULT_PARAMS, threads: int = 1) -> list[dict]:
    """Adapt and evaluate at each grid value with shared seeds.

    ``demos`` is a dataset, or for ``demo_budget`` a callable
    ``budget -> dataset``. For ``epsilon`` a single switching net is trained
    and reused at every grid point.
    """
    from .pipelines import adapt

    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"sweep param must be one of {SWEEP_PARAMS}")
    if len(grid) == 0:
        raise ConfigurationError("empty sweep grid")
    rows = []
    if param == "epsilon":
        if spec.method != "hard_switch":
            raise ConfigurationError("epsilon sweeps need method hard_switch")
        res = adapt(bases, demos, spec, threads)
        for eps in grid:
            pol = replace(res.policy, epsilon=float(eps), current=None, last_choice=None)
            rows.append(_row(param, eps, evaluate(pol, task, n_episodes, seed, params=params), res.report))
        return rows
    for v in grid:
        if param == "alpha":
            s, data = replace(spec, alpha=float(v)), demos
        else:
            s, data = replace(spec, demo_budget=int(v)), demos(int(v))
        res = adapt(bases, data, s, threads)
        rows.append(_row(param, v, evaluate(res.policy, task, n_episodes, seed, params=params), res.report))
    return rows


def _row(param, value, rep: EvalReport, report: dict) -> dict:
    return {"param": param, "value": value, "success": rep.success_rate, "ci_low": rep.ci_low,
            "ci_high": rep.ci_high, "switching_rate": rep.switching_rate, "final_loss": report["final_loss"]}


def write_sweep_csv(path, rows, seed: int, config_hash: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            sr = "" if r["switching_rate"] is None else repr(float(r["switching_rate"]))
            w.writerow([r["param"], r["value"], repr(float(r["success"])), repr(float(r["ci_low"])),
                        repr(float(r["ci_high"])), sr, repr(float(r["final_loss"])), seed, config_hash])
