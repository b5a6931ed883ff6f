"""End-to-end drivers: pre-train bases, collect demonstrations, adapt."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cargoal_env import DEFAULT_PARAMS, EnvParams, Task, VecCarGoal, observe, wrap_angle
from .math_core import AffineTransform, ConfigurationError, MlpParams, mlp_backward, mlp_forward, mvn_log_prob
from .optim import (
    ATANH_CLIP,
    CemConfig,
    OptimizationError,
    SgdConfig,
    SwitchingObjective,
    TransitionDataset,
    adam_train,
    bc_loss_alignment,
    cem_optimize,
    sgd_train,
)
from .policies import (
    ActionAlignPolicy,
    ActionReAlignPolicy,
    BasePolicy,
    ObsAlignPolicy,
    SwitchingPolicy,
)

log = logging.getLogger(__name__)

METHODS = ("obs_align", "action_align", "action_realign", "soft_switch", "hard_switch")
UMAX = float(np.arctanh(ATANH_CLIP))


# ---------------------------------------------------------------------- expert


@dataclass(frozen=True)
class ExpertGains:
    steer: float = 2.5
    throttle: float = 0.9
    speed_damping: float = 1.5


def scripted_expert(obs, task: Task, gains: ExpertGains = ExpertGains(), params: EnvParams = DEFAULT_PARAMS):
    """Goal-aware controller: steer toward the goal bearing, throttle on distance.

    Commands are squashed with tanh so they are smooth functions of the state;
    the pre-squash command is capped so its clipped atanh is exact.
    """
    obs = np.asarray(obs, dtype=np.float64)
    x = np.atleast_2d(obs)
    delta = np.asarray(task.goal) - x[:, :2]
    heading = np.arctan2(x[:, 3], x[:, 2])
    err = wrap_angle(np.arctan2(delta[:, 1], delta[:, 0]) - heading)
    dist = np.linalg.norm(delta, axis=1)
    speed = x[:, 4] * params.v_max
    u = np.stack([gains.steer * err, gains.throttle * dist - gains.speed_damping * speed], axis=-1)
    a = np.tanh(np.clip(u, -UMAX, UMAX))
    return a[0] if obs.ndim == 1 else a


# ------------------------------------------------------------------- rollouts


def rollout_returns(actor: Callable, task: Task, seeds: Sequence[int], params: EnvParams = DEFAULT_PARAMS):
    """Run one episode per seed in lockstep with ``actor(obs_batch)``.

    Returns (returns, success, lengths).
    """
    env = VecCarGoal(task, len(seeds), params)
    obs = env.reset(seeds)
    ret = np.zeros(len(seeds))
    while env.active.any():
        obs, r = env.step(actor(obs))
        ret += r
    return ret, env.success.copy(), env.steps.copy()


def collect_demos(
    actor: Callable,
    task: Task,
    budget: int,
    seed: int,
    noise: float = 0.0,
    params: EnvParams = DEFAULT_PARAMS,
    source: str = "expert",
    batch: int = 8,
) -> TransitionDataset:
    """Whole successful episodes until at least ``budget`` timesteps are kept.

    With ``noise > 0`` the executed action is perturbed in pre-squash space by
    ``noise * N(0, I)`` while the actor's own action is recorded as the label,
    so the data covers recoveries from off-nominal states.
    """
    if budget < 1:
        raise ConfigurationError("demo budget must be >= 1")
    if noise < 0:
        raise ConfigurationError("noise must be >= 0")
    ss = np.random.SeedSequence([int(seed), 0xDE40])
    cols = {k: [] for k in ("obs", "action", "next_obs", "episode_id", "t")}
    kept = attempted = 0
    n_kept_eps = 0
    while kept < budget:
        if attempted >= 10 * budget:
            if n_kept_eps == 0:
                raise OptimizationError(f"no successful episode in {attempted} timesteps (10x budget)")
            log.warning("stopping demo collection at %d timesteps (budget %d)", kept, budget)
            break
        children = ss.spawn(batch)
        reset_seeds = [int(c.generate_state(1)[0]) for c in children]
        rngs = [np.random.default_rng(c) for c in children]
        env = VecCarGoal(task, batch, params)
        obs = env.reset(reset_seeds)
        traj = [[] for _ in range(batch)]
        while env.active.any():
            act = np.asarray(actor(obs), dtype=np.float64)
            exe = act
            if noise > 0:
                xi = np.stack([r.standard_normal(2) for r in rngs])
                exe = np.tanh(np.arctanh(np.clip(act, -ATANH_CLIP, ATANH_CLIP)) + noise * xi)
            running = env.active.copy()
            nxt, _ = env.step(exe)
            for i in np.flatnonzero(running):
                traj[i].append((obs[i], act[i], nxt[i]))
            obs = nxt
        for i in range(batch):
            if kept >= budget:
                break
            attempted += len(traj[i])
            if env.success[i]:
                for t, (o, a, n) in enumerate(traj[i]):
                    cols["obs"].append(o)
                    cols["action"].append(a)
                    cols["next_obs"].append(n)
                    cols["episode_id"].append(n_kept_eps)
                    cols["t"].append(t)
                kept += len(traj[i])
                n_kept_eps += 1
            elif attempted >= 10 * budget:
                break
    return TransitionDataset(**cols, task_id=task.task_id, source=source,
                             meta={"budget": int(budget), "seed": int(seed), "noise": float(noise)})


# ---------------------------------------------------------------- pre-training


@dataclass(frozen=True)
class PretrainSpec:
    """Base-policy training: supervised warm start on expert commands over
    uniformly drawn states, then CEM policy search on rollout return."""

    base_tasks: tuple = ()
    hidden: tuple = (32, 32)
    log_std: float = float(np.log(2.0))
    bc_states: int = 20000
    bc: SgdConfig = SgdConfig(learning_rate=1e-3, batch_size=128, epochs=60)
    cem: CemConfig = CemConfig(population=16, elite_frac=0.25, iterations=5, init_std=0.005)
    rollout_episodes: int = 8
    gate_episodes: int = 100
    gate: float = 0.9
    seed: int = 0

    def __post_init__(self):
        ids = [t.task_id for t in self.base_tasks]
        goals = [t.goal for t in self.base_tasks]
        if len(set(ids)) != len(ids) or len(set(goals)) != len(goals):
            raise ConfigurationError("base tasks must be distinct")
        if self.rollout_episodes < 1 or self.gate_episodes < 1 or self.bc_states < 1:
            raise ConfigurationError("episode and state counts must be >= 1")


@dataclass
class PretrainResult:
    policy: BasePolicy
    success_rate: float
    bc_history: list
    cem_history: list


class GateError(RuntimeError):
    """A base policy missed the success gate; ``result`` holds the best policy found."""

    def __init__(self, msg, result: PretrainResult):
        super().__init__(msg)
        self.result = result


def _task_seed(seed: int, task: Task) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *[ord(c) for c in task.task_id]])


def train_base_policy(task: Task, spec: PretrainSpec, threads: int = 1,
                      params: EnvParams = DEFAULT_PARAMS) -> PretrainResult:
    from .evaluation import evaluate

    ss = _task_seed(spec.seed, task)
    s_init, s_states, s_bc, s_cem, s_roll = (int(c.generate_state(1)[0]) for c in ss.spawn(5))
    rng = np.random.default_rng(s_states)
    n = spec.bc_states
    pos = rng.uniform(-params.arena, params.arena, (n, 2))
    obs = observe(pos, rng.uniform(-np.pi, np.pi, n), rng.uniform(0, params.v_max, n), params)
    target = np.arctanh(np.clip(scripted_expert(obs, task, params=params), -ATANH_CLIP, ATANH_CLIP))

    template = MlpParams.init([obs.shape[1], *spec.hidden, 2], np.random.default_rng(s_init), "tanh")

    def mse(flat, idx):
        p = template.with_flat(flat)
        out, hidden = mlp_forward(p, obs[idx])
        r = out - target[idx]
        return 0.5 * float(np.mean(np.sum(r * r, axis=1))), mlp_backward(p, obs[idx], r / len(idx), hidden).flat()

    bc_cfg = SgdConfig(**{**spec.bc.__dict__, "seed": s_bc})
    flat, bc_hist = adam_train(mse, template.flat(), bc_cfg, n)
    log_std = np.full(2, spec.log_std)
    roll_seeds = [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(s_roll).spawn(spec.rollout_episodes)]

    def neg_return(x):
        pol = BasePolicy(template.with_flat(x), log_std, task.task_id)
        ret, _, _ = rollout_returns(lambda o: pol.act(o, "mean"), task, roll_seeds, params)
        return -float(ret.mean())

    cem_cfg = CemConfig(**{**spec.cem.__dict__, "seed": s_cem})
    res = cem_optimize(neg_return, flat.size, cem_cfg, x0=flat, threads=threads)
    policy = BasePolicy(template.with_flat(res.best_params), log_std, task.task_id)
    rep = evaluate(policy, task, spec.gate_episodes, seed=spec.seed + 10_000, mode="mean", params=params)
    result = PretrainResult(policy, rep.success_rate, bc_hist, res.history)
    if rep.success_rate < spec.gate:
        raise GateError(f"{task.task_id}: success {rep.success_rate:.2f} below gate {spec.gate:.2f}", result)
    return result


# ------------------------------------------------------------------ adaptation


@dataclass(frozen=True)
class AdaptSpec:
    method: str
    target_task: Task
    demo_budget: int = 2000
    alpha: float = 0.9
    epsilon: float = 0.1
    cem: CemConfig = CemConfig(population=128, elite_frac=0.125, iterations=100, init_std=0.5)
    sgd: Optional[SgdConfig] = None
    w_hidden: tuple = (64, 64)
    latent_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.demo_budget < 1:
            raise ConfigurationError("demo_budget must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if not self.epsilon >= 0:
            raise ConfigurationError("epsilon must be >= 0")

    @property
    def sgd_config(self) -> SgdConfig:
        if self.sgd is not None:
            return self.sgd
        if self.method == "action_realign":
            return SgdConfig(learning_rate=0.04, batch_size=64, epochs=200)
        return SgdConfig(learning_rate=0.3, batch_size=64, epochs=400)


@dataclass
class AdaptResult:
    policy: object
    report: dict


def _base_seed(seed: int, base: BasePolicy) -> int:
    """Per-base stream keyed by content, so results do not depend on list order."""
    return int(np.random.SeedSequence([int(seed), int(base.digest()[:8], 16)]).generate_state(1)[0])


def _standardizer(x):
    m = x.mean(axis=0)
    s = x.std(axis=0)
    return m, np.where(s > 1e-8, s, 1.0)


def _whitened_affine(theta, m, s):
    """Affine maps from coordinates where ``theta = [I, 0]`` is the identity
    and unit steps move in units of the input spread. Batched over rows of theta."""
    d = len(m)
    theta = np.atleast_2d(theta)
    ah = theta[:, : d * d].reshape(-1, d, d)
    a = s[None, :, None] * ah / s[None, None, :]
    b = m - np.einsum("kij,j->ki", a, m) + s * theta[:, d * d:]
    return a, b


def _identity_theta(d):
    return np.concatenate([np.eye(d).ravel(), np.zeros(d)])


def _gauss_nll(mu, u, log_std):
    z = (u - mu) / np.exp(log_std)
    return 0.5 * np.sum(z * z, axis=-1) + np.sum(log_std) + len(log_std) * 0.5 * np.log(2 * np.pi)


def _fit_obs_align(base, data, spec, seed, threads):
    x, u = data.obs, data.presquash_actions()
    m, s = _standardizer(x)
    d = x.shape[1]

    def batch_loss(thetas):
        a, b = _whitened_affine(thetas, m, s)
        xt = np.einsum("kij,nj->kni", a, x) + b[:, None, :]
        mu = base.mean_presquash(xt.reshape(-1, d)).reshape(len(thetas), len(x), -1)
        return _gauss_nll(mu, u[None], base.log_std).mean(axis=1)

    cfg = CemConfig(**{**spec.cem.__dict__, "seed": seed})
    res = cem_optimize(None, d * d + d, cfg, x0=_identity_theta(d), batch_objective=batch_loss, threads=threads)
    a, b = _whitened_affine(res.best_params, m, s)
    return ObsAlignPolicy(base, AffineTransform(a[0], b[0])), res.history


def _fit_action_align(base, data, spec, seed, threads):
    u = data.presquash_actions()
    mu = base.mean_presquash(data.obs)
    m, s = _standardizer(mu)

    def batch_loss(thetas):
        a, b = _whitened_affine(thetas, m, s)
        mean = np.einsum("kij,nj->kni", a, mu) + b[:, None, :]
        cov = (a * base.std ** 2) @ np.swapaxes(a, 1, 2)
        return -mvn_log_prob(mean, cov[:, None], u[None]).mean(axis=1)

    cfg = CemConfig(**{**spec.cem.__dict__, "seed": seed})
    res = cem_optimize(None, 6, cfg, x0=_identity_theta(2), batch_objective=batch_loss, threads=threads)
    a, b = _whitened_affine(res.best_params, m, s)
    return ActionAlignPolicy(base, AffineTransform(a[0], b[0])), res.history


def _fit_realign(base, data, spec, seed):
    """SGD on the latent-to-action map in decorrelated latent coordinates.

    Latent units are strongly correlated, which makes plain SGD on the raw
    map crawl; whitening makes the problem well conditioned. The result is
    mapped back to raw latent coordinates.
    """
    h = base.latent(data.obs)
    u = data.presquash_actions()
    var = np.exp(2 * base.log_std)
    mean = h.mean(axis=0)
    lam, vecs = np.linalg.eigh(np.cov(h.T, bias=True))
    lam = np.maximum(lam, 0.0) + spec.latent_eps
    proj = vecs / np.sqrt(lam)
    hw = (h - mean) @ proj
    w0, b0 = base.body.weights[-1], base.body.biases[-1]
    ww = w0 @ (np.sqrt(lam)[:, None] * vecs.T).T
    bw = b0 + w0 @ mean
    dout, din = ww.shape

    def loss_and_grad(flat, idx):
        w = flat[: dout * din].reshape(dout, din)
        r = (hw[idx] @ w.T + flat[dout * din:] - u[idx]) / var
        loss = float(np.mean(_gauss_nll(hw[idx] @ w.T + flat[dout * din:], u[idx], base.log_std)))
        gw = r.T @ hw[idx] / len(idx)
        return loss, np.concatenate([gw.ravel(), r.mean(axis=0)])

    cfg = SgdConfig(**{**spec.sgd_config.__dict__, "seed": seed})
    flat, hist = sgd_train(loss_and_grad, np.concatenate([ww.ravel(), bw]), cfg, len(data))
    w = flat[: dout * din].reshape(dout, din) @ proj.T
    b = flat[dout * din:] - w @ mean
    return ActionReAlignPolicy(base, AffineTransform(w, b)), hist


def _fit_switching(bases, data, spec, seed):
    m, s = _standardizer(data.obs)
    rng = np.random.default_rng(seed)
    template = MlpParams.init([data.obs.shape[1], *spec.w_hidden, len(bases)], rng, "tanh")
    obj = SwitchingObjective(data, bases, spec.alpha, template, obs_transform=lambda x: (x - m) / s)
    cfg = SgdConfig(**{**spec.sgd_config.__dict__, "seed": seed})
    flat, hist = sgd_train(obj.loss_and_grad, template.flat(), cfg, len(data),
                           grad_check=obj.frozen_target(template.flat()))
    p = template.with_flat(flat)
    # fold the input standardisation into the first layer
    w1 = p.weights[0] / s
    b1 = p.biases[0] - w1 @ m
    w_net = MlpParams([w1, *p.weights[1:]], [b1, *p.biases[1:]], p.activation)
    mode = "soft" if spec.method == "soft_switch" else "hard"
    return SwitchingPolicy(list(bases), w_net, mode, spec.epsilon if mode == "hard" else 0.0), hist


def adapt(bases: Sequence[BasePolicy], data: TransitionDataset, spec: AdaptSpec, threads: int = 1) -> AdaptResult:
    """Fit a target policy from demonstrations without touching the bases.

    Alignment methods fit one transform per base and keep the pair with the
    lowest final imitation loss (ties: lowest index).
    """
    if not bases:
        raise ConfigurationError("need at least one base policy")
    if len(data) == 0:
        raise ConfigurationError("empty dataset")
    if data.task_id and data.task_id != spec.target_task.task_id:
        raise ConfigurationError(f"dataset is for task {data.task_id!r}, spec targets {spec.target_task.task_id!r}")
    report = {"method": spec.method, "target_task": spec.target_task.task_id, "n_timesteps": len(data),
              "seed": spec.seed, "base_ids": [b.task_id for b in bases]}

    if spec.method in ("soft_switch", "hard_switch"):
        seed = int(np.random.SeedSequence([int(spec.seed), 0x5717]).generate_state(1)[0])
        policy, hist = _fit_switching(bases, data, spec, seed)
        from .optim import switching_loss

        report.update(alpha=spec.alpha, epsilon=policy.epsilon, mode=policy.mode,
                      final_loss=switching_loss(policy.w_net, data, bases, spec.alpha), loss_history=hist)
        return AdaptResult(policy, report)

    candidates, losses, histories = [], [], []
    for base in bases:
        seed = _base_seed(spec.seed, base)
        if spec.method == "obs_align":
            pol, hist = _fit_obs_align(base, data, spec, seed, threads)
        elif spec.method == "action_align":
            pol, hist = _fit_action_align(base, data, spec, seed, threads)
        else:
            pol, hist = _fit_realign(base, data, spec, seed)
        candidates.append(pol)
        losses.append(bc_loss_alignment(pol, data))
        histories.append(hist)
    chosen = int(np.argmin(losses))
    report.update(per_base_loss=losses, chosen_index=chosen, chosen_base=bases[chosen].task_id,
                  final_loss=losses[chosen], loss_history=histories[chosen])
    return AdaptResult(candidates[chosen], report)
