"""Trainers (CEM, minibatch SGD) and the losses they minimise."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .math_core import ConfigurationError, MlpParams, log_softmax, mlp_backward, mlp_forward, softmax

log = logging.getLogger(__name__)

ATANH_CLIP = 1.0 - 1e-6
# population members per objective call; fixed so results never depend on --threads
CEM_CHUNK = 16


class OptimizationError(RuntimeError):
    """An optimiser could not make progress; carries a diagnostic message."""


# ------------------------------------------------------------------- configs


@dataclass(frozen=True)
class CemConfig:
    population: int = 64
    elite_frac: float = 0.125
    iterations: int = 100
    init_std: float = 0.5
    std_floor: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.population < 10:
            raise ConfigurationError("CEM population must be >= 10")
        if not 0 < self.elite_frac <= 0.5:
            raise ConfigurationError("elite_frac must lie in (0, 0.5]")
        if not self.std_floor > 0:
            raise ConfigurationError("std_floor must be positive")
        if self.iterations < 1 or self.init_std <= 0:
            raise ConfigurationError("iterations and init_std must be positive")

    @property
    def n_elite(self) -> int:
        return max(2, int(round(self.population * self.elite_frac)))


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-2
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")


def config_from_dict(cls, d: Optional[dict], **overrides):
    d = dict(d or {})
    d.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**d)


# ------------------------------------------------------------------- dataset


@dataclass
class TransitionDataset:
    """Ordered transitions grouped into episodes.

    ``action`` holds the action label (for the scripted expert: its clean
    command, even when a perturbed action was executed).
    """

    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    episode_id: np.ndarray
    t: np.ndarray
    task_id: str = ""
    source: str = "expert"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.obs = _as_rows(self.obs)
        self.action = _as_rows(self.action)
        self.next_obs = _as_rows(self.next_obs)
        self.episode_id = np.asarray(self.episode_id, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        n = len(self.obs)
        if not (len(self.action) == len(self.next_obs) == len(self.episode_id) == len(self.t) == n):
            raise ConfigurationError("dataset columns have different lengths")

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def n_timesteps(self) -> int:
        return len(self.obs)

    @property
    def n_episodes(self) -> int:
        return len(np.unique(self.episode_id))

    @property
    def episode_final(self) -> np.ndarray:
        """True for the last record of each episode."""
        nxt_same = np.r_[self.episode_id[1:] == self.episode_id[:-1], False]
        return ~nxt_same

    def check_chaining(self, atol: float = 0.0) -> bool:
        same = ~self.episode_final[:-1]
        return bool(np.allclose(self.next_obs[:-1][same], self.obs[1:][same], rtol=0.0, atol=atol))

    def presquash_actions(self) -> np.ndarray:
        return np.arctanh(np.clip(self.action, -ATANH_CLIP, ATANH_CLIP))

    def metadata(self) -> dict:
        return {"task_id": self.task_id, "count": self.n_timesteps, "episodes": self.n_episodes,
                "source": self.source, **self.meta}

    def save(self, path, meta_path=None) -> None:
        """JSON Lines, one record per line, plus a sidecar metadata file."""
        with open(path, "w") as f:
            for i in range(len(self)):
                rec = {"obs": self.obs[i].tolist(), "action": self.action[i].tolist(),
                       "next_obs": self.next_obs[i].tolist(), "episode_id": int(self.episode_id[i]),
                       "t": int(self.t[i])}
                f.write(json.dumps(rec) + "\n")
        meta_path = meta_path or _meta_path(path)
        with open(meta_path, "w") as f:
            json.dump(self.metadata(), f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path, meta_path=None) -> "TransitionDataset":
        recs = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    recs.append(json.loads(line))
        if not recs:
            raise ConfigurationError(f"{path}: empty dataset")
        try:
            with open(meta_path or _meta_path(path)) as f:
                meta = json.load(f)
        except FileNotFoundError:
            meta = {}
        extra = {k: v for k, v in meta.items() if k not in ("task_id", "count", "episodes", "source")}
        return cls(
            obs=[r["obs"] for r in recs], action=[r["action"] for r in recs],
            next_obs=[r["next_obs"] for r in recs], episode_id=[r["episode_id"] for r in recs],
            t=[r["t"] for r in recs], task_id=meta.get("task_id", ""), source=meta.get("source", "expert"),
            meta=extra,
        )


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x if x.ndim == 2 else x.reshape(len(x), -1)


def _meta_path(path) -> str:
    path = str(path)
    return (path[: -len(".jsonl")] if path.endswith(".jsonl") else path) + ".meta.json"


# ------------------------------------------------------------------------ CEM


@dataclass
class CemResult:
    best_params: np.ndarray
    best_value: float
    history: list  # (iteration, best-ever, population mean)
    final_mean: np.ndarray
    final_std: np.ndarray


def cem_optimize(
    objective: Optional[Callable[[np.ndarray], float]],
    dim: int,
    config: CemConfig,
    x0=None,
    batch_objective: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    threads: int = 1,
) -> CemResult:
    """Minimise with the cross-entropy method over a diagonal Gaussian.

    Either ``objective`` (one vector -> float) or ``batch_objective``
    (``(k, dim)`` -> ``(k,)``) must be given. The initial mean ``x0`` is
    scored too, so the result is never worse than the starting point.
    Non-finite objective values rank last.
    """
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    if objective is None and batch_objective is None:
        raise ConfigurationError("need an objective")
    if batch_objective is None:
        def batch_objective(xs):
            return np.array([objective(x) for x in xs], dtype=np.float64)

    def score(xs):
        chunks = [xs[i:i + CEM_CHUNK] for i in range(0, len(xs), CEM_CHUNK)]
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                parts = list(ex.map(batch_objective, chunks))
        else:
            parts = [batch_objective(c) for c in chunks]
        return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in parts])

    rng = np.random.default_rng(config.seed)
    mean = np.zeros(dim) if x0 is None else np.array(x0, dtype=np.float64)
    if mean.shape != (dim,):
        raise ConfigurationError(f"x0 has shape {mean.shape}, expected ({dim},)")
    std = np.full(dim, float(config.init_std))

    f0 = score(mean[None])[0]
    best_x, best_f = mean.copy(), (f0 if np.isfinite(f0) else np.inf)
    history = []
    for it in range(config.iterations):
        xs = mean + std * rng.standard_normal((config.population, dim))
        fs = score(xs)
        finite = np.isfinite(fs)
        if not finite.any():
            raise OptimizationError(
                f"CEM iteration {it}: all {config.population} objective values non-finite "
                f"(mean norm {np.linalg.norm(mean):.3g}, max std {std.max():.3g})"
            )
        ranked = np.where(finite, fs, np.inf)
        order = np.argsort(ranked, kind="stable")
        if ranked[order[0]] < best_f:
            best_f, best_x = float(ranked[order[0]]), xs[order[0]].copy()
        elite = xs[order[: config.n_elite]]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), config.std_floor)
        history.append((it, best_f, float(fs[finite].mean())))
    return CemResult(best_x, float(best_f), history, mean, std)


def write_history_csv(path, history, header=("iteration", "best", "mean")) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in history:
            w.writerow(row)


# ------------------------------------------------------------------------ SGD


def finite_diff_grad(objective, params, step: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences; ``coords`` restricts which entries are probed."""
    if not step > 0:
        raise ConfigurationError("step must be positive")
    x = np.array(params, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size) if coords is None else coords:
        orig = x.flat[i]
        x.flat[i] = orig + step
        fp = objective(x)
        x.flat[i] = orig - step
        fm = objective(x)
        x.flat[i] = orig
        g.flat[i] = (fp - fm) / (2.0 * step)
    return g


def check_gradient(loss_and_grad, params, idx, rtol=1e-4, atol=1e-7, n_coords=40, seed=0, step=1e-5):
    """Compare the analytic gradient against central differences on a few coordinates."""
    _, g = loss_and_grad(params, idx)
    rng = np.random.default_rng(seed)
    coords = rng.choice(params.size, size=min(n_coords, params.size), replace=False)
    num = finite_diff_grad(lambda p: loss_and_grad(p, idx)[0], params, step, coords)
    err = np.abs(g[coords] - num[coords])
    ok = err <= rtol * np.maximum(np.abs(g[coords]), np.abs(num[coords])) + atol
    if not ok.all():
        worst = int(coords[np.argmax(err)])
        raise OptimizationError(
            f"gradient check failed at coordinate {worst}: analytic {g[worst]:.6g} vs numeric {num[worst]:.6g}"
        )


def sgd_train(
    loss_and_grad: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
    init_params,
    config: SgdConfig,
    n_samples: int,
    grad_check=False,
) -> tuple[np.ndarray, list[float]]:
    """Minibatch SGD over shuffled epochs.

    ``loss_and_grad(params, batch_indices)`` returns the minibatch mean loss and
    its gradient. ``grad_check`` (True, or a surrogate with the same
    signature whose gradient is exact) verifies the gradient against central
    differences before the first step. An epoch that produces a non-finite loss is rolled back and
    retried with half the learning rate, at most three times.
    """
    params = np.array(init_params, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    all_idx = np.arange(n_samples)
    loss0, _ = loss_and_grad(params, all_idx)
    if not np.isfinite(loss0):
        raise OptimizationError(f"initial loss is not finite ({loss0})")
    if grad_check:
        fn = grad_check if callable(grad_check) else loss_and_grad
        check_gradient(fn, params, all_idx[: min(n_samples, config.batch_size)])
    lr = config.learning_rate
    velocity = np.zeros_like(params)
    history = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n_samples)
        for attempt in range(4):
            p, v = params.copy(), velocity.copy()
            losses, ok = [], True
            for i in range(0, n_samples, config.batch_size):
                idx = perm[i:i + config.batch_size]
                loss, grad = loss_and_grad(p, idx)
                if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                    ok = False
                    break
                losses.append(loss * len(idx))
                v = config.momentum * v - lr * grad
                p = p + v
            if ok:
                break
            if attempt == 3:
                raise OptimizationError(f"non-finite loss in epoch {epoch} after 3 learning-rate halvings (lr={lr:g})")
            lr *= 0.5
            log.warning("epoch %d: non-finite loss, retrying with lr=%g", epoch, lr)
        params, velocity = p, v
        history.append(float(np.sum(losses) / n_samples))
    return params, history


def adam_train(loss_and_grad, init_params, config: SgdConfig, n_samples: int,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam with the same calling convention as :func:`sgd_train`."""
    params = np.array(init_params, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    step = 0
    history = []
    for _ in range(config.epochs):
        perm = rng.permutation(n_samples)
        total = 0.0
        for i in range(0, n_samples, config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss, grad = loss_and_grad(params, idx)
            if not np.isfinite(loss):
                raise OptimizationError("non-finite loss during Adam training")
            step += 1
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            params = params - config.learning_rate * (m / (1 - beta1 ** step)) / (np.sqrt(v / (1 - beta2 ** step)) + eps)
            total += loss * len(idx)
        history.append(total / n_samples)
    return params, history


# --------------------------------------------------------------------- losses


def bc_loss_alignment(policy, data: TransitionDataset) -> float:
    """Mean negative log-likelihood of the demo actions under ``policy``.

    Demo actions are mapped to the pre-squash space with a clipped atanh; the
    tanh Jacobian is omitted (a per-record constant for fixed data).
    """
    if len(data) == 0:
        raise ConfigurationError("empty dataset")
    lp = policy.presquash_log_prob(data.obs, data.presquash_actions())
    return float(-np.mean(lp))


class SwitchingObjective:
    """Regularised switching loss for a weighting net over fixed base policies.

    The posterior target is the base likelihoods of each demo action
    normalised over bases (in log space). The next-state weights are a fixed
    target: no gradient flows through them.
    """

    def __init__(self, data: TransitionDataset, bases, alpha: float, template: MlpParams,
                 obs_transform=None):
        if not 0.0 <= alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if len(data) == 0:
            raise ConfigurationError("empty dataset")
        self.alpha = float(alpha)
        self.template = template
        u = data.presquash_actions()
        loglik = np.stack([b.presquash_log_prob(data.obs, u) for b in bases], axis=1)
        self.log_posterior = log_softmax(loglik, axis=1)
        self.posterior = np.exp(self.log_posterior)
        tf = obs_transform or (lambda x: x)
        self.obs = tf(data.obs)
        self.next_obs = tf(data.next_obs)
        self.not_final = (~data.episode_final).astype(np.float64)
        self.n = len(data)

    def terms(self, params: MlpParams, idx=None):
        idx = slice(None) if idx is None else idx
        logw = log_softmax(mlp_forward(params, self.obs[idx])[0], axis=1)
        w_next = softmax(mlp_forward(params, self.next_obs[idx])[0], axis=1)
        ce_post = -np.sum(self.posterior[idx] * logw, axis=1)
        ce_next = -np.sum(w_next * logw, axis=1) * self.not_final[idx]
        return ce_post, ce_next

    def loss(self, params: MlpParams, idx=None) -> float:
        ce_post, ce_next = self.terms(params, idx)
        return float(np.mean(self.alpha * ce_post + (1.0 - self.alpha) * ce_next))

    def loss_and_grad(self, flat, idx, target_flat=None):
        """Minibatch loss and its stop-gradient gradient.

        ``target_flat`` evaluates the next-state weights at other parameters;
        with it fixed the returned gradient is the exact gradient of the
        returned loss (used for finite-difference checks).
        """
        params = self.template.with_flat(flat)
        tparams = params if target_flat is None else self.template.with_flat(target_flat)
        x = self.obs[idx]
        logits, hidden = mlp_forward(params, x)
        logw = log_softmax(logits, axis=1)
        w = np.exp(logw)
        w_next = softmax(mlp_forward(tparams, self.next_obs[idx])[0], axis=1)
        nf = self.not_final[idx][:, None]
        q = self.posterior[idx]
        loss = np.mean(self.alpha * -np.sum(q * logw, 1) + (1 - self.alpha) * -np.sum(w_next * logw, 1) * nf[:, 0])
        # d CE(target, softmax(z)) / dz = softmax(z) * sum(target) - target
        g = self.alpha * (w - q) + (1 - self.alpha) * (w - w_next) * nf
        grad = mlp_backward(params, x, g / len(x), hidden)
        return float(loss), grad.flat()

    def frozen_target(self, flat):
        """Loss with next-state weights pinned at ``flat``: a gradient-check surrogate."""
        target = np.array(flat, dtype=np.float64)
        return lambda p, idx: self.loss_and_grad(p, idx, target)


def switching_loss(w_net: MlpParams, data: TransitionDataset, bases, alpha: float) -> float:
    return SwitchingObjective(data, bases, alpha, w_net).loss(w_net)


def to_jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return obj
