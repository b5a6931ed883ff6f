"""Gaussian-MLP base policies and the wrappers that adapt them to a new task.

Base policies are never modified. Every wrapper exposes the same interface:

- ``act(obs, mode, rng)`` returns actions in ``[-1, 1]`` (``mode`` is
  ``"mean"`` or ``"sample"``; batched observations are supported);
- ``presquash_log_prob(obs, u)`` is the exact Gaussian density of a
  pre-squash action ``u``, used by the imitation losses.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .math_core import (
    FORMAT_VERSION,
    AffineTransform,
    ConfigurationError,
    GaussianHead,
    MlpParams,
    affine_apply,
    dumps,
    gaussian_log_prob,
    mlp_forward,
    mvn_log_prob,
    params_digest,
    softmax,
)

MODES = ("mean", "sample")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")


def _noise(rng, shape) -> np.ndarray:
    if rng is None:
        raise ConfigurationError("sample mode needs an rng")
    return rng.standard_normal(shape)


@dataclass(frozen=True)
class BasePolicy:
    """obs -> latent -> pre-squash mean; constant per-dimension log std."""

    body: MlpParams
    log_std: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        ls = np.array(self.log_std, dtype=np.float64).reshape(-1)
        if self.body.out_dim != 2 or ls.shape != (2,):
            raise ConfigurationError("base policy must output a 2-D action")
        ls.flags.writeable = False
        object.__setattr__(self, "log_std", ls)

    @property
    def obs_dim(self) -> int:
        return self.body.in_dim

    @property
    def latent_dim(self) -> int:
        return self.body.shapes[-1][1]

    @property
    def std(self) -> np.ndarray:
        return GaussianHead(np.zeros(2), self.log_std).std

    def _check_obs(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise ConfigurationError(f"observation has dim {obs.shape[-1]}, policy expects {self.obs_dim}")
        return obs

    def mean_presquash(self, obs) -> np.ndarray:
        return mlp_forward(self.body, self._check_obs(obs))[0]

    def latent(self, obs) -> np.ndarray:
        """Activation entering the final layer."""
        return mlp_forward(self.body, self._check_obs(obs))[1][-1]

    def sample_presquash(self, obs, mode: str, rng=None) -> np.ndarray:
        _check_mode(mode)
        mu = self.mean_presquash(obs)
        if mode == "sample":
            mu = mu + self.std * _noise(rng, mu.shape)
        return mu

    def act(self, obs, mode: str = "mean", rng=None) -> np.ndarray:
        return np.tanh(self.sample_presquash(obs, mode, rng))

    def presquash_log_prob(self, obs, u) -> np.ndarray:
        return gaussian_log_prob(GaussianHead(self.mean_presquash(obs), self.log_std), u)

    def digest(self) -> str:
        return params_digest(*self.body.weights, *self.body.biases, self.log_std)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": "base", "task_id": self.task_id,
                "body": self.body.to_dict(), "log_std": self.log_std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BasePolicy":
        if d.get("kind") != "base":
            raise ConfigurationError(f"not a base policy (kind={d.get('kind')!r})")
        if d.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported format_version {d.get('format_version')!r}")
        return cls(MlpParams.from_dict(d["body"]), np.array(d["log_std"]), str(d.get("task_id", "")))


@dataclass(frozen=True)
class ObsAlignPolicy:
    """Base policy run on affinely transformed observations."""

    base: BasePolicy
    t_obs: AffineTransform

    def __post_init__(self):
        n = self.base.obs_dim
        if self.t_obs.in_dim != n or self.t_obs.out_dim != n:
            raise ConfigurationError(f"t_obs must be {n}x{n}")

    kind = "obs_align"

    def act(self, obs, mode: str = "mean", rng=None) -> np.ndarray:
        return self.base.act(affine_apply(self.t_obs, obs), mode, rng)

    def presquash_log_prob(self, obs, u) -> np.ndarray:
        return self.base.presquash_log_prob(affine_apply(self.t_obs, obs), u)


@dataclass(frozen=True)
class ActionAlignPolicy:
    """Affine map applied to the base policy's pre-squash action, then squashed.

    The density of the transformed action is Gaussian with mean ``A mu + b``
    and covariance ``A diag(sigma^2) A^T``.
    """

    base: BasePolicy
    t_act: AffineTransform

    def __post_init__(self):
        if self.t_act.in_dim != 2 or self.t_act.out_dim != 2:
            raise ConfigurationError("t_act must be 2x2")

    kind = "action_align"

    def act(self, obs, mode: str = "mean", rng=None) -> np.ndarray:
        u = self.base.sample_presquash(obs, mode, rng)
        return np.tanh(affine_apply(self.t_act, u))

    def presquash_log_prob(self, obs, u) -> np.ndarray:
        a = self.t_act.A
        mean = affine_apply(self.t_act, self.base.mean_presquash(obs))
        cov = (a * self.base.std ** 2) @ a.T
        return mvn_log_prob(mean, cov, u)


@dataclass(frozen=True)
class ActionReAlignPolicy:
    """The base's final layer replaced by a learned affine map of the latent."""

    base: BasePolicy
    t_latent: AffineTransform

    def __post_init__(self):
        if self.t_latent.in_dim != self.base.latent_dim:
            raise ConfigurationError(
                f"t_latent takes {self.t_latent.in_dim} inputs, base latent width is {self.base.latent_dim}"
            )
        if self.t_latent.out_dim != 2:
            raise ConfigurationError("t_latent must output a 2-D action")

    kind = "action_realign"

    @classmethod
    def from_base(cls, base: BasePolicy) -> "ActionReAlignPolicy":
        """Transform initialised to the base's own final layer."""
        return cls(base, AffineTransform(base.body.weights[-1], base.body.biases[-1]))

    def mean_presquash(self, obs) -> np.ndarray:
        return affine_apply(self.t_latent, self.base.latent(obs))

    def act(self, obs, mode: str = "mean", rng=None) -> np.ndarray:
        _check_mode(mode)
        mu = self.mean_presquash(obs)
        if mode == "sample":
            mu = mu + self.base.std * _noise(rng, mu.shape)
        return np.tanh(mu)

    def presquash_log_prob(self, obs, u) -> np.ndarray:
        return gaussian_log_prob(GaussianHead(self.mean_presquash(obs), self.base.log_std), u)


def hysteresis_select(weights, current, epsilon: float) -> np.ndarray:
    """One hard-switching step for a batch.

    Keep ``current`` unless some other index has weight at least
    ``weights[current] + epsilon``; then move to the argmax (lowest index on
    ties). ``current=None`` starts at the argmax.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    best = np.argmax(w, axis=1)
    if current is None:
        return best
    cur = np.asarray(current, dtype=np.int64).reshape(-1)
    rows = np.arange(len(w))
    switch = (best != cur) & (w[rows, best] >= w[rows, cur] + epsilon)
    return np.where(switch, best, cur)


def replay_selections(weight_log, epsilon: float, initial=None) -> np.ndarray:
    """Selections produced by the hysteresis rule on a logged ``(T, K)`` weight sequence."""
    w = np.asarray(weight_log, dtype=np.float64)
    sel = np.empty(len(w), dtype=np.int64)
    cur = None if initial is None else np.array([initial])
    for t in range(len(w)):
        cur = hysteresis_select(w[t:t + 1], cur, epsilon)
        sel[t] = cur[0]
    return sel


@dataclass
class SwitchingPolicy:
    """State-dependent choice among base policies.

    ``soft``: a mixture weighted by ``softmax(w_net(obs))``. ``hard``: one base
    per step chosen with hysteresis ``epsilon``. ``current`` holds the hard
    selection for each episode in the batch; call :meth:`reset` between
    episodes. Use one instance per concurrent rollout.
    """

    bases: list
    w_net: MlpParams
    mode: str = "soft"
    epsilon: float = 0.0
    current: Optional[np.ndarray] = field(default=None, repr=False)
    last_choice: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("soft", "hard"):
            raise ConfigurationError(f"switching mode must be soft or hard, got {self.mode!r}")
        if not self.epsilon >= 0:
            raise ConfigurationError("epsilon must be >= 0")
        if not self.bases:
            raise ConfigurationError("need at least one base policy")
        if self.w_net.out_dim != len(self.bases):
            raise ConfigurationError(f"w_net outputs {self.w_net.out_dim} logits for {len(self.bases)} bases")

    @property
    def kind(self) -> str:
        return f"{self.mode}_switch"

    def reset(self) -> None:
        self.current = None
        self.last_choice = None

    def weights(self, obs) -> np.ndarray:
        return softmax(mlp_forward(self.w_net, np.asarray(obs, dtype=np.float64))[0], axis=-1)

    def act(self, obs, mode: str = "mean", rng=None):
        """Returns ``(action, weights)``; the chosen indices go to ``last_choice``."""
        _check_mode(mode)
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        x = np.atleast_2d(obs)
        w = self.weights(x)
        n = len(x)
        if self.mode == "hard":
            self.current = hysteresis_select(w, self.current, self.epsilon)
            choice = self.current
        elif mode == "sample":
            if rng is None:
                raise ConfigurationError("sample mode needs an rng")
            u = rng.random(n)
            choice = np.minimum((np.cumsum(w, axis=1) < u[:, None]).sum(axis=1), w.shape[1] - 1)
        else:
            choice = np.argmax(w, axis=1)
        if self.mode == "soft" and mode == "mean":
            means = np.stack([b.act(x, "mean") for b in self.bases], axis=1)
            action = np.einsum("nk,nkd->nd", w, means)
        else:
            action = np.empty((n, 2))
            noise = _noise(rng, (n, 2)) if mode == "sample" else np.zeros((n, 2))
            for k, b in enumerate(self.bases):
                m = choice == k
                if m.any():
                    action[m] = np.tanh(b.mean_presquash(x[m]) + b.std * noise[m])
        self.last_choice = np.asarray(choice)
        if single:
            return action[0], w[0]
        return action, w

    def presquash_log_prob(self, obs, u) -> np.ndarray:
        """Mixture log density (soft-switching semantics)."""
        w = self.weights(np.atleast_2d(obs))
        lp = np.stack([b.presquash_log_prob(obs, u) for b in self.bases], axis=-1)
        m = lp.max(axis=-1, keepdims=True)
        return (m + np.log(np.sum(w * np.exp(lp - m), axis=-1, keepdims=True)))[..., 0]


# spec-level function names
def base_act(policy: BasePolicy, obs, mode="mean", rng=None):
    return policy.act(obs, mode, rng)


def obs_align_act(p: ObsAlignPolicy, obs, mode="mean", rng=None):
    return p.act(obs, mode, rng)


def action_align_act(p: ActionAlignPolicy, obs, mode="mean", rng=None):
    return p.act(obs, mode, rng)


def action_realign_act(p: ActionReAlignPolicy, obs, mode="mean", rng=None):
    return p.act(obs, mode, rng)


def switching_act(p: SwitchingPolicy, obs, mode="mean", rng=None):
    return p.act(obs, mode, rng)


# ----------------------------------------------------------------- persistence


def save_base(policy: BasePolicy, path) -> None:
    with open(path, "w") as f:
        f.write(dumps(policy.to_dict()))


def load_base(path) -> BasePolicy:
    try:
        with open(path) as f:
            return BasePolicy.from_dict(json.load(f))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigurationError(f"{path}: cannot read base policy ({e})") from e


def bundle_dict(policy, base_files: dict) -> dict:
    """Serialisable form of an adapted policy.

    ``base_files`` maps base digest -> path of that base's policy file (stored
    relative to the bundle's directory by :func:`save_bundle`).
    """
    def ref(b):
        return {"file": base_files[b.digest()], "digest": b.digest(), "task_id": b.task_id}

    if isinstance(policy, SwitchingPolicy):
        return {"format_version": FORMAT_VERSION, "kind": policy.kind, "mode": policy.mode,
                "epsilon": policy.epsilon, "base_policy_files": [ref(b) for b in policy.bases],
                "w_net": policy.w_net.to_dict()}
    if isinstance(policy, ObsAlignPolicy):
        t = policy.t_obs
    elif isinstance(policy, ActionAlignPolicy):
        t = policy.t_act
    elif isinstance(policy, ActionReAlignPolicy):
        t = policy.t_latent
    else:
        raise ConfigurationError(f"cannot bundle {type(policy).__name__}")
    return {"format_version": FORMAT_VERSION, "kind": policy.kind, "base_policy_file": ref(policy.base),
            "transform": t.to_dict()}


def save_bundle(policy, path, base_files: dict) -> None:
    root = os.path.dirname(os.path.abspath(path))
    rel = {k: os.path.relpath(os.path.abspath(v), root) for k, v in base_files.items()}
    with open(path, "w") as f:
        f.write(dumps(bundle_dict(policy, rel)))


def load_bundle(path):
    """Inverse of :func:`save_bundle`; verifies base digests."""
    try:
        with open(path) as f:
            d = json.load(f)
        if d.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported format_version {d.get('format_version')!r}")
        root = os.path.dirname(os.path.abspath(path))

        def load_ref(r):
            b = load_base(os.path.join(root, r["file"]))
            if b.digest() != r["digest"]:
                raise ConfigurationError(f"base policy {r['file']} does not match its recorded digest")
            return b

        kind = d["kind"]
        if kind in ("soft_switch", "hard_switch"):
            bases = [load_ref(r) for r in d["base_policy_files"]]
            return SwitchingPolicy(bases, MlpParams.from_dict(d["w_net"]), d["mode"], float(d["epsilon"]))
        base = load_ref(d["base_policy_file"])
        t = AffineTransform.from_dict(d["transform"])
        cls = {"obs_align": ObsAlignPolicy, "action_align": ActionAlignPolicy,
               "action_realign": ActionReAlignPolicy}[kind]
        return cls(base, t)
    except ConfigurationError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigurationError(f"{path}: corrupt policy bundle ({type(e).__name__}: {e})") from e
