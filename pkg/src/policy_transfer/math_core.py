"""Dense numerics shared by every other module.

Weights follow the ``(out, in)`` convention so a layer computes ``W @ x + b``.
Every function accepts either a single vector or a ``(batch, dim)`` array;
batched inputs are what the rollout and training code actually use.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; accepts an int, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def child_seeds(seed: int, n: int) -> list[int]:
    """``n`` independent integer seeds derived from ``seed``."""
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


# --------------------------------------------------------------------------- MLP

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0).astype(np.float64)),
}


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights and biases of a fully connected net; hidden layers use ``activation``."""

    weights: tuple
    biases: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        ws = tuple(_frozen(w) for w in self.weights)
        bs = tuple(_frozen(b) for b in self.biases)
        if not ws or len(ws) != len(bs):
            raise ConfigurationError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != ws[k - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {k} expects {w.shape[1]} inputs, previous layer emits {ws[k - 1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigurationError(f"layer {k} has non-finite entries")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @classmethod
    def init(cls, sizes: Sequence[int], rng, activation: str = "tanh", out_scale: float = 0.01):
        """Glorot-uniform hidden layers, small output layer."""
        rng = make_rng(rng)
        weights, biases = [], []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-lim, lim, size=(n_out, n_in))
            if k == len(sizes) - 2:
                w = w * out_scale
            weights.append(w)
            biases.append(np.zeros(n_out))
        return cls(tuple(weights), tuple(biases), activation)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def with_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ConfigurationError(f"expected {self.size} parameters, got {vec.shape}")
        weights, biases, i = [], [], 0
        for w in self.weights:
            n_out, n_in = w.shape
            weights.append(vec[i:i + n_out * n_in].reshape(n_out, n_in))
            i += n_out * n_in
            biases.append(vec[i:i + n_out])
            i += n_out
        return MlpParams(tuple(weights), tuple(biases), self.activation)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "type": "mlp",
            "activation": self.activation,
            "shapes": [list(s) for s in self.shapes],
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        _check_version(d)
        params = cls(tuple(d["weights"]), tuple(d["biases"]), d["activation"])
        if [list(s) for s in params.shapes] != [list(s) for s in d["shapes"]]:
            raise ConfigurationError("declared shapes disagree with weight arrays")
        return params

    def digest(self) -> str:
        return params_digest(self.flat())


def _check_version(d: dict) -> None:
    if d.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported format_version {d.get('format_version')!r}")


def params_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the net on ``x``.

    Returns the output and the list of layer inputs: ``hidden[0]`` is ``x``
    itself and ``hidden[-1]`` is the activation entering the final layer.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ConfigurationError(f"input has {x.shape[-1]} features, net expects {params.in_dim}")
    act = _ACTIVATIONS[params.activation][0]
    hidden = [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if k == last:
            return z, hidden
        h = act(z)
        hidden.append(h)
    raise AssertionError("unreachable")


def mlp_backward(params: MlpParams, x, upstream_grad, hidden=None) -> MlpParams:
    """Gradient of ``sum(upstream_grad * output)`` with respect to every parameter.

    For batched input the gradients are summed over the batch. ``hidden`` may
    be passed from a previous :func:`mlp_forward` call to skip recomputation.
    """
    if hidden is None:
        _, hidden = mlp_forward(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape[-1] != params.out_dim:
        raise ConfigurationError(f"upstream gradient has {g.shape[-1]} entries, net emits {params.out_dim}")
    dact = _ACTIVATIONS[params.activation][1]
    batched = g.ndim == 2
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        a = hidden[k]
        if batched:
            gw[k] = g.T @ a
            gb[k] = g.sum(axis=0)
        else:
            gw[k] = np.outer(g, a)
            gb[k] = g.copy()
        if k:
            g = (g @ params.weights[k]) * dact(a)
    return MlpParams(tuple(gw), tuple(gb), params.activation)


def mlp_input_grad(params: MlpParams, x, upstream_grad, hidden=None) -> np.ndarray:
    """Gradient of ``sum(upstream_grad * output)`` with respect to the input."""
    if hidden is None:
        _, hidden = mlp_forward(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    dact = _ACTIVATIONS[params.activation][1]
    for k in range(len(params.weights) - 1, -1, -1):
        g = g @ params.weights[k]
        if k:
            g = g * dact(hidden[k])
    return g


# ---------------------------------------------------------------- distributions


@dataclass(frozen=True, eq=False)
class GaussianHead:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = _frozen(self.mean)
        log_std = np.broadcast_to(np.clip(np.asarray(self.log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX), mean.shape)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", _frozen(log_std))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def gaussian_log_prob(head: GaussianHead, action) -> np.ndarray | float:
    """Diagonal Gaussian log density, summed over the last axis."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != head.mean.shape[-1]:
        raise ConfigurationError("action and head dimensions differ")
    z = (action - head.mean) / head.std
    out = -0.5 * np.sum(z * z + 2.0 * head.log_std + LOG_2PI, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def mvn_log_prob(mean, cov, x) -> np.ndarray:
    """Full-covariance Gaussian log density; ``cov`` may be shared or batched.

    Returns -inf where ``cov`` is not positive definite.
    """
    mean = np.asarray(mean, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    cov = np.broadcast_to(np.asarray(cov, dtype=np.float64), mean.shape + mean.shape[-1:])
    d = mean.shape[-1]
    sign, logdet = np.linalg.slogdet(cov)
    ok = sign > 0
    safe = np.where(ok[..., None, None], cov, np.eye(d))
    r = x - mean
    sol = np.linalg.solve(safe, r[..., None])[..., 0]
    quad = np.sum(r * sol, axis=-1)
    out = -0.5 * (quad + np.where(ok, logdet, 0.0) + d * LOG_2PI)
    return np.where(ok, out, -np.inf)


def softmax(logits, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ConfigurationError("softmax of an empty vector")
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# ----------------------------------------------------------------------- affine


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """``T(x) = A x + b``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A, b = _frozen(self.A), _frozen(self.b)
        if A.ndim != 2 or b.shape != (A.shape[0],):
            raise ConfigurationError(f"A {A.shape} and b {b.shape} do not form an affine map")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ConfigurationError("affine transform has non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls, n: int) -> "AffineTransform":
        return cls(np.eye(n), np.zeros(n))

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.A.shape[0]

    @property
    def size(self) -> int:
        return self.A.size + self.b.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b])

    @classmethod
    def from_flat(cls, vec, out_dim: int, in_dim: int) -> "AffineTransform":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (out_dim * in_dim + out_dim,):
            raise ConfigurationError(f"expected {out_dim * in_dim + out_dim} parameters, got {vec.shape}")
        return cls(vec[: out_dim * in_dim].reshape(out_dim, in_dim), vec[out_dim * in_dim:])

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """``self ∘ inner``: apply ``inner`` first."""
        return AffineTransform(self.A @ inner.A, self.A @ inner.b + self.b)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "type": "affine",
            "shape": [self.out_dim, self.in_dim],
            "A": self.A.tolist(),
            "b": self.b.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform":
        _check_version(d)
        t = cls(d["A"], d["b"])
        if [t.out_dim, t.in_dim] != list(d["shape"]):
            raise ConfigurationError("declared shape disagrees with A")
        return t


def affine_apply(t: AffineTransform, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != t.in_dim:
        raise ConfigurationError(f"input has {x.shape[-1]} entries, transform expects {t.in_dim}")
    return x @ t.A.T + t.b


def dumps(obj: dict) -> str:
    """Stable JSON text used for every artifact file."""
    return json.dumps(obj, indent=1) + "\n"
