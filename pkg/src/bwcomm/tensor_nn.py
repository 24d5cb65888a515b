"""Dense networks with hand-written backprop, Adam, and a finite-difference checker.

Every array is float64 and batch-major: inputs have shape ``(batch, in_dim)``.
Parameters of a network live in a flat list ``[W0, b0, W1, b1, ...]`` so the
optimizer, the checkpoint writer and the gradient checker can treat every
model the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0


class ConfigError(ValueError):
    """Raised on dimension or configuration mismatches."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z, y, kind, g):
    if kind == "relu":
        return g * (z > 0.0)
    if kind == "tanh":
        return g * (1.0 - y * y)
    return g


@dataclass
class DenseNet:
    """A stack of affine layers, each followed by an activation.

    ``weights[k]`` has shape ``(in_k, out_k)`` so a batch is pushed through as
    ``x @ W + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ConfigError("weights, biases and activations must have equal length")
        for k, (w, b, a) in enumerate(zip(self.weights, self.biases, self.activations)):
            if a not in ACTIVATIONS:
                raise ConfigError(f"layer {k}: unknown activation {a!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError(f"layer {k}: bias shape {b.shape} does not match weight {w.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ConfigError(f"layer {k}: input dim {w.shape[0]} does not chain")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, hidden="relu", out="linear"):
        """Random network with fan-in uniform init (the usual torch Linear default)."""
        weights, biases, acts = [], [], []
        for k in range(len(sizes) - 1):
            bound = 1.0 / np.sqrt(sizes[k])
            weights.append(rng.uniform(-bound, bound, size=(sizes[k], sizes[k + 1])))
            biases.append(rng.uniform(-bound, bound, size=sizes[k + 1]))
            acts.append(out if k == len(sizes) - 2 else hidden)
        return cls(weights, biases, acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_names(self) -> list[str]:
        names = []
        for k in range(len(self.weights)):
            names += [f"W{k}", f"b{k}"]
        return names

    def copy(self) -> DenseNet:
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        list(self.activations))

    def forward(self, x: np.ndarray, cache: bool = False):
        """Evaluate the net on a batch. With ``cache=True`` also return what backward needs."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigError(f"expected input (batch, {self.in_dim}), got {x.shape}")
        inputs, pre, post = [], [], []
        h = x
        for w, b, a in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            y = _act(z, a)
            if cache:
                inputs.append(h)
                pre.append(z)
                post.append(y)
            h = y
        if cache:
            return h, (inputs, pre, post)
        return h

    def backward(self, cache, upstream: np.ndarray):
        """Return ``(param_grads, input_grad)`` for the upstream gradient of the output."""
        inputs, pre, post = cache
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != post[-1].shape:
            raise ConfigError(f"upstream gradient shape {g.shape} != output {post[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            g = _act_grad(pre[k], post[k], self.activations[k], g)
            grads[2 * k] = inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return grads, g


@dataclass
class GaussianHead:
    """A trunk whose last layer emits ``2*d`` values: mean and clamped log-variance."""

    trunk: DenseNet

    def __post_init__(self):
        if self.trunk.out_dim % 2:
            raise ConfigError("GaussianHead trunk must have an even output width")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, hidden="relu"):
        """``sizes`` ends with the message dimension d; the trunk outputs 2*d."""
        sizes = list(sizes[:-1]) + [2 * sizes[-1]]
        return cls(DenseNet.init(sizes, rng, hidden=hidden, out="linear"))

    @property
    def dim(self) -> int:
        return self.trunk.out_dim // 2

    def params(self):
        return self.trunk.params()

    def copy(self):
        return GaussianHead(self.trunk.copy())

    def forward(self, x, cache=False):
        out = self.trunk.forward(x, cache=cache)
        if cache:
            out, tc = out
        d = self.dim
        mean = out[:, :d]
        raw = out[:, d:]
        log_var = np.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)
        if cache:
            return mean, log_var, (tc, raw)
        return mean, log_var

    def backward(self, cache, d_mean, d_log_var):
        tc, raw = cache
        inside = (raw >= LOG_VAR_MIN) & (raw <= LOG_VAR_MAX)
        return self.trunk.backward(tc, np.concatenate([d_mean, d_log_var * inside], axis=1))


def sample_reparam(mean, log_var, noise):
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not (mean.shape == log_var.shape == noise.shape):
        raise ConfigError(f"shape mismatch: {mean.shape}, {log_var.shape}, {noise.shape}")
    return mean + np.exp(0.5 * log_var) * noise


def sample_reparam_grad(log_var, noise, upstream):
    """Gradients of ``sample_reparam`` w.r.t. (mean, log_var)."""
    return upstream, upstream * noise * 0.5 * np.exp(0.5 * log_var)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def clip_by_global_norm(grads, max_norm):
    if max_norm is None or max_norm <= 0:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction.

    Raises NonFiniteError, leaving params and state untouched, if any gradient
    is NaN or infinite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("params, grads and optimizer state must have equal length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ConfigError(f"block {k}: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"block {k}: {bad} non-finite gradient entries; step skipped")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def grad_check(f: Callable[[], float], params: Sequence[np.ndarray], analytic: Sequence[np.ndarray],
               eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` is re-evaluated after perturbing each coordinate of each array in
    ``params`` in place. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps coordinates whose true
    gradient is zero from dominating through round-off.
    """
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + eps
            fp = f()
            flat[idx] = old - eps
            fm = f()
            flat[idx] = old
            num = (fp - fm) / (2.0 * eps)
            a = gflat[idx]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
