"""Minimal numpy layers with explicit backward passes, Adam and a gradient check.

Parameters live in plain ``dict[str, ndarray]`` objects so models can be
copied, frozen, checkpointed and finite-differenced without special cases.
"""
from dataclasses import dataclass

import numpy as np

from ._seeding import derive_rng


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


SIGMA_FLOOR = 1e-4


def positive(raw):
    """Map raw outputs to strictly positive scales: softplus + floor."""
    return softplus(raw) + SIGMA_FLOOR


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y, x: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y, x: (x > 0).astype(float)),
    "identity": (lambda x: x, lambda y, x: np.ones_like(x)),
}


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: str = "tanh"
    output_dim: int = 1
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 1 or any(w <= 0 for w in widths) or self.output_dim <= 0:
            raise ValueError("an MLP needs at least one positive input width and a positive output")
        if self.activation not in _ACTIVATIONS or self.output_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation; choose from {sorted(_ACTIVATIONS)}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def sizes(self):
        return self.layer_widths + (self.output_dim,)


def init_dense(rng, fan_in, fan_out):
    """Uniform fan-in initialisation."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


class MLP:
    """Stack of dense layers; hidden layers use ``spec.activation``."""

    def __init__(self, spec, name):
        self.spec = spec
        self.name = name

    def keys(self):
        return [f"{self.name}.{p}{i}" for i in range(len(self.spec.sizes) - 1) for p in ("W", "b")]

    def init(self, rng, params):
        sizes = self.spec.sizes
        for i in range(len(sizes) - 1):
            params[f"{self.name}.W{i}"], params[f"{self.name}.b{i}"] = init_dense(rng, sizes[i], sizes[i + 1])
        return params

    def forward(self, params, x):
        cache = []
        n = len(self.spec.sizes) - 1
        for i in range(n):
            act = self.spec.activation if i < n - 1 else self.spec.output_activation
            f, _ = _ACTIVATIONS[act]
            pre = x @ params[f"{self.name}.W{i}"] + params[f"{self.name}.b{i}"]
            y = f(pre)
            cache.append((x, pre, y, act))
            x = y
        return x, cache

    def backward(self, params, cache, dy, grads):
        """Accumulate parameter gradients into ``grads``; return d(input)."""
        for i in reversed(range(len(cache))):
            x, pre, y, act = cache[i]
            dpre = dy * _ACTIVATIONS[act][1](y, pre)
            W = f"{self.name}.W{i}"
            b = f"{self.name}.b{i}"
            x2 = x.reshape(-1, x.shape[-1])
            d2 = dpre.reshape(-1, dpre.shape[-1])
            grads[W] = grads.get(W, 0.0) + x2.T @ d2
            grads[b] = grads.get(b, 0.0) + d2.sum(axis=0)
            dy = dpre @ params[W].T
        return dy


def zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


class Adam:
    """Adam with bias correction, no weight decay."""

    def __init__(self, lr=2e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, keys=None):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in (keys if keys is not None else grads):
            g = grads.get(k)
            if g is None:
                continue
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def gradient_check(loss_and_grad, params, h=1e-5, n_check=None, rng_seed=0, keys=None, floor=None):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` returns ``(loss, grads)``. With ``n_check``
    only a seeded subset of coordinates is checked. The relative error of a
    coordinate is ``|a - n| / max(|a| + |n|, floor)``; the floor keeps
    coordinates whose gradient is zero up to rounding from dominating. By
    default it is ``1e-6 * max(1, |loss|)``, since the rounding noise of a
    central difference grows with the loss value.
    """
    keys = sorted(params) if keys is None else list(keys)
    loss, grads = loss_and_grad(params)
    if floor is None:
        floor = 1e-6 * max(1.0, abs(float(loss)))
    coords = [(k, i) for k in keys for i in range(params[k].size)]
    if n_check is not None and n_check < len(coords):
        rng = derive_rng(rng_seed, "gradient_check")
        pick = np.sort(rng.choice(len(coords), size=n_check, replace=False))
        coords = [coords[j] for j in pick]
    worst = 0.0
    for k, i in coords:
        flat = params[k].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up, _ = loss_and_grad(params)
        flat[i] = old - h
        down, _ = loss_and_grad(params)
        flat[i] = old
        numeric = (up - down) / (2.0 * h)
        g = grads.get(k)
        analytic = 0.0 if g is None else np.asarray(g).reshape(-1)[i]
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)
        worst = max(worst, err)
    return worst
