"""Small numpy neural-network toolkit: dense layers with hand-written backprop and AdamW."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)


class MLP:
    """Dense stack with tanh on hidden layers and a linear output.

    Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of
    shape (in, out), which is also the serialization order.
    """

    def __init__(self, sizes, rng: np.random.Generator, dtype=np.float32):
        self.sizes = tuple(int(s) for s in sizes)
        self.params = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.params += [glorot(rng, a, b, dtype), np.zeros(b, dtype=dtype)]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x):
        acts = [x]
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            y = acts[-1] @ w + b
            if i < self.n_layers - 1:
                y = np.tanh(y)
            acts.append(y)
        return acts[-1], acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, gy):
        """Returns (grad wrt input, parameter grads in ``params`` order)."""
        grads = [None] * len(self.params)
        g = gy
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            x = acts[i]
            grads[2 * i] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            grads[2 * i + 1] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ self.params[2 * i].T
        return g, grads


def param_shapes(params) -> list[list[int]]:
    return [list(p.shape) for p in params]


@dataclass
class AdamWConfig:
    lr: float = 3e-4
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    warmup_ratio: float = 0.05
    total_steps: int = 20000


def cosine_lr(step: int, cfg: AdamWConfig) -> float:
    """Linear warmup followed by cosine decay to zero; ``step`` counts from 0."""
    warm = max(1, int(round(cfg.warmup_ratio * cfg.total_steps)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    rest = max(1, cfg.total_steps - warm)
    frac = min(1.0, (step - warm) / rest)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay Adam over a list of parameter arrays (updated in place)."""

    def __init__(self, params, cfg: AdamWConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, grads, lr: float | None = None) -> float:
        """One update; ``lr`` overrides the built-in warmup-cosine schedule."""
        c = self.cfg
        lr = cosine_lr(self.step_count, c) if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.weight_decay:
                p -= p.dtype.type(lr * c.weight_decay) * p
            p -= p.dtype.type(lr / bc1) * m / (np.sqrt(v / p.dtype.type(bc2)) + p.dtype.type(c.eps))
        return lr

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v

    def load_state(self, arrays, step_count: int) -> None:
        n = len(self.params)
        for dst, src in zip(self.m + self.v, arrays[:2 * n]):
            dst[...] = src
        self.step_count = int(step_count)


def clip_by_global_norm(grads, max_norm: float):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [g * g.dtype.type(scale) for g in grads]
    return grads, total
