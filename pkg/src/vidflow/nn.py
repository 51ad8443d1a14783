"""Small parameterized building blocks and optimizers on top of the tensor engine."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .rng import Rng
from .tensor import Tensor, gelu, matmul


class Linear:
    """Affine map x @ w + b with fan-in scaled normal init."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal((d_in, d_out), scale=1.0 / np.sqrt(d_in))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Mlp:
    """Stack of Linear layers with gelu between them."""

    def __init__(self, dims: list[int], rng: Rng, zero_init_last: bool = False):
        if len(dims) < 2:
            raise ConfigError("Mlp needs at least input and output dims")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng.stream("layer", i),
                   zero_init=(zero_init_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{i}"))
        return out


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.zero_grad()


class Sgd:
    """Plain gradient descent (or ascent with maximize=True)."""

    def __init__(self, lr: float, maximize: bool = False):
        self.lr = float(lr)
        self.sign = 1.0 if maximize else -1.0

    def step(self, params: dict[str, Tensor]):
        for name in sorted(params):
            p = params[name]
            if p.grad is not None:
                p.values += self.sign * self.lr * p.grad


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, maximize: bool = False):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.sign = 1.0 if maximize else -1.0
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            p = params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.setdefault(name, np.zeros_like(p.values))
            v = self.v.setdefault(name, np.zeros_like(p.values))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.values += self.sign * self.lr * update


def make_optimizer(kind: str, lr: float, maximize: bool = False):
    if kind == "adam":
        return Adam(lr, maximize=maximize)
    if kind == "sgd":
        return Sgd(lr, maximize=maximize)
    raise ConfigError(f"unknown optimizer kind {kind!r}")
