"""Small trainable blocks built on the autodiff tape: linear, MLP, LSTM."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


class Module:
    """Base with named-parameter walking for checkpoints and optimizers."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_params(key))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{key}.{i}"))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{key}.{i}", item))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = glorot(rng, n_in, n_out)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class MLP(Module):
    """Feed-forward tanh network; optional zero-initialized output layer.

    Zero init makes the whole network output exactly 0 at the start, which
    the flow layers rely on to begin as the identity map.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        n_in: int,
        hidden: Sequence[int],
        n_out: int,
        zero_init_last: bool = False,
    ):
        dims = [n_in, *hidden]
        self.layers = [Linear(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        self.out = Linear(rng, dims[-1], n_out, zero_init=zero_init_last)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = ad.tanh(layer(x))
        return self.out(x)


class LSTMCell(Module):
    """Gated cell with separate hidden/cell state; gate order (i, f, o, g)."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_hidden: int):
        self.n_hidden = n_hidden
        self.w = Tensor(glorot(rng, n_in + n_hidden, 4 * n_hidden), requires_grad=True)
        b = np.zeros(4 * n_hidden)
        b[n_hidden : 2 * n_hidden] = 1.0  # forget-gate bias
        self.b = Tensor(b, requires_grad=True)

    def init_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.n_hidden))
        return Tensor(z), Tensor(z.copy())

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        n = self.n_hidden
        pre = ad.add(ad.matmul(ad.concat([x, h], axis=1), self.w), self.b)
        i = ad.sigmoid(pre[:, 0:n])
        f = ad.sigmoid(pre[:, n : 2 * n])
        o = ad.sigmoid(pre[:, 2 * n : 3 * n])
        g = ad.tanh(pre[:, 3 * n : 4 * n])
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new


def run_lstm(cell: LSTMCell, steps: Sequence[Tensor]) -> Tensor:
    """Run a sequence of (B, d) inputs through the cell; returns final hidden."""
    if not steps:
        raise ValueError("run_lstm needs at least one step")
    h, c = cell.init_state(steps[0].shape[0])
    for x in steps:
        h, c = cell.step(x, h, c)
    return h
