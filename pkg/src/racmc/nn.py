"""Parameter containers and the forward-mode switches shared by every layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from racmc import tensor as T
from racmc.tensor import Tensor


@dataclass
class Mode:
    """Which stochastic / data-dependent behaviours a forward pass uses.

    ``train()`` turns everything on, ``eval()`` everything off.  ``check()`` is
    the gradient-check setting: no dropout, running-stat normalisation, but the
    differentiable soft mask.
    """

    dropout: bool
    batch_stats: bool
    soft_mask: bool
    rng: np.random.Generator | None = None

    @classmethod
    def train(cls, rng: np.random.Generator) -> "Mode":
        return cls(dropout=True, batch_stats=True, soft_mask=True, rng=rng)

    @classmethod
    def eval(cls) -> "Mode":
        return cls(dropout=False, batch_stats=False, soft_mask=False)

    @classmethod
    def check(cls) -> "Mode":
        return cls(dropout=False, batch_stats=False, soft_mask=True)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal attribute-walking container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    plain numpy arrays listed in ``_buffers``.  Child modules may sit in
    attributes or in lists.
    """

    _buffers: tuple[str, ...] = ()

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: snapshot shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.copy()
        for name, b in buffers.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != b.shape:
                raise ValueError(f"{name}: snapshot shape {arr.shape} != model shape {b.shape}")
            b[...] = arr


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, n_in, (n_in, n_out))
        self.bias = uniform_init(rng, n_in, (n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5):
        self.scale = Tensor(np.ones(n), requires_grad=True)
        self.shift = Tensor(np.zeros(n), requires_grad=True)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return T.batch_norm(x, self.scale, self.shift, self.running_mean, self.running_var,
                            train=mode.batch_stats, momentum=self.momentum, eps=self.eps)
