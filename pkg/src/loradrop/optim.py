"""Seeded RNG streams, parameter initializers and optimizers."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from loradrop.tensor import DTYPE, Tensor


def rng_stream(seed: int, *names: str | int) -> np.random.Generator:
    """A named child stream of ``seed``; the same (seed, names) always yields the same draws."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def kaiming_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> Tensor:
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


def zeros_init(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=DTYPE), requires_grad=True)


def _trainable(params: Iterable[Tensor]) -> list[Tensor]:
    out = []
    for p in params:
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ValueError(f"parameter {p.name or p.shape} has no gradient")
        out.append(p)
    return out


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    for p in _trainable(params):
        p.data -= lr * p.grad


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[int, np.ndarray] = field(default_factory=dict, repr=False)


def adam_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """One Adam update with bias correction. Moments are keyed by position in ``params``."""
    live = _trainable(params)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, p in enumerate(live):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state misaligned with parameter {i}: {m.shape} vs {p.shape}")
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Holds a fixed parameter list and its :class:`OptimizerState`."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-2):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, self.lr)
