"""Gradient optimisers selectable by a genome: Adam, RMSprop, SGD with momentum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import NumericError, Tensor

LR_RANGE = (1e-5, 1e-1)
DECAY_EVERY = 1000


class OptimizerKind(str, Enum):
    ADAM = "Adam"
    RMSPROP = "RMSprop"
    SGD = "SGDMomentum"


def learning_rate(lr0: float, decay: float, step: int, every: int = DECAY_EVERY) -> float:
    """Inverse-time decay applied once per ``every`` steps."""
    return lr0 / (1.0 + decay * (step // every))


@dataclass
class OptimizerState:
    kind: OptimizerKind
    lr0: float
    decay: float = 0.0
    step_count: int = 0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    alpha: float = 0.99
    eps: float = 1e-8
    decay_every: int = DECAY_EVERY
    buffers: dict[int, tuple[np.ndarray, ...]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        lo, hi = LR_RANGE
        if not lo <= self.lr0 <= hi:
            raise ValueError(f"lr0 {self.lr0} outside [{lo}, {hi}]")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay {self.decay} outside [0, 1]")
        if self.step_count < 0:
            raise ValueError("step_count must be non-negative")

    @property
    def lr(self) -> float:
        return learning_rate(self.lr0, self.decay, self.step_count, self.decay_every)


def optimizer_step(state: OptimizerState, params: list[np.ndarray],
                   grads: list[np.ndarray]) -> list[np.ndarray]:
    """Update ``params`` in place and advance ``state.step_count``.

    Moment buffers are keyed by parameter position, so the same list order
    must be passed on every call.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    lr = state.lr
    t = state.step_count + 1
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if state.kind is OptimizerKind.ADAM:
            b1, b2 = state.betas
            m, v = state.buffers.get(i) or (np.zeros_like(p), np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            state.buffers[i] = (m, v)
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
        elif state.kind is OptimizerKind.RMSPROP:
            (v,) = state.buffers.get(i) or (np.zeros_like(p),)
            v *= state.alpha
            v += (1 - state.alpha) * g * g
            state.buffers[i] = (v,)
            p -= (lr * g / (np.sqrt(v) + state.eps)).astype(p.dtype)
        else:
            if i in state.buffers:
                (buf,) = state.buffers[i]
                buf *= state.momentum
                buf += g
            else:
                buf = np.array(g, dtype=p.dtype, copy=True)
            state.buffers[i] = (buf,)
            p -= (lr * buf).astype(p.dtype)
    state.step_count = t
    return params


class Optimizer:
    """Binds an :class:`OptimizerState` to a fixed list of parameter tensors."""

    def __init__(self, params: list[Tensor], kind, lr0: float, decay: float = 0.0, **kw):
        self.params = list(params)
        self.state = OptimizerState(OptimizerKind(kind), lr0, decay, **kw)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        optimizer_step(self.state, [p.data for p in self.params], grads)


def log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
