"""Adam with bias correction and a step-decay learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError
from .nn import Parameter


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Parameter], grads: Sequence, state: AdamState, lr: float) -> None:
    """Apply one Adam update in place. ``None`` gradients count as zero."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not state.m:
        state.m = [np.zeros(p.shape, dtype=p.data.dtype) for p in params]
        state.v = [np.zeros(p.shape, dtype=p.data.dtype) for p in params]
    if len(state.m) != len(params):
        raise ConfigError("optimizer state does not match parameter list")
    for i, (g, m) in enumerate(zip(grads, state.m)):
        # checked up front so a bad step leaves parameters and moments untouched
        if g is not None and g.size:
            peak = float(np.abs(g).max())
            if not peak <= math.sqrt(np.finfo(m.dtype).max):
                raise NonFiniteError(f"gradient of parameter {i} is non-finite or too large "
                                     f"to square (max |g| = {peak:g})")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(m)
        if g.shape != m.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr)


@dataclass(frozen=True)
class StepDecaySchedule:
    """``lr(epoch) = base_lr * gamma ** floor(epoch / step_size)``."""

    base_lr: float
    gamma: float
    step_size: int = 1

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.9 <= self.gamma <= 0.99:
            raise ConfigError(f"gamma must lie in [0.9, 0.99], got {self.gamma}")
        if self.step_size < 1:
            raise ConfigError("step_size must be a positive number of epochs")

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.gamma ** math.floor(epoch / self.step_size)
