"""AdamW with decoupled weight decay, and a multi-step LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class LrSchedule:
    """Piecewise-constant decay: lr(step) = base_lr * factor^(#milestones <= step)."""

    base_lr: float
    milestones: tuple = ()
    factor: float = 1.0

    def __post_init__(self):
        self.milestones = tuple(sorted(int(m) for m in self.milestones))
        if self.base_lr <= 0:
            raise ContractError("base_lr must be positive")
        if not (0 < self.factor <= 1):
            raise ContractError("factor must lie in (0, 1]")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ContractError("step must be >= 0")
    hits = sum(1 for m in schedule.milestones if m <= step)
    return schedule.base_lr * schedule.factor ** hits


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Decay is multiplicative (p *= 1 - lr*wd) and applied before the moment
    update, so a parameter with zero gradient and zero decay is untouched,
    and with decay alone shrinks by exactly (1 - lr*wd) per step.
    """

    params: dict
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = field(default=0)

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ContractError("betas must lie in (0, 1)")
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("lr and weight_decay must be non-negative")
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        """Apply one update using each parameter's .grad (missing grad = 0)."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is not None and g.shape != p.data.shape:
                raise ContractError(f"gradient shape mismatch for '{name}'")
            if self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            if g is None:
                g = 0.0
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adamw_step(params: dict, state: AdamW, lr: float | None = None) -> None:
    """Apply one AdamW update; ``params`` must be the dict ``state`` was built on."""
    if params is not state.params:
        raise ContractError("optimizer state was built for a different parameter set")
    state.step(lr=lr)
