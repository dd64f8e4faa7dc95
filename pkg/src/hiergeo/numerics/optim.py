"""Momentum SGD with L2 weight decay and a multi-step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter

DEFAULT_MILESTONES = (4, 8, 12, 13, 14, 15)


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = DEFAULT_MILESTONES
    gamma: float = 0.5
    initial_lr: float | None = None
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.initial_lr is None:
            self.initial_lr = self.learning_rate
        self.milestones = tuple(int(m) for m in self.milestones)

    def lr_at_epoch(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if m <= epoch)
        return self.initial_lr * self.gamma ** passed

    def set_epoch(self, epoch: int) -> None:
        self.learning_rate = self.lr_at_epoch(epoch)


def sgd_step(params, state: OptimizerState) -> None:
    """One in-place momentum-SGD update.

    ``params`` is an iterable of :class:`Parameter` or ``(name, Parameter)``
    pairs; buffers are keyed by name (or position when unnamed).
    """
    for i, item in enumerate(params):
        name, p = item if isinstance(item, tuple) else (p_name(item, i), item)
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        d = g + state.weight_decay * p.data
        buf = state.momentum_buffers.get(name)
        buf = d.copy() if buf is None else state.momentum * buf + d
        state.momentum_buffers[name] = buf
        p.data = p.data - state.learning_rate * buf


def p_name(p: Parameter, i: int) -> str:
    return p.name or f"param{i}"
