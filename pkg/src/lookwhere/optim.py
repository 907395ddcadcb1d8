"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamWState) -> None:
    """One in-place AdamW update.

    Weight decay is applied as ``p <- p - lr * wd * p`` before the adaptive
    step. Parameters whose gradient is ``None`` are treated as having a zero
    gradient, so their moments still decay.
    """
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step_count += 1
    t = state.step_count
    lr = state.lr
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.data *= (1.0 - lr * state.weight_decay)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.data.dtype)


class AdamW:
    """Thin wrapper binding a parameter list to an :class:`AdamWState`."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.state.lr = lr
        adamw_step(self.params, [p.grad for p in self.params], self.state)


def warmup_cosine(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1,
                  floor: float = 0.01) -> float:
    """Linear warmup then cosine decay to ``floor * base_lr``."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    low = floor * base_lr
    return low + 0.5 * (base_lr - low) * (1.0 + math.cos(math.pi * progress))
