"""AdamW with a linear-warmup learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import DimensionError


def lr_schedule(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps``, constant after."""
    if base_lr < 0:
        raise ValueError(f"base_lr must be non-negative, got {base_lr}")
    if step < 0 or warmup_steps < 0:
        raise ValueError("step and warmup_steps must be non-negative")
    if step < warmup_steps:
        return step / warmup_steps * base_lr
    return base_lr


@dataclass
class AdamWState:
    base_lr: float
    warmup_steps: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        # update number t (1-based) uses lr_schedule(t)
        return lr_schedule(self.step + 1, self.base_lr, self.warmup_steps)


def adamw_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                 state: AdamWState) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam step.

    Returns fresh parameter arrays; the inputs are not modified. The state's
    moment dicts and step counter are advanced in place and returned.
    """
    lr = state.current_lr()
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f"moment for {name} has shape {m.shape}, parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        denom = np.sqrt(v / c2)
        denom += state.eps
        step = (lr / c1) * m
        step /= denom
        decayed = p * (1.0 - lr * state.weight_decay) if state.weight_decay else p
        new[name] = decayed - step
    state.step = t
    return new, state
