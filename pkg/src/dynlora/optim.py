"""AdamW with decoupled weight decay and bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NaNLossError(FloatingPointError):
    def __init__(self, step: int, what: str = "gradient"):
        super().__init__(f"non-finite {what} at optimizer step {step}")
        self.step = step


@dataclass
class AdamWState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    # ids of parameters exempt from weight decay (importance weights)
    no_decay: set[int] = field(default_factory=set)


def adamw_step(params: list[Tensor], state: AdamWState, lr: float, weight_decay: float) -> None:
    """One AdamW update of every parameter holding a gradient; gradients are cleared afterwards."""
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NaNLossError(state.step + 1)
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p in params:
        g = p.grad
        if g is None:
            continue
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * g * g
        if weight_decay and key not in state.no_decay:
            p.data *= dt(1.0 - lr * weight_decay)
        p.data -= dt(lr / bc1) * m / (np.sqrt(v / dt(bc2)) + dt(state.eps))
        p.grad = None
