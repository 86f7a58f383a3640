from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ContractError, DiffArray


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[DiffArray], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
        return state


def adam_step(params: Sequence[DiffArray], state: AdamState) -> None:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    if len(state.m) != len(params):
        raise ContractError(f"AdamState holds {len(state.m)} moment buffers for {len(params)} params")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
