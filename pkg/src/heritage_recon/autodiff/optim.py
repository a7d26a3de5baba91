"""Adaptive-moment (Adam) optimiser over tensors updated in place."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor


class PoisonedGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; the update was not applied."""


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 5e-4, **kw) -> "OptimState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            lr=lr,
            **kw,
        )


def optimizer_step(
    params: list[Tensor], grads: list[np.ndarray], state: OptimState, lr: float | None = None
) -> tuple[list[Tensor], OptimState]:
    """Apply one Adam update; ``lr`` overrides ``state.lr`` for scheduling."""
    if len(grads) != len(params):
        raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise PoisonedGradientError("non-finite gradient")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def cosine_lr(base_lr: float, step: int, total: int, floor: float = 0.05) -> float:
    progress = min(max(step / max(total, 1), 0.0), 1.0)
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))
