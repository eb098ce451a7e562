"""
Optimizer
Adam 옵티마이저, 스텝 감쇠 학습률, 전역 노름 클리핑
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from pydantic import BaseModel, Field

from mrmp.core.tensor import Tensor
from mrmp.errors import NonFiniteError, ShapeError


class LrSchedule(BaseModel):
    """Piecewise-constant step decay: lr(e) = initial_lr * decay_factor ** (e // step_size_epochs)"""

    initial_lr: float = Field(default=0.0002, gt=0)
    step_size_epochs: int = Field(default=10, ge=1)
    decay_factor: float = Field(default=0.9, gt=0, le=1)


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.initial_lr * schedule.decay_factor ** (epoch // schedule.step_size_epochs)


@dataclass
class AdamState:
    """Per-parameter moment buffers and the shared step counter"""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Mapping[str, Tensor], **kwargs) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            **kwargs,
        )


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients together when their global L2 norm exceeds max_norm"""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(total):
        raise NonFiniteError("non-finite gradient norm")
    if max_norm is None or max_norm <= 0 or total <= max_norm:
        return dict(grads), total
    factor = max_norm / (total + 1e-6)
    return {name: (g * factor).astype(g.dtype, copy=False) for name, g in grads.items()}, total


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[Mapping[str, Tensor], AdamState]:
    """Bias-corrected Adam update, applied in place to each parameter buffer"""
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ShapeError(f"missing gradient for '{name}'")
        if grad.shape != param.shape or state.m[name].shape != param.shape:
            raise ShapeError(f"'{name}': gradient {grad.shape} vs parameter {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient for '{name}'")

    state.t += 1
    t = state.t
    correction1 = 1 - state.beta1 ** t
    correction2 = 1 - state.beta2 ** t
    for name, param in params.items():
        grad = grads[name].astype(param.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return params, state
