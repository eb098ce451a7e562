"""
Gradient check
자동 미분 결과를 중심 차분(central finite differences)과 비교
"""

from __future__ import annotations

import logging
from typing import Callable, Mapping

import numpy as np

from mrmp.core.tensor import GradTape, Tensor
from mrmp.errors import NonFiniteError

logger = logging.getLogger(__name__)


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float, indices=None) -> np.ndarray:
    """Central differences of scalar fn() w.r.t. param.data, optionally on a subset of flat indices"""
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for idx in range(flat.size) if indices is None else indices:
        original = flat[idx]
        flat[idx] = original + h
        plus = fn().item()
        flat[idx] = original - h
        minus = fn().item()
        flat[idx] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NonFiniteError(f"non-finite value while differencing '{param.name}'")
        grad[idx] = (plus - minus) / (2 * h)
    return grad.reshape(param.shape)


def gradient_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """
    Max over parameters of ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, 1e-12).

    `fn` must rebuild the (deterministic, dropout-free) graph from `params` on
    every call. Params should be float64 for the comparison to be meaningful.
    With `max_entries`, each parameter is differenced on a seeded sample of
    that many coordinates and the autodiff gradient is compared on the same.
    """
    with GradTape() as tape:
        tape.watch_all(params)
        loss = fn()
    auto = tape.backward(loss, params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, param in params.items():
        indices = None
        if max_entries is not None and param.size > max_entries:
            indices = np.sort(rng.choice(param.size, size=max_entries, replace=False))
        fd = numerical_gradient(fn, param, h, indices)
        g_auto = auto[name].astype(np.float64).reshape(-1)
        g_fd = fd.reshape(-1)
        if indices is not None:
            g_auto, g_fd = g_auto[indices], g_fd[indices]
        diff = np.linalg.norm(g_auto - g_fd)
        denom = max(np.linalg.norm(g_auto), np.linalg.norm(g_fd), 1e-12)
        error = float(diff / denom)
        logger.debug("gradcheck %s: rel error %.3e", name, error)
        worst = max(worst, error)
    return worst
