"""
Objective
BCE 손실, 관계 기반 레이블 임베딩 거리 손실, 그리고 두 손실의 가중 합
"""

from __future__ import annotations

import logging

import numpy as np

from mrmp.core import tensor as T
from mrmp.core.tensor import Tensor
from mrmp.errors import ShapeError
from mrmp.models.schemas import LossReport
from mrmp.services.graph_service import RelationGraph

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


def bce_loss(y, y_hat: Tensor, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy over every (instance, label) entry"""
    y_hat = T.as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.dtype)
    if y.shape != y_hat.shape:
        raise ShapeError(f"targets {y.shape} do not match predictions {y_hat.shape}")
    clamped = T.clip(y_hat, eps, 1.0 - eps)
    per_entry = T.add(T.mul(y, T.log(clamped)), T.mul(1.0 - y, T.log(T.sub(1.0, clamped))))
    return T.scale(T.mean(per_entry), -1.0)


def _relation_weights(graph: RelationGraph, dtype) -> tuple[np.ndarray, int]:
    """
    W[i, j] such that sum_ij W[i, j] cos(v_i, v_j) is the label-averaged loss.
    Neighbourhoods here exclude the label itself.
    """
    plus = graph.A_plus.astype(np.float64)
    minus = graph.A_minus.astype(np.float64)
    deg_plus = plus.sum(axis=1, keepdims=True)
    deg_minus = minus.sum(axis=1, keepdims=True)
    weights = np.divide(minus, deg_minus, out=np.zeros_like(minus), where=deg_minus > 0)
    weights -= np.divide(plus, deg_plus, out=np.zeros_like(plus), where=deg_plus > 0)
    connected = int(((deg_plus + deg_minus) > 0).sum())
    if connected:
        weights /= connected
    return weights.astype(dtype), connected


def relational_loss(V_hat: Tensor, graph: RelationGraph) -> Tensor:
    """
    Per label: mean cosine to pushing neighbours minus mean cosine to pulling
    neighbours, averaged over labels with at least one neighbour. Range [-2, 2].
    """
    V_hat = T.as_tensor(V_hat)
    if V_hat.ndim != 2 or V_hat.shape[0] != graph.n_labels:
        raise ShapeError(f"embeddings {V_hat.shape} do not match a graph over {graph.n_labels} labels")
    weights, connected = _relation_weights(graph, V_hat.dtype)
    if connected == 0:
        return T.scale(T.sum(V_hat), 0.0)

    norms = np.linalg.norm(V_hat.data, axis=1)
    zero_rows = np.flatnonzero((norms == 0) & (np.abs(weights).sum(axis=1) > 0))
    if zero_rows.size:
        logger.warning("zero-norm label embeddings %s: their cosine terms count as 0", zero_rows.tolist())

    normalized = T.l2_normalize(V_hat, axis=1)
    cosines = T.matmul(normalized, T.transpose(normalized, (1, 0)))
    return T.sum(T.mul(weights, cosines))


def total_loss(y, y_hat: Tensor, V_hat, graph: RelationGraph, lambda_rel: float) -> tuple[Tensor, LossReport]:
    if lambda_rel < 0:
        raise ValueError(f"lambda_rel must be >= 0, got {lambda_rel}")
    l_bce = bce_loss(y, y_hat)
    if V_hat is None or graph is None:
        l_rel = None
        total = l_bce
    else:
        l_rel = relational_loss(V_hat, graph)
        total = l_bce if lambda_rel == 0 else T.add(l_bce, T.scale(l_rel, lambda_rel))
    report = LossReport(
        l_bce=max(l_bce.item(), 0.0),
        l_rel=0.0 if l_rel is None else float(np.clip(l_rel.item(), -2.0, 2.0)),
        lambda_rel=lambda_rel,
        total=total.item(),
    )
    return total, report


def relation_cosines(V: np.ndarray, graph: RelationGraph) -> dict[str, float]:
    """Mean cosine similarity over pulling edges and over pushing edges (nan when absent)"""
    V = np.asarray(V, dtype=np.float64)
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    unit = np.divide(V, norms, out=np.zeros_like(V), where=norms > 0)
    cos = unit @ unit.T
    upper = np.triu(np.ones_like(cos, dtype=bool), k=1)
    result = {}
    for name, adjacency in (("pulling", graph.A_plus), ("pushing", graph.A_minus)):
        pairs = (adjacency > 0) & upper
        result[name] = float(cos[pairs].mean()) if pairs.any() else float("nan")
    return result
