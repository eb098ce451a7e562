"""
Layers
Transformer 블록 구성 요소 (MHA, PFF, LayerNorm, 위치 인코딩)

Parameters live in one flat name -> Tensor mapping; every layer function takes
that mapping plus its name prefix. Row-vector convention: y = x W + b with W
stored (in, out).
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from mrmp.core import tensor as T
from mrmp.core.tensor import Tensor
from mrmp.errors import ShapeError

MASK_FILL = -1e9


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype=dtype)


def normal_embedding(rng: np.random.Generator, shape: tuple[int, ...], d_model: int, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), size=shape), dtype=dtype)


def init_linear(params: dict, prefix: str, fan_in: int, fan_out: int, rng, dtype) -> None:
    params[f"{prefix}.w"] = xavier_uniform(rng, fan_in, fan_out, dtype)
    params[f"{prefix}.b"] = Tensor(np.zeros(fan_out), dtype=dtype)


def init_attention(params: dict, prefix: str, d_model: int, rng, dtype) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{proj}", d_model, d_model, rng, dtype)


def init_ffn(params: dict, prefix: str, d_model: int, d_inner: int, rng, dtype) -> None:
    init_linear(params, f"{prefix}.1", d_model, d_inner, rng, dtype)
    init_linear(params, f"{prefix}.2", d_inner, d_model, rng, dtype)


def init_layer_norm(params: dict, prefix: str, d_model: int, dtype) -> None:
    params[f"{prefix}.gamma"] = Tensor(np.ones(d_model), dtype=dtype)
    params[f"{prefix}.beta"] = Tensor(np.zeros(d_model), dtype=dtype)


def linear(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def layer_norm(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def position_wise_ffn(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """PFF(x) = max(0, x W1 + b1) W2 + b2"""
    return linear(T.relu(linear(x, params, f"{prefix}.1")), params, f"{prefix}.2")


def sinusoidal_positional_encoding(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    position = np.arange(length)[:, None]
    div_term = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(position * div_term)
    pe[:, 1::2] = np.cos(position * div_term[: d_model // 2])
    return pe.astype(dtype)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, S, d = x.shape
    return T.transpose(T.reshape(x, (B, S, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, S, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, S, h * dk))


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    key_mask: np.ndarray,
    params: Mapping[str, Tensor],
    prefix: str,
    n_heads: int,
    return_weights: bool = False,
):
    """
    Concatenated heads of softmax(Q K^T / sqrt(d_k)) V, projected back to d.

    query: (B, q, d); key/value: (B, k, d); key_mask: (B, k), True on valid keys.
    Masked keys get attention weight exactly 0.
    """
    if query.ndim != 3 or key.ndim != 3 or value.ndim != 3:
        raise ShapeError("attention inputs must be (batch, length, d_model)")
    B, q_len, d = query.shape
    if d % n_heads != 0:
        raise ShapeError(f"d_model={d} not divisible by {n_heads} heads")
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.shape != key.shape[:2]:
        raise ShapeError(f"key mask {key_mask.shape} does not match keys {key.shape[:2]}")
    if not key_mask.any(axis=1).all():
        raise ShapeError("all keys masked for some query row")

    q = _split_heads(linear(query, params, f"{prefix}.q"), n_heads)
    k = _split_heads(linear(key, params, f"{prefix}.k"), n_heads)
    v = _split_heads(linear(value, params, f"{prefix}.v"), n_heads)

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // n_heads))
    scores = T.masked_fill(scores, ~key_mask[:, None, None, :], MASK_FILL)
    weights = T.softmax(scores, axis=-1)
    out = linear(_merge_heads(T.matmul(weights, v)), params, f"{prefix}.o")
    if return_weights:
        return out, weights.data
    return out
