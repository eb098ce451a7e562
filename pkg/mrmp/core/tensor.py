"""
Tensor / GradTape
역전파(reverse-mode) 자동 미분 엔진

Every differentiable op is registered by name. `forward(op_kind, inputs, attrs)`
evaluates it on plain numpy buffers and, when a tape is active and watches one
of the inputs, records the op together with a closure over its saved
activations. `GradTape.backward` replays the record in reverse.
"""

from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from mrmp.errors import MrmpError, NonFiniteError, ShapeError, TapeError, UnknownOpError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]
OpFn = Callable[..., tuple[np.ndarray, BackwardFn]]

_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)
_REGISTRY: dict[str, OpFn] = {}


class Tensor:
    """Dense row-major float array, optionally watched by a GradTape"""

    __slots__ = ("data", "node_id", "name")

    def __init__(self, data: Any, dtype: Any = None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in SUPPORTED_DTYPES else DEFAULT_DTYPE
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            raise ShapeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(frozen=True)
class TapeEntry:
    """One recorded op. `backward` closes over the saved activations."""

    op_kind: str
    inputs: tuple[int | None, ...]
    output: int
    backward: BackwardFn


class GradTape:
    """
    Ordered record of ops for one backward pass.

    Usage:
        with GradTape() as tape:
            tape.watch_all(params)
            loss = model_loss(...)
        grads = tape.backward(loss, params)
    """

    def __init__(self):
        self._entries: list[TapeEntry] = []
        self._nodes: dict[int, Tensor] = {}
        self._next_id = 0
        self._consumed = False
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    @property
    def consumed(self) -> bool:
        return self._consumed

    def tracks(self, tensor: Tensor) -> bool:
        return tensor.node_id is not None and self._nodes.get(tensor.node_id) is tensor

    def _new_node(self, tensor: Tensor) -> int:
        node_id = self._next_id
        self._next_id += 1
        tensor.node_id = node_id
        self._nodes[node_id] = tensor
        return node_id

    def watch(self, tensor: Tensor) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed")
        if not self.tracks(tensor):
            self._new_node(tensor)
        return tensor

    def watch_all(self, tensors: Mapping[str, Tensor]) -> None:
        for tensor in tensors.values():
            self.watch(tensor)

    def record(self, op_kind: str, inputs: tuple[int | None, ...], output: Tensor, backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("tape already consumed")
        output_id = self._new_node(output)
        self._entries.append(TapeEntry(op_kind, inputs, output_id, backward))

    def backward(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. `params`; unreachable params get zeros"""
        if self._consumed:
            raise TapeError("tape already consumed")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {}
        if self.tracks(loss):
            grads[loss.node_id] = np.ones_like(loss.data)
        for entry in reversed(self._entries):
            upstream = grads.pop(entry.output, None)
            if upstream is None:
                continue
            for node_id, grad in zip(entry.inputs, entry.backward(upstream)):
                if node_id is None or grad is None:
                    continue
                # fan-out: accumulate, never in place (backward fns may share buffers)
                grads[node_id] = grads[node_id] + grad if node_id in grads else grad
        self._consumed = True

        result: dict[str, np.ndarray] = {}
        for name, param in params.items():
            grad = grads.get(param.node_id) if self.tracks(param) else None
            if grad is None:
                result[name] = np.zeros_like(param.data)
            else:
                result[name] = np.asarray(grad, dtype=param.dtype).reshape(param.shape)
        return result


def register(op_kind: str) -> Callable[[OpFn], OpFn]:
    def decorator(fn: OpFn) -> OpFn:
        _REGISTRY[op_kind] = fn
        return fn

    return decorator


def as_tensor(value: Any, dtype: Any = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype or DEFAULT_DTYPE)


def forward(op_kind: str, inputs: Sequence[Any], attrs: Mapping[str, Any] | None = None) -> Tensor:
    """Evaluate a registered op and record it on the active tape if needed"""
    fn = _REGISTRY.get(op_kind)
    if fn is None:
        raise UnknownOpError(f"unknown op_kind '{op_kind}'")

    reference = next((x for x in inputs if isinstance(x, Tensor)), None)
    dtype = reference.dtype if reference is not None else DEFAULT_DTYPE
    tensors = [as_tensor(x, dtype) for x in inputs]
    if any(t.dtype != dtype for t in tensors):
        raise ShapeError(f"{op_kind}: mixed dtypes {[str(t.dtype) for t in tensors]}")

    try:
        out_data, backward_fn = fn(*[t.data for t in tensors], **(attrs or {}))
    except MrmpError:
        raise
    except ValueError as e:
        raise ShapeError(f"{op_kind}: {e}") from e

    out_data = np.asarray(out_data, dtype=dtype)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op_kind} produced a non-finite value")
    out = Tensor(out_data)

    tape = _active_tape.get()
    if tape is not None:
        ids = tuple(t.node_id if tape.tracks(t) else None for t in tensors)
        if any(i is not None for i in ids):
            tape.record(op_kind, ids, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that were broadcast to reach its shape"""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise ShapeError("mask must be {0,1}-valued")
        mask = mask.astype(bool)
    return mask


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------

@register("add")
def _add(a, b):
    out = a + b
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@register("sub")
def _sub(a, b):
    out = a - b
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@register("mul")
def _mul(a, b):
    out = a * b
    return out, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@register("div")
def _div(a, b):
    if np.any(b == 0):
        raise NonFiniteError("div by zero")
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape))


@register("scale")
def _scale(a, factor: float):
    return a * factor, lambda g: (g * factor,)


@register("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not contract")
    out = np.matmul(a, b)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, backward


@register("transpose")
def _transpose(a, axes: Sequence[int]):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return np.transpose(a, axes), lambda g: (np.transpose(g, inverse),)


@register("reshape")
def _reshape(a, shape: Sequence[int]):
    return a.reshape(tuple(shape)), lambda g: (g.reshape(a.shape),)


@register("broadcast_to")
def _broadcast_to(a, shape: Sequence[int]):
    out = np.broadcast_to(a, tuple(shape)).copy()
    return out, lambda g: (_unbroadcast(g, a.shape),)


@register("relu")
def _relu(a):
    active = a > 0
    return np.where(active, a, 0), lambda g: (g * active,)


@register("sigmoid")
def _sigmoid(a):
    s = expit(a)
    return s, lambda g: (g * s * (1 - s),)


@register("log")
def _log(a):
    if np.any(a <= 0):
        raise NonFiniteError("log of a non-positive value")
    return np.log(a), lambda g: (g / a,)


@register("clip")
def _clip(a, lo: float, hi: float):
    inside = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), lambda g: (g * inside,)


@register("softmax")
def _softmax(a, axis: int = -1):
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return s, lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


@register("masked_fill")
def _masked_fill(a, mask, value: float):
    mask = _check_mask(mask)
    if np.broadcast_shapes(mask.shape, a.shape) != a.shape:
        raise ShapeError(f"mask {mask.shape} does not broadcast to {a.shape}")
    return np.where(mask, value, a), lambda g: (np.where(mask, 0, g),)


@register("embedding")
def _embedding(table, ids):
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        grad = np.zeros_like(table)
        np.add.at(grad, ids, g)
        return (grad,)

    return table[ids], backward


@register("sum")
def _sum(a, axis=None, keepdims: bool = False):
    out = a.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, backward


@register("mean")
def _mean(a, axis=None, keepdims: bool = False):
    out = a.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, backward


@register("concat")
def _concat(*arrays, axis: int = 0):
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


@register("layer_norm")
def _layer_norm(x, gamma, beta, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma + beta

    def backward(g):
        g_hat = g * gamma
        gx = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * x_hat, gamma.shape), _unbroadcast(g, beta.shape)

    return out, backward


@register("dropout")
def _dropout(a, keep_scale):
    return a * keep_scale, lambda g: (g * keep_scale,)


@register("l2_normalize")
def _l2_normalize(a, axis: int = -1):
    norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1)
    y = a / safe

    def backward(g):
        return (nonzero * (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe,)

    return y, backward


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    return forward("add", [a, b])


def sub(a, b) -> Tensor:
    return forward("sub", [a, b])


def mul(a, b) -> Tensor:
    return forward("mul", [a, b])


def div(a, b) -> Tensor:
    return forward("div", [a, b])


def scale(a, factor: float) -> Tensor:
    return forward("scale", [a], {"factor": float(factor)})


def matmul(a, b) -> Tensor:
    return forward("matmul", [a, b])


def transpose(a, axes: Sequence[int]) -> Tensor:
    return forward("transpose", [a], {"axes": tuple(axes)})


def reshape(a, shape: Sequence[int]) -> Tensor:
    return forward("reshape", [a], {"shape": tuple(shape)})


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    return forward("broadcast_to", [a], {"shape": tuple(shape)})


def relu(a) -> Tensor:
    return forward("relu", [a])


def sigmoid(a) -> Tensor:
    return forward("sigmoid", [a])


def log(a) -> Tensor:
    return forward("log", [a])


def clip(a, lo: float, hi: float) -> Tensor:
    return forward("clip", [a], {"lo": lo, "hi": hi})


def softmax(a, axis: int = -1) -> Tensor:
    return forward("softmax", [a], {"axis": axis})


def masked_fill(a, mask, value: float) -> Tensor:
    return forward("masked_fill", [a], {"mask": mask, "value": value})


def embedding(table, ids) -> Tensor:
    return forward("embedding", [table], {"ids": ids})


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return forward("sum", [a], {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return forward("mean", [a], {"axis": axis, "keepdims": keepdims})


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    return forward("concat", list(tensors), {"axis": axis})


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return forward("layer_norm", [x, gamma, beta], {"eps": eps})


def l2_normalize(a, axis: int = -1) -> Tensor:
    return forward("l2_normalize", [a], {"axis": axis})


def dropout(x: Tensor, p: float, training: bool, rng_seed) -> Tensor:
    """Inverted dropout: kept values scaled by 1/(1-p), identity at inference"""
    if not 0 <= p < 1:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(x.shape) >= p
    keep_scale = keep.astype(x.dtype) / x.dtype.type(1 - p)
    return forward("dropout", [x], {"keep_scale": keep_scale})
