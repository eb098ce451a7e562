"""
MrMP Model
인코더, 다중 관계 레이블 임베딩 모듈, 레이블 특징 디코더, 투표 예측 헤드

Forward pass:
    z^l   = encoder layer l over token embeddings (+ positional encoding for sequences)
    V^T   = relation module over V^0 with pulling / pushing message passing
    U^l   = decoder layer l, label queries attending to z^l, starting from U^0 = V^T
    y_hat = sigmoid(sum_l <u_i^l, v_i^T>)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mrmp.core import tensor as T
from mrmp.core.tensor import Tensor
from mrmp.errors import LabelMismatchError, ShapeError
from mrmp.models.schemas import ModelConfig
from mrmp.nn import layers
from mrmp.services.data_service import multi_hot
from mrmp.services.graph_service import RelationGraph

logger = logging.getLogger(__name__)


class ModelParams(dict):
    """Ordered name -> Tensor mapping of every trainable weight"""

    def num_parameters(self) -> int:
        return sum(p.size for p in self.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({name: Tensor(p.data.astype(dtype), name=name) for name, p in self.items()})


class SeedStream:
    """Distinct, reproducible dropout seeds for each call site of one forward pass"""

    def __init__(self, base: Optional[Sequence[int] | int]):
        self.base = [] if base is None else ([base] if isinstance(base, (int, np.integer)) else list(base))
        self.counter = 0

    def next(self) -> list[int]:
        self.counter += 1
        return [*self.base, self.counter]


@dataclass
class RelationOutput:
    label_embeddings: Tensor
    z_plus: list[Tensor] = field(default_factory=list)
    z_minus: list[Tensor] = field(default_factory=list)


@dataclass
class ForwardOutput:
    probs: Tensor
    logits: Tensor
    label_embeddings: Optional[Tensor] = None


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every weight `init_params` creates, in the same order"""
    if config.architecture == "br":
        return {"br.w": (config.vocab_size, config.n_labels), "br.b": (config.n_labels,)}

    d, d_inner = config.d_model, config.inner_dim

    def block(prefix: str) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for proj in ("q", "k", "v", "o"):
            shapes[f"{prefix}.attn.{proj}.w"] = (d, d)
            shapes[f"{prefix}.attn.{proj}.b"] = (d,)
        shapes[f"{prefix}.ln1.gamma"] = shapes[f"{prefix}.ln1.beta"] = (d,)
        shapes.update({
            f"{prefix}.ffn.1.w": (d, d_inner), f"{prefix}.ffn.1.b": (d_inner,),
            f"{prefix}.ffn.2.w": (d_inner, d), f"{prefix}.ffn.2.b": (d,),
        })
        shapes[f"{prefix}.ln2.gamma"] = shapes[f"{prefix}.ln2.beta"] = (d,)
        return shapes

    shapes: dict[str, tuple[int, ...]] = {"embed.tokens": (config.vocab_size, d)}
    for l in range(config.n_enc_layers):
        shapes.update(block(f"enc.{l}"))
    shapes["rel.v0"] = (config.n_labels, d)
    shapes["rel.z_plus0"] = (d,)
    for l in range(config.n_rel_layers):
        shapes[f"rel.{l}.w_plus"] = shapes[f"rel.{l}.w_minus"] = (d, d)
    shapes["rel.w_rel"] = (d, d)
    for l in range(config.n_dec_layers):
        shapes.update(block(f"dec.{l}"))
    return shapes


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Xavier-uniform weights, N(0, 1/sqrt(d)) embeddings, deterministic per seed"""
    if config.vocab_size < 1 or config.n_labels < 1:
        raise ShapeError("config needs vocab_size and n_labels before initialization")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    if config.architecture == "br":
        params["br.w"] = layers.xavier_uniform(rng, config.vocab_size, config.n_labels, dtype)
        params["br.b"] = Tensor(np.zeros(config.n_labels), dtype=dtype)
    else:
        d, d_inner = config.d_model, config.inner_dim
        params["embed.tokens"] = layers.normal_embedding(rng, (config.vocab_size, d), d, dtype)
        for l in range(config.n_enc_layers):
            layers.init_attention(params, f"enc.{l}.attn", d, rng, dtype)
            layers.init_layer_norm(params, f"enc.{l}.ln1", d, dtype)
            layers.init_ffn(params, f"enc.{l}.ffn", d, d_inner, rng, dtype)
            layers.init_layer_norm(params, f"enc.{l}.ln2", d, dtype)
        params["rel.v0"] = layers.normal_embedding(rng, (config.n_labels, d), d, dtype)
        params["rel.z_plus0"] = layers.normal_embedding(rng, (d,), d, dtype)
        for l in range(config.n_rel_layers):
            params[f"rel.{l}.w_plus"] = layers.xavier_uniform(rng, d, d, dtype)
            params[f"rel.{l}.w_minus"] = layers.xavier_uniform(rng, d, d, dtype)
        params["rel.w_rel"] = layers.xavier_uniform(rng, d, d, dtype)
        for l in range(config.n_dec_layers):
            layers.init_attention(params, f"dec.{l}.attn", d, rng, dtype)
            layers.init_layer_norm(params, f"dec.{l}.ln1", d, dtype)
            layers.init_ffn(params, f"dec.{l}.ffn", d, d_inner, rng, dtype)
            layers.init_layer_norm(params, f"dec.{l}.ln2", d, dtype)

    for name, tensor in params.items():
        tensor.name = name
    return ModelParams(params)


def _residual(x: Tensor, update: Tensor, params, prefix: str, config: ModelConfig) -> Tensor:
    out = T.add(x, update)
    return layers.layer_norm(out, params, prefix) if config.layer_norm else out


def encode(
    token_ids: np.ndarray,
    mask: np.ndarray,
    params,
    config: ModelConfig,
    training: bool = False,
    seeds: Optional[SeedStream] = None,
) -> list[Tensor]:
    """Encoder self-attention + PFF stack; returns z^l for every layer"""
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise ShapeError(f"token ids must be (batch, length), got {token_ids.shape}")
    if token_ids.shape[1] > config.max_seq_len:
        raise ShapeError(f"sequence length {token_ids.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    seeds = seeds or SeedStream(None)
    embed = params["embed.tokens"]

    x = T.embedding(embed, token_ids)
    if config.use_positional_encoding:
        x = T.add(x, layers.sinusoidal_positional_encoding(token_ids.shape[1], config.d_model, embed.dtype))
    x = T.dropout(x, config.dropout, training, seeds.next())

    outputs = []
    for l in range(config.n_enc_layers):
        attn = layers.multi_head_attention(x, x, x, mask, params, f"enc.{l}.attn", config.n_heads)
        x = _residual(x, T.dropout(attn, config.dropout, training, seeds.next()), params, f"enc.{l}.ln1", config)
        ffn = layers.position_wise_ffn(x, params, f"enc.{l}.ffn")
        x = _residual(x, T.dropout(ffn, config.dropout, training, seeds.next()), params, f"enc.{l}.ln2", config)
        outputs.append(x)
    return outputs


def aggregation_matrices(graph: RelationGraph, mean_aggregation: bool = False, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Neighbourhood sums as matrices: pulling side carries the self loop, pushing side does not"""
    plus = graph.A_plus.astype(np.float64) + np.eye(graph.n_labels)
    minus = graph.A_minus.astype(np.float64)
    if mean_aggregation:
        plus = plus / plus.sum(axis=1, keepdims=True)
        counts = minus.sum(axis=1, keepdims=True)
        minus = np.divide(minus, counts, out=np.zeros_like(minus), where=counts > 0)
    return plus.astype(dtype), minus.astype(dtype)


def relation_forward(V0: Tensor, graph: RelationGraph, params, config: ModelConfig) -> RelationOutput:
    """
    v_i^{l+1} = f( sum_{j in N+(i)} phi(v_j, z+) W+ + sum_{j in N-(i)} phi(v_j, z-) W- ),
    phi = sum, z- = -z+, z+^{l+1} = z+^l W_rel. Output is ReLU of the last layer.
    """
    if V0.shape[0] != graph.n_labels:
        raise LabelMismatchError(f"{V0.shape[0]} label embeddings for a graph over {graph.n_labels} labels")
    if not config.mrmp_enabled or graph.n_edges == 0:
        return RelationOutput(T.relu(V0))

    plus_agg, minus_agg = aggregation_matrices(graph, config.mean_aggregation, V0.dtype)
    d = V0.shape[1]
    V = V0
    z_plus = params["rel.z_plus0"]
    out = RelationOutput(V0)
    for l in range(config.n_rel_layers):
        z_minus = T.scale(z_plus, -1.0)
        pulled = T.matmul(T.matmul(plus_agg, T.add(V, z_plus)), params[f"rel.{l}.w_plus"])
        pushed = T.matmul(T.matmul(minus_agg, T.add(V, z_minus)), params[f"rel.{l}.w_minus"])
        hidden = T.add(pulled, pushed)
        last = l == config.n_rel_layers - 1
        V = T.relu(hidden) if (config.relu_all_rel_layers or last) else hidden
        out.z_plus.append(z_plus)
        out.z_minus.append(z_minus)
        z_plus = T.reshape(T.matmul(T.reshape(z_plus, (1, d)), params["rel.w_rel"]), (d,))
    out.label_embeddings = V
    return out


def decode_features(
    V_T: Tensor,
    encoder_outputs: Sequence[Tensor],
    mask: np.ndarray,
    params,
    config: ModelConfig,
    training: bool = False,
    seeds: Optional[SeedStream] = None,
) -> list[Tensor]:
    """
    m^l = u^l + MHA(u^l, z^l);  u^{l+1} = m^l + PFF(m^l);  u^0 = v^T.
    Returns U^1..U^n, one per decoder layer.
    """
    mask = np.asarray(mask, dtype=bool)
    batch = mask.shape[0]
    if any(z.shape[:2] != mask.shape for z in encoder_outputs):
        raise ShapeError("padding mask does not match encoder outputs")
    seeds = seeds or SeedStream(None)
    L, d = V_T.shape

    U = T.broadcast_to(T.reshape(V_T, (1, L, d)), (batch, L, d))
    outputs = []
    for l in range(config.n_dec_layers):
        z = encoder_outputs[-1] if config.decoder_attends_final else encoder_outputs[l]
        attn = layers.multi_head_attention(U, z, z, mask, params, f"dec.{l}.attn", config.n_heads)
        m = _residual(U, T.dropout(attn, config.dropout, training, seeds.next()), params, f"dec.{l}.ln1", config)
        ffn = layers.position_wise_ffn(m, params, f"dec.{l}.ffn")
        U = _residual(m, T.dropout(ffn, config.dropout, training, seeds.next()), params, f"dec.{l}.ln2", config)
        outputs.append(U)
    return outputs


def predict(U_layers: Sequence[Tensor], V_T: Tensor) -> tuple[Tensor, Tensor]:
    """f^l_i = <u_i^l, v_i^T>; y_hat = sigmoid(sum_l f^l). Returns (y_hat, summed scores)."""
    if not U_layers:
        raise ShapeError("predict needs at least one decoder layer")
    votes = None
    for U in U_layers:
        if U.shape[-2:] != V_T.shape:
            raise ShapeError(f"decoder output {U.shape} does not match label embeddings {V_T.shape}")
        f_l = T.sum(T.mul(U, V_T), axis=-1)
        votes = f_l if votes is None else T.add(votes, f_l)
    return T.sigmoid(votes), votes


class MrMPModel:
    """Encoder / relation module / decoder bound to one parameter set and graph"""

    def __init__(self, config: ModelConfig, params: ModelParams, graph: RelationGraph):
        if graph.n_labels != config.n_labels:
            raise LabelMismatchError(f"graph over {graph.n_labels} labels, model has {config.n_labels}")
        self.config = config
        self.params = params
        self.graph = graph

    def forward(self, tokens: np.ndarray, mask: np.ndarray, training: bool = False, rng_seed=None) -> ForwardOutput:
        seeds = SeedStream(rng_seed)
        z = encode(tokens, mask, self.params, self.config, training, seeds)
        V_T = relation_forward(self.params["rel.v0"], self.graph, self.params, self.config).label_embeddings
        U = decode_features(V_T, z, mask, self.params, self.config, training, seeds)
        probs, logits = predict(U, V_T)
        return ForwardOutput(probs=probs, logits=logits, label_embeddings=V_T)

    def label_embeddings(self) -> np.ndarray:
        return relation_forward(self.params["rel.v0"], self.graph, self.params, self.config).label_embeddings.data


class BinaryRelevanceModel:
    """L independent logistic regressions on the multi-hot token indicator"""

    def __init__(self, config: ModelConfig, params: ModelParams, graph: Optional[RelationGraph] = None):
        self.config = config
        self.params = params
        self.graph = graph

    def forward(self, tokens: np.ndarray, mask: np.ndarray, training: bool = False, rng_seed=None) -> ForwardOutput:
        weight = self.params["br.w"]
        x = multi_hot(tokens, mask, self.config.vocab_size, weight.dtype)
        logits = T.add(T.matmul(x, weight), self.params["br.b"])
        return ForwardOutput(probs=T.sigmoid(logits), logits=logits)

    def label_embeddings(self) -> None:
        return None


def build_model(config: ModelConfig, params: ModelParams, graph: Optional[RelationGraph] = None):
    if config.architecture == "br":
        return BinaryRelevanceModel(config, params, graph)
    return MrMPModel(config, params, graph if graph is not None else RelationGraph.empty(config.n_labels))
