"""
Pydantic Schemas for MrMP
설정, 리포트, 체크포인트 매니페스트, API 요청/응답 스키마
"""

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

MetricName = Literal["acc", "ebf1", "mif1", "maf1"]
METRIC_NAMES: tuple[str, ...] = ("acc", "ebf1", "mif1", "maf1")


class ModelConfig(BaseModel):
    """Network hyperparameters"""

    architecture: Literal["mrmp", "br"] = Field(default="mrmp", description="MrMP network or binary-relevance baseline")
    d_model: int = Field(default=512, gt=0)
    d_inner: Optional[int] = Field(default=None, gt=0, description="PFF inner width, defaults to 2*d_model")
    n_enc_layers: int = Field(default=2, gt=0)
    n_dec_layers: int = Field(default=2, gt=0)
    n_rel_layers: int = Field(default=2, gt=0, description="relation module depth T")
    n_heads: int = Field(default=4, gt=0)
    dropout: float = Field(default=0.1, ge=0, lt=1)
    max_seq_len: int = Field(default=500, gt=0)
    vocab_size: int = Field(default=0, ge=0, description="derived from data at train time")
    n_labels: int = Field(default=0, ge=0, description="derived from data at train time")
    input_type: Literal["binary", "sequential"] = "binary"
    positional_encoding: Optional[bool] = Field(default=None, description="None: on iff input_type is sequential")
    mrmp_enabled: bool = True
    layer_norm: bool = True
    relu_all_rel_layers: bool = True
    mean_aggregation: bool = False
    decoder_attends_final: bool = False

    @model_validator(mode="after")
    def _check_sizes(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.decoder_attends_final and self.n_dec_layers != self.n_enc_layers:
            raise ValueError("layer-aligned decoding needs n_dec_layers == n_enc_layers")
        return self

    @property
    def inner_dim(self) -> int:
        return self.d_inner or 2 * self.d_model

    @property
    def use_positional_encoding(self) -> bool:
        if self.positional_encoding is None:
            return self.input_type == "sequential"
        return self.positional_encoding


class RunConfig(ModelConfig):
    """Everything a `train` run needs: model, graph, objective, schedule and data paths"""

    alpha: float = Field(default=0.05, gt=0, lt=1)
    yates: bool = False
    lambda_rel: float = Field(default=1.0, ge=0)
    epochs: int = Field(default=50, ge=1)
    patience: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.0002, gt=0)
    lr_step: int = Field(default=10, ge=1)
    lr_decay: float = Field(default=0.9, gt=0, le=1)
    clip_norm: float = Field(default=5.0, ge=0, description="0 disables clipping")
    seed: int = 0
    selection_metric: MetricName = "ebf1"
    threshold_grid: Optional[list[float]] = None
    train: Optional[Path] = None
    valid: Optional[Path] = None
    test: Optional[Path] = None
    vocab: Optional[Path] = None
    graph: Optional[Path] = None
    out: Path = Path("runs/latest")

    @field_validator("threshold_grid")
    @classmethod
    def _check_grid(cls, grid):
        if grid is not None and (not grid or any(not 0 < t < 1 for t in grid)):
            raise ValueError("threshold grid values must lie in (0, 1)")
        return grid

    def model_config_only(self) -> ModelConfig:
        return ModelConfig(**self.model_dump(include=set(ModelConfig.model_fields)))


class LossReport(BaseModel):
    """Training objective components for one step or epoch"""

    l_bce: float = Field(..., ge=0)
    l_rel: float = Field(..., ge=-2, le=2)
    lambda_rel: float = Field(..., ge=0)
    total: float


class MetricsReport(BaseModel):
    """Multi-label evaluation summary"""

    acc: float = Field(..., ge=0, le=1)
    ebf1: float = Field(..., ge=0, le=1)
    mif1: float = Field(..., ge=0, le=1)
    maf1: float = Field(..., ge=0, le=1)
    auc: list[Optional[float]] = Field(default_factory=list, description="None where a label has one class only")
    thresholds: dict[str, float] = Field(default_factory=dict)


class TensorEntry(BaseModel):
    name: str
    shape: list[int]
    offset: int = Field(..., ge=0)
    nbytes: int = Field(..., ge=0)


class GraphSpec(BaseModel):
    labels: int
    alpha: float
    plus: list[tuple[int, int]] = Field(default_factory=list)
    minus: list[tuple[int, int]] = Field(default_factory=list)


class CheckpointManifest(BaseModel):
    """manifest.json next to the float32 blob"""

    format_version: str
    architecture: str
    config: dict
    epoch: int = Field(..., ge=0)
    metrics: dict[str, float] = Field(default_factory=dict)
    thresholds: dict[str, float] = Field(default_factory=dict)
    tensors: list[TensorEntry]
    blob_sha256: str
    graph: Optional[GraphSpec] = None


class DatasetStats(BaseModel):
    instances: int
    labels: int
    features: int
    cardinality: float


class GraphStats(BaseModel):
    labels: int
    alpha: float
    pulling_edges: int
    pushing_edges: int
    degree_histogram_plus: dict[int, int]
    degree_histogram_minus: dict[int, int]


class PredictInstance(BaseModel):
    """One input: token ids, or whitespace-separated tokens for sequential models"""

    tokens: Optional[list[int]] = None
    text: Optional[str] = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.tokens is None) == (self.text is None):
            raise ValueError("give exactly one of 'tokens' or 'text'")
        return self


class PredictRequest(BaseModel):
    instances: list[PredictInstance] = Field(..., min_length=1)
    threshold: float = Field(default=0.5, gt=0, lt=1)


class PredictResult(BaseModel):
    labels: list[int]
    probabilities: list[float]


class PredictResponse(BaseModel):
    results: list[PredictResult]
    threshold: float
