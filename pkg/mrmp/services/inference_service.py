"""
Inference Service
서빙용 체크포인트 로딩과 요청 단위 예측
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mrmp.config.settings import settings
from mrmp.errors import CheckpointError, ShapeError
from mrmp.models.schemas import GraphStats, PredictInstance, PredictResult
from mrmp.nn import model as nn_model
from mrmp.services import metrics_service
from mrmp.services.checkpoint_service import Checkpoint, load_checkpoint
from mrmp.services.data_service import empty_instance_token, encode_tokens, load_vocab, pad_batch
from mrmp.services.graph_service import graph_stats

logger = logging.getLogger(__name__)


class InferenceService:
    """Holds one loaded model for the API"""

    def __init__(self):
        self._checkpoint: Optional[Checkpoint] = None
        self._model = None
        self._vocab: Optional[dict[str, int]] = None

    @property
    def loaded(self) -> bool:
        return self._model is not None

    def load(self, checkpoint_path: Optional[Path] = None, vocab_path: Optional[Path] = None) -> None:
        """Load once; later calls with no path keep the current model"""
        checkpoint_path = checkpoint_path or settings.CHECKPOINT_PATH
        if checkpoint_path is None:
            raise CheckpointError("no checkpoint configured (set MRMP_CHECKPOINT_PATH)")
        self._checkpoint = load_checkpoint(checkpoint_path)
        self._model = nn_model.build_model(self._checkpoint.config, self._checkpoint.params, self._checkpoint.graph)
        vocab_path = vocab_path or settings.VOCAB_PATH
        self._vocab = load_vocab(vocab_path) if vocab_path else None
        logger.info("serving %s model from %s", self._checkpoint.config.architecture, checkpoint_path)

    def _require(self) -> Checkpoint:
        if self._checkpoint is None:
            raise CheckpointError("no model loaded")
        return self._checkpoint

    def _token_ids(self, instance: PredictInstance) -> np.ndarray:
        config = self._require().config
        if instance.text is not None:
            if self._vocab is None:
                raise ShapeError("text input needs a vocabulary (set MRMP_VOCAB_PATH)")
            return encode_tokens(instance.text.split(), self._vocab, config.max_seq_len)
        empty = empty_instance_token(config.input_type, config.vocab_size)
        ids = np.asarray(instance.tokens or [empty], dtype=np.int64)[: config.max_seq_len]
        if ids.min() < 0 or ids.max() >= config.vocab_size:
            raise ShapeError(f"token ids must lie in [0, {config.vocab_size})")
        return ids

    def predict(self, instances: Sequence[PredictInstance], threshold: float = 0.5) -> list[PredictResult]:
        self._require()
        if len(instances) > settings.MAX_BATCH:
            raise ShapeError(f"at most {settings.MAX_BATCH} instances per request")
        tokens, mask = pad_batch([self._token_ids(inst) for inst in instances])
        scores = self._model.forward(tokens, mask, training=False).probs.data
        predicted = metrics_service.binarize(scores, threshold)
        return [
            PredictResult(labels=np.flatnonzero(p).tolist(), probabilities=[float(s) for s in row])
            for row, p in zip(scores, predicted)
        ]

    def graph_stats(self) -> GraphStats:
        checkpoint = self._require()
        if checkpoint.graph is None:
            raise CheckpointError("the served model has no relation graph")
        return graph_stats(checkpoint.graph)

    def model_info(self) -> dict:
        checkpoint = self._require()
        return {
            "architecture": checkpoint.config.architecture,
            "labels": checkpoint.config.n_labels,
            "vocab_size": checkpoint.config.vocab_size,
            "epoch": checkpoint.manifest.epoch,
            "parameters": checkpoint.params.num_parameters(),
            "metrics": checkpoint.manifest.metrics,
            "thresholds": checkpoint.manifest.thresholds,
        }


inference_service = InferenceService()
