"""
Checkpoint Service
모델 파라미터 저장/로드 (manifest.json + little-endian float32 blob)
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from pydantic import ValidationError

from mrmp.core.tensor import Tensor
from mrmp.errors import CheckpointError
from mrmp.models.schemas import CheckpointManifest, ModelConfig, TensorEntry
from mrmp.nn.model import ModelParams, param_shapes
from mrmp.services.graph_service import RelationGraph

logger = logging.getLogger(__name__)

FORMAT_VERSION = "mrmp-ckpt/1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
BLOB_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    manifest: CheckpointManifest
    params: ModelParams
    config: ModelConfig
    graph: Optional[RelationGraph]


def save_checkpoint(
    params: Mapping[str, Tensor],
    path: Path,
    config: ModelConfig,
    graph: Optional[RelationGraph] = None,
    epoch: int = 0,
    metrics: Optional[Mapping[str, float]] = None,
    thresholds: Optional[Mapping[str, float]] = None,
) -> Path:
    """Write `path/manifest.json` and `path/params.bin`; tensors in mapping order"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    entries: list[TensorEntry] = []
    chunks: list[bytes] = []
    offset = 0
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.data, dtype=BLOB_DTYPE).tobytes()
        entries.append(TensorEntry(name=name, shape=list(tensor.shape), offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)

    manifest = CheckpointManifest(
        format_version=FORMAT_VERSION,
        architecture=config.architecture,
        config=config.model_dump(mode="json", include=set(ModelConfig.model_fields)),
        epoch=epoch,
        metrics=dict(metrics or {}),
        thresholds=dict(thresholds or {}),
        tensors=entries,
        blob_sha256=hashlib.sha256(blob).hexdigest(),
        graph=graph.to_spec() if graph is not None else None,
    )
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("checkpoint written to %s (%d tensors, %d bytes, epoch %d)", path, len(entries), len(blob), epoch)
    return path


def read_manifest(path: Path) -> CheckpointManifest:
    manifest_path = Path(path) / MANIFEST_NAME
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise CheckpointError(f"no manifest at {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest is not valid JSON: {e}") from e
    if raw.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {raw.get('format_version')!r}, expected {FORMAT_VERSION}")
    try:
        return CheckpointManifest.model_validate(raw)
    except ValidationError as e:
        raise CheckpointError(f"malformed manifest: {e.errors()[0]['msg']}") from e


def _validate_layout(manifest: CheckpointManifest, blob_size: int) -> None:
    expected_offset = 0
    for entry in manifest.tensors:
        if any(dim < 0 for dim in entry.shape):
            raise CheckpointError(f"tensor '{entry.name}' has a negative dimension")
        expected_nbytes = int(np.prod(entry.shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
        if entry.nbytes != expected_nbytes:
            raise CheckpointError(f"tensor '{entry.name}' shape {entry.shape} needs {expected_nbytes} bytes, manifest says {entry.nbytes}")
        if entry.offset != expected_offset:
            raise CheckpointError(f"tensor '{entry.name}' at offset {entry.offset}, expected {expected_offset}")
        expected_offset += entry.nbytes
    if expected_offset != blob_size:
        raise CheckpointError(f"manifest accounts for {expected_offset} bytes, blob has {blob_size}")


def _check_against_config(manifest: CheckpointManifest, config: ModelConfig) -> None:
    """Tensor names and shapes must be exactly what the stored config builds"""
    expected = param_shapes(config)
    stored = {entry.name: tuple(entry.shape) for entry in manifest.tensors}
    missing = [name for name in expected if name not in stored]
    extra = [name for name in stored if name not in expected]
    if missing or extra:
        raise CheckpointError(f"tensor names disagree with the config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if stored[name] != shape:
            raise CheckpointError(f"tensor '{name}' has shape {list(stored[name])}, config needs {list(shape)}")


def load_checkpoint(path: Path) -> Checkpoint:
    """Validate version, layout and checksum before materializing any tensor"""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / BLOB_NAME).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"no parameter blob at {path / BLOB_NAME}") from e

    _validate_layout(manifest, len(blob))
    if hashlib.sha256(blob).hexdigest() != manifest.blob_sha256:
        raise CheckpointError("parameter blob checksum mismatch")
    try:
        config = ModelConfig.model_validate(manifest.config)
    except ValidationError as e:
        raise CheckpointError(f"checkpoint config is invalid: {e.errors()[0]['msg']}") from e
    _check_against_config(manifest, config)

    params = ModelParams()
    for entry in manifest.tensors:
        array = np.frombuffer(blob, dtype=BLOB_DTYPE, count=entry.nbytes // BLOB_DTYPE.itemsize, offset=entry.offset)
        params[entry.name] = Tensor(array.reshape(entry.shape).astype(np.float32), name=entry.name)

    graph = RelationGraph.from_spec(manifest.graph) if manifest.graph is not None else None
    logger.info("checkpoint loaded from %s (epoch %d)", path, manifest.epoch)
    return Checkpoint(manifest=manifest, params=params, config=config, graph=graph)
