"""Checkpoint save / load"""

import json

import numpy as np
import pytest

from mrmp.errors import CheckpointError
from mrmp.models.schemas import ModelConfig
from mrmp.nn.model import init_params, param_shapes
from mrmp.services.checkpoint_service import BLOB_NAME, MANIFEST_NAME, load_checkpoint, save_checkpoint
from mrmp.services.graph_service import graph_from_edges


@pytest.fixture
def saved(tmp_path):
    config = ModelConfig(d_model=8, n_heads=2, vocab_size=7, n_labels=3)
    params = init_params(config, seed=11)
    graph = graph_from_edges(3, plus=[(0, 1)], minus=[(1, 2)])
    path = save_checkpoint(params, tmp_path / "ckpt", config, graph, epoch=4,
                           metrics={"ebf1": 0.5}, thresholds={"ebf1": 0.35})
    return path, params, config, graph


def test_round_trip_is_bitwise(saved):
    path, params, config, graph = saved
    checkpoint = load_checkpoint(path)
    assert list(checkpoint.params) == list(params)
    for name, tensor in params.items():
        assert checkpoint.params[name].data.tobytes() == tensor.data.tobytes()
        assert checkpoint.params[name].shape == tensor.shape
    assert checkpoint.config == config
    np.testing.assert_array_equal(checkpoint.graph.A_minus, graph.A_minus)
    assert checkpoint.manifest.epoch == 4
    assert checkpoint.manifest.thresholds == {"ebf1": 0.35}


def test_loaded_params_are_writable(saved):
    checkpoint = load_checkpoint(saved[0])
    tensor = next(iter(checkpoint.params.values()))
    tensor.data[...] = 0.0


def test_truncated_blob(saved):
    path = saved[0]
    blob = (path / BLOB_NAME).read_bytes()
    (path / BLOB_NAME).write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(path)


def test_wrong_shape_in_manifest(saved):
    path = saved[0]
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    manifest["tensors"][0]["shape"] = [1, 1]
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_transposed_shape_with_same_size(saved):
    path = saved[0]
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    entry = next(t for t in manifest["tensors"] if t["name"] == "embed.tokens")
    assert entry["shape"] == [7, 8]
    entry["shape"] = [8, 7]
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="embed.tokens"):
        load_checkpoint(path)


def test_renamed_tensor(saved):
    path = saved[0]
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    manifest["tensors"][-1]["name"] = "dec.9.extra"
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="unexpected"):
        load_checkpoint(path)


def test_param_shapes_match_init(saved):
    _, params, config, _ = saved
    assert param_shapes(config) == {name: t.shape for name, t in params.items()}
    br = ModelConfig(architecture="br", d_model=8, n_heads=2, vocab_size=7, n_labels=3)
    assert param_shapes(br) == {name: t.shape for name, t in init_params(br, seed=0).items()}


def test_corrupted_blob(saved):
    path = saved[0]
    blob = bytearray((path / BLOB_NAME).read_bytes())
    blob[0] ^= 0xFF
    (path / BLOB_NAME).write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_version_mismatch(saved):
    path = saved[0]
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    manifest["format_version"] = "mrmp-ckpt/0"
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
