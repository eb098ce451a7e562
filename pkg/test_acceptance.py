"""Long end-to-end experiments (pytest --runslow)"""

import numpy as np
import pytest

from conftest import tiny_config
from mrmp.config.settings import settings
from mrmp.models.schemas import RunConfig
from mrmp.nn.objective import relation_cosines
from mrmp.services import metrics_service
from mrmp.services.data_service import combine, dataset_stats, load_dataset, make_synthetic_dataset, split_dataset
from mrmp.services.training_service import predict_scores, training_service

pytestmark = pytest.mark.slow


def reference_config(out, **overrides) -> RunConfig:
    """Full-size hyperparameters at d=64; the decay step is stretched for a 50-instance corpus"""
    values = dict(d_model=64, n_heads=4, lr=0.0002, dropout=0.1, lr_step=50, lr_decay=0.9, clip_norm=5.0,
                  batch_size=8, epochs=300, patience=300, out=out)
    values.update(overrides)
    return RunConfig(**values)


def subset_accuracy(model, dataset, threshold=0.5):
    scores = predict_scores(model, dataset)
    return metrics_service.evaluate(dataset.labels, metrics_service.binarize(scores, threshold))["acc"]


def test_overfit_function_corpus(tmp_path):
    train = make_synthetic_dataset("function", n_instances=50, seed=0)
    config = reference_config(tmp_path)
    result = training_service.train(config, train=train, valid=train)
    _, model = training_service.load_model(result.checkpoint_path)
    assert subset_accuracy(model, train) >= 0.95


def test_overfit_runs_are_byte_identical(tmp_path):
    train = make_synthetic_dataset("function", n_instances=50, seed=0)
    logs = []
    for name in ("a", "b"):
        config = reference_config(tmp_path / name)
        logs.append(training_service.train(config, train=train, valid=train).log_path.read_bytes())
    assert logs[0] == logs[1]


def test_relations_help_on_planted_corpus(tmp_path):
    full, ablated = [], []
    last = {}
    for seed in range(5):
        data = make_synthetic_dataset("planted", n_instances=700, seed=seed)
        train, test = split_dataset(data, (5 / 7, 2 / 7), seed=seed)
        for name, enabled, scores in (("with", True, full), ("without", False, ablated)):
            config = tiny_config(tmp_path / f"{name}-{seed}", d_model=32, epochs=30, patience=30,
                                 seed=seed, mrmp_enabled=enabled)
            result = training_service.train(config, train=train, valid=train)
            _, model = training_service.load_model(result.checkpoint_path)
            scores.append(subset_accuracy(model, test))
            last[name] = result.checkpoint_path
    assert np.mean(full) > np.mean(ablated)

    checkpoint, _ = training_service.load_model(last["with"])
    _, delta = training_service.ablation_report(last["with"], last["without"], test)
    deg_plus, deg_minus = checkpoint.graph.degrees()
    connected = (deg_plus + deg_minus) > 0
    isolated = ~connected & ~np.isnan(delta)
    assert connected.any()
    if isolated.any():
        assert np.nanmean(delta[connected]) >= np.nanmean(delta[isolated])


def test_relational_loss_separates_pulled_and_pushed(tmp_path):
    data = make_synthetic_dataset("planted", n_instances=500, seed=0)
    config = tiny_config(tmp_path, d_model=32, epochs=30, patience=30, lambda_rel=1.0)
    result = training_service.train(config, train=data, valid=data)
    checkpoint, model = training_service.load_model(result.checkpoint_path)
    cosines = relation_cosines(model.label_embeddings(), checkpoint.graph)
    assert cosines["pulling"] - cosines["pushing"] >= 0.3


@pytest.mark.parametrize("lambda_rel", [0.0, 0.1, 1.0])
def test_lambda_sweep_trains(tmp_path, lambda_rel):
    data = make_synthetic_dataset("planted", n_instances=300, seed=1)
    config = tiny_config(tmp_path, epochs=5, lambda_rel=lambda_rel)
    result = training_service.train(config, train=data, valid=data)
    assert all(np.isfinite(row["total"]) for row in result.history)


BIBTEX = settings.DATA_DIR / "bibtex"


@pytest.mark.skipif(not (BIBTEX / "bibtex-train.txt").exists(), reason="Bibtex split not downloaded")
def test_bibtex_beats_binary_relevance(tmp_path):
    train, valid, test = (load_dataset(BIBTEX / f"bibtex-{part}.txt", "binary") for part in ("train", "valid", "test"))
    stats = dataset_stats(combine([train, valid, test], "bibtex"))
    assert stats.instances == 7538 and stats.labels == 159
    assert stats.cardinality == pytest.approx(2.38, abs=0.01)

    reports = {}
    for architecture in ("mrmp", "br"):
        config = tiny_config(tmp_path / architecture, architecture=architecture, d_model=128, n_heads=4,
                             epochs=30, batch_size=32, lr=0.0002, dropout=0.2)
        result = training_service.train(config, train=train, valid=valid)
        reports[architecture] = training_service.evaluate(result.checkpoint_path, test, valid).report
    assert reports["mrmp"].ebf1 > reports["br"].ebf1
    assert reports["mrmp"].maf1 > reports["br"].maf1
