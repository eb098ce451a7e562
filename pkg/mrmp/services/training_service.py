"""
Training Service
학습 루프, 평가, 예측, MrMP 유무 비교(ablation) 리포트, 연산 시간 벤치마크
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mrmp.config.settings import write_run_config
from mrmp.core.optim import AdamState, LrSchedule, adam_step, clip_grad_norm, lr_at_epoch
from mrmp.core.tensor import GradTape
from mrmp.errors import ConfigError, LabelMismatchError, NonFiniteError, NonFiniteLossError
from mrmp.models.schemas import METRIC_NAMES, MetricsReport, ModelConfig, RunConfig
from mrmp.nn import model as nn_model
from mrmp.nn.objective import relation_cosines, total_loss
from mrmp.services import metrics_service
from mrmp.services.checkpoint_service import load_checkpoint, read_manifest, save_checkpoint
from mrmp.services.data_service import Dataset, batch_iter, load_dataset, pad_batch
from mrmp.services.graph_service import (
    Relation,
    RelationGraph,
    build_relation_graphs,
    graph_from_edges,
    node_degree_groups,
    read_edge_list,
    write_edge_list,
)

logger = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "l_bce", "l_rel", "total", "lr", "val_acc", "val_ebf1", "val_mif1", "val_maf1"]
CHECKPOINT_DIR = "checkpoint"


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_path: Path
    log_path: Path
    best_epoch: int
    best_metric: float
    thresholds: dict[str, float]
    history: list[dict[str, float]] = field(default_factory=list)


@dataclass
class EvaluationResult:
    report: MetricsReport
    thresholds: dict[str, float]
    cosines: Optional[dict[str, float]] = None
    report_path: Optional[Path] = None


@dataclass
class AblationRow:
    relation: str
    group: int
    n_labels: int
    min_degree: Optional[int]
    max_degree: Optional[int]
    mean_delta_auc: Optional[float]


@dataclass
class BenchRow:
    seq_len: int
    n_labels: int
    encoder_ms: float
    relation_ms: float
    decoder_ms: float

    @property
    def total_ms(self) -> float:
        return self.encoder_ms + self.relation_ms + self.decoder_ms


def check_compatible(config: ModelConfig, dataset: Dataset) -> None:
    if dataset.n_labels != config.n_labels:
        raise LabelMismatchError(f"dataset '{dataset.name}' has {dataset.n_labels} labels, model has {config.n_labels}")
    if dataset.vocab_size > config.vocab_size:
        raise LabelMismatchError(f"dataset vocabulary {dataset.vocab_size} exceeds model vocabulary {config.vocab_size}")


def predict_scores(model, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    """M x L probabilities in dataset order, dropout off"""
    scores = np.zeros((dataset.n_instances, dataset.n_labels), dtype=np.float64)
    for batch in batch_iter(dataset, batch_size):
        scores[batch.indices] = model.forward(batch.tokens, batch.mask, training=False).probs.data
    return scores


class TrainingService:
    """Trains and evaluates MrMP / binary-relevance models on multi-label datasets"""

    def load_split(self, path: Path, config: ModelConfig, vocab_path: Optional[Path] = None) -> Dataset:
        return load_dataset(
            path,
            config.input_type,
            vocab_path,
            config.max_seq_len,
            n_labels=config.n_labels or None,
        )

    def relation_graph(self, config: RunConfig, train: Dataset) -> RelationGraph:
        """Graph file from the config when given, else extracted from the training labels"""
        if config.graph is not None:
            graph = read_edge_list(config.graph)
            if graph.n_labels != train.n_labels:
                raise LabelMismatchError(f"graph over {graph.n_labels} labels, training data has {train.n_labels}")
            return graph
        if train.n_labels < 2:
            return RelationGraph.empty(train.n_labels, config.alpha)
        return build_relation_graphs(train.labels, config.alpha, config.yates)

    def train(
        self,
        config: RunConfig,
        train: Optional[Dataset] = None,
        valid: Optional[Dataset] = None,
    ) -> TrainResult:
        """
        Mini-batch Adam on l_bce + lambda * l_rel with step-decayed learning rate.
        The checkpoint with the best validation `selection_metric` (at its tuned
        threshold) is kept; training stops after `patience` epochs without gain.
        """
        if train is None:
            if config.train is None:
                raise ConfigError("no training data: set 'train' in the config")
            train = load_dataset(config.train, config.input_type, config.vocab, config.max_seq_len)
        if valid is None and config.valid is not None:
            valid = load_dataset(config.valid, config.input_type, config.vocab, config.max_seq_len, n_labels=train.n_labels)
        if valid is None:
            logger.warning("no validation split: model selection uses the training set")
            valid = train

        config = config.model_copy(update={
            "vocab_size": max(train.vocab_size, valid.vocab_size),
            "n_labels": train.n_labels,
        })
        check_compatible(config, valid)
        out_dir = Path(config.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_run_config(config, out_dir)

        graph = None
        if config.architecture == "mrmp":
            graph = self.relation_graph(config, train)
            write_edge_list(graph, out_dir / "graph.txt")
            logger.info("relation graph: %d pulling, %d pushing edges over %d labels",
                        graph.n_plus_edges, graph.n_minus_edges, graph.n_labels)

        model_config = config.model_config_only()
        params = nn_model.init_params(model_config, config.seed)
        model = nn_model.build_model(model_config, params, graph)
        logger.info("%s model with %d parameters", config.architecture, params.num_parameters())

        schedule = LrSchedule(initial_lr=config.lr, step_size_epochs=config.lr_step, decay_factor=config.lr_decay)
        state = AdamState.create(params)
        checkpoint_path = out_dir / CHECKPOINT_DIR
        log_path = out_dir / "train_log.csv"

        best_metric = -np.inf
        best_epoch = 0
        best_thresholds: dict[str, float] = {}
        history: list[dict[str, float]] = []
        stale = 0
        with open(log_path, "w", encoding="utf-8", newline="") as log_file:
            writer = csv.writer(log_file, lineterminator="\n")
            writer.writerow(LOG_HEADER)

            for epoch in range(1, config.epochs + 1):
                lr = lr_at_epoch(schedule, epoch - 1)
                sums = np.zeros(3)
                n_steps = 0
                for step, batch in enumerate(batch_iter(train, config.batch_size, shuffle=True, seed=config.seed, epoch=epoch)):
                    try:
                        with GradTape() as tape:
                            tape.watch_all(params)
                            output = model.forward(batch.tokens, batch.mask, training=True, rng_seed=[config.seed, epoch, step])
                            loss, report = total_loss(batch.labels, output.probs, output.label_embeddings, graph, config.lambda_rel)
                        grads = tape.backward(loss, params)
                        grads, grad_norm = clip_grad_norm(grads, config.clip_norm)
                        adam_step(params, grads, state, lr)
                    except NonFiniteLossError:
                        raise
                    except NonFiniteError as e:
                        raise NonFiniteLossError(f"epoch {epoch} step {step}: {e}") from e
                    logger.debug("epoch %d step %d: l_bce=%.6f l_rel=%.6f grad_norm=%.4f",
                                 epoch, step, report.l_bce, report.l_rel, grad_norm)
                    sums += (report.l_bce, report.l_rel, report.total)
                    n_steps += 1

                l_bce, l_rel, total = sums / max(n_steps, 1)
                try:
                    val_scores = predict_scores(model, valid, config.batch_size)
                except NonFiniteError as e:
                    raise NonFiniteLossError(f"epoch {epoch} validation: {e}") from e
                thresholds = metrics_service.tune_thresholds(valid.labels, val_scores, config.threshold_grid)
                val = {
                    name: metrics_service.evaluate(valid.labels, metrics_service.binarize(val_scores, thresholds[name]))[name]
                    for name in METRIC_NAMES
                }
                row = {"epoch": epoch, "l_bce": l_bce, "l_rel": l_rel, "total": total, "lr": lr,
                       **{f"val_{k}": v for k, v in val.items()}}
                history.append(row)
                writer.writerow([epoch, f"{l_bce:.6f}", f"{l_rel:.6f}", f"{total:.6f}", f"{lr:.8g}",
                                 *(f"{val[name]:.6f}" for name in METRIC_NAMES)])
                log_file.flush()
                logger.info("epoch %d: total=%.4f l_bce=%.4f l_rel=%.4f val_%s=%.4f",
                            epoch, total, l_bce, l_rel, config.selection_metric, val[config.selection_metric])

                selected = val[config.selection_metric]
                if selected > best_metric:
                    best_metric, best_epoch, best_thresholds, stale = selected, epoch, thresholds, 0
                    save_checkpoint(params, checkpoint_path, model_config, graph, epoch, val, thresholds)
                else:
                    stale += 1
                    if stale >= config.patience:
                        logger.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                        break

        return TrainResult(
            out_dir=out_dir,
            checkpoint_path=checkpoint_path,
            log_path=log_path,
            best_epoch=best_epoch,
            best_metric=float(best_metric),
            thresholds=best_thresholds,
            history=history,
        )

    def checkpoint_config(self, checkpoint_path: Path) -> ModelConfig:
        return ModelConfig.model_validate(read_manifest(checkpoint_path).config)

    def load_model(self, checkpoint_path: Path):
        checkpoint = load_checkpoint(checkpoint_path)
        return checkpoint, nn_model.build_model(checkpoint.config, checkpoint.params, checkpoint.graph)

    def evaluate(
        self,
        checkpoint_path: Path,
        test: Dataset,
        valid: Optional[Dataset] = None,
        grid: Optional[Sequence[float]] = None,
        out_dir: Optional[Path] = None,
    ) -> EvaluationResult:
        """Thresholds tuned on `valid` when given, else the ones stored with the checkpoint"""
        checkpoint, model = self.load_model(checkpoint_path)
        check_compatible(checkpoint.config, test)
        if valid is not None:
            check_compatible(checkpoint.config, valid)
            thresholds = metrics_service.tune_thresholds(valid.labels, predict_scores(model, valid), grid)
        else:
            thresholds = {name: checkpoint.manifest.thresholds.get(name, 0.5) for name in METRIC_NAMES}

        report = metrics_service.metrics_report(test.labels, predict_scores(model, test), thresholds)
        cosines = None
        embeddings = model.label_embeddings()
        if embeddings is not None and checkpoint.graph is not None:
            cosines = relation_cosines(embeddings, checkpoint.graph)

        report_path = None
        if out_dir is not None:
            report_path = metrics_service.write_metrics_csv(report, Path(out_dir) / "metrics.csv")
        return EvaluationResult(report=report, thresholds=thresholds, cosines=cosines, report_path=report_path)

    def predict(
        self,
        checkpoint_path: Path,
        dataset: Dataset,
        threshold: float = 0.5,
        out_path: Optional[Path] = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """(scores, binary predictions); optionally written as instance,labels,scores"""
        checkpoint, model = self.load_model(checkpoint_path)
        check_compatible(checkpoint.config, dataset)
        scores = predict_scores(model, dataset)
        predicted = metrics_service.binarize(scores, threshold)
        if out_path is not None:
            out_path = Path(out_path)
            out_path.parent.mkdir(parents=True, exist_ok=True)
            with open(out_path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["instance", "labels", "scores"])
                for i, (row, p) in enumerate(zip(scores, predicted)):
                    writer.writerow([i, " ".join(map(str, np.flatnonzero(p))), " ".join(f"{s:.6f}" for s in row)])
        return scores, predicted

    def ablation_report(
        self,
        with_path: Path,
        without_path: Path,
        dataset: Dataset,
        graph: Optional[RelationGraph] = None,
        n_groups: int = 4,
        out_dir: Optional[Path] = None,
    ) -> tuple[list[AblationRow], np.ndarray]:
        """
        Per-label AUC(with) - AUC(without), averaged inside each degree group of
        each relation graph. Labels whose AUC is undefined are left out of the means.
        """
        ckpt_with, model_with = self.load_model(with_path)
        ckpt_without, model_without = self.load_model(without_path)
        if ckpt_with.config.n_labels != ckpt_without.config.n_labels:
            raise LabelMismatchError(
                f"checkpoints cover {ckpt_with.config.n_labels} and {ckpt_without.config.n_labels} labels")
        check_compatible(ckpt_with.config, dataset)
        check_compatible(ckpt_without.config, dataset)
        graph = graph or ckpt_with.graph or ckpt_without.graph
        if graph is None:
            raise LabelMismatchError("no relation graph: pass one or use a checkpoint that stores it")
        if graph.n_labels != dataset.n_labels:
            raise LabelMismatchError(f"graph over {graph.n_labels} labels, dataset has {dataset.n_labels}")

        auc_with = metrics_service.auc_per_label(dataset.labels, predict_scores(model_with, dataset))
        auc_without = metrics_service.auc_per_label(dataset.labels, predict_scores(model_without, dataset))
        delta = auc_with - auc_without

        groups = node_degree_groups(graph, n_groups)
        rows: list[AblationRow] = []
        for relation in (Relation.PULLING, Relation.PUSHING):
            degrees = groups.degrees[relation]
            for group in range(n_groups):
                members = groups.members(relation, group)
                defined = [j for j in members if not np.isnan(delta[j])]
                rows.append(AblationRow(
                    relation=relation.value,
                    group=group,
                    n_labels=len(members),
                    min_degree=int(degrees[members].min()) if members else None,
                    max_degree=int(degrees[members].max()) if members else None,
                    mean_delta_auc=float(np.mean(delta[defined])) if defined else None,
                ))

        if out_dir is not None:
            out_dir = Path(out_dir)
            deg_plus, deg_minus = graph.degrees()
            metrics_service.write_label_auc_csv(delta, deg_plus, deg_minus, out_dir / "label_delta_auc.csv")
            with open(out_dir / "ablation.csv", "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["relation", "group", "n_labels", "min_degree", "max_degree", "mean_delta_auc"])
                for r in rows:
                    writer.writerow([
                        r.relation, r.group, r.n_labels,
                        "" if r.min_degree is None else r.min_degree,
                        "" if r.max_degree is None else r.max_degree,
                        "" if r.mean_delta_auc is None else f"{r.mean_delta_auc:.6f}",
                    ])
        return rows, delta

    def bench(
        self,
        config: ModelConfig,
        seq_lens: Sequence[int] = (64, 128, 256),
        label_counts: Sequence[int] = (50, 200),
        repeats: int = 3,
        seed: int = 0,
        edge_density: float = 0.05,
    ) -> list[BenchRow]:
        """Best-of-`repeats` wall clock of one forward pass per stage, batch of one"""
        rng = np.random.default_rng(seed)
        vocab_size = max(config.vocab_size, 1000)
        rows = []
        for n_labels in label_counts:
            pairs = [(i, j) for i in range(n_labels) for j in range(i + 1, n_labels)]
            draws = rng.random(len(pairs))
            plus = [p for p, r in zip(pairs, draws) if r < edge_density / 2]
            minus = [p for p, r in zip(pairs, draws) if edge_density / 2 <= r < edge_density]
            graph = graph_from_edges(n_labels, plus, minus)
            cfg = config.model_copy(update={
                "architecture": "mrmp",
                "n_labels": n_labels,
                "vocab_size": vocab_size,
                "max_seq_len": max(config.max_seq_len, max(seq_lens)),
            })
            params = nn_model.init_params(cfg, seed)
            for seq_len in seq_lens:
                tokens, mask = pad_batch([rng.integers(2, vocab_size, size=seq_len)])
                timings = {"encoder": np.inf, "relation": np.inf, "decoder": np.inf}
                for _ in range(repeats):
                    start = time.perf_counter()
                    z = nn_model.encode(tokens, mask, params, cfg)
                    mid = time.perf_counter()
                    V_T = nn_model.relation_forward(params["rel.v0"], graph, params, cfg).label_embeddings
                    rel_end = time.perf_counter()
                    nn_model.predict(nn_model.decode_features(V_T, z, mask, params, cfg), V_T)
                    end = time.perf_counter()
                    timings["encoder"] = min(timings["encoder"], mid - start)
                    timings["relation"] = min(timings["relation"], rel_end - mid)
                    timings["decoder"] = min(timings["decoder"], end - rel_end)
                rows.append(BenchRow(seq_len, n_labels, *(1000 * timings[k] for k in ("encoder", "relation", "decoder"))))
                logger.info("bench N=%d L=%d: %.1f ms", seq_len, n_labels, rows[-1].total_ms)
        return rows


training_service = TrainingService()
