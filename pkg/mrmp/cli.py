"""
MrMP CLI
그래프 추출, 학습, 평가, 예측, ablation 리포트, 데이터 분할/통계, 벤치마크, 서빙
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from mrmp import __version__
from mrmp.config.settings import load_run_config, settings, write_run_config
from mrmp.errors import ConfigError, DegenerateDatasetError, MrmpError
from mrmp.models.schemas import METRIC_NAMES
from mrmp.services import data_service
from mrmp.services.graph_service import build_relation_graphs, graph_stats, read_edge_list, write_edge_list
from mrmp.services.training_service import training_service

logger = logging.getLogger("mrmp.cli")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# RunConfig fields settable from the command line
OVERRIDE_KEYS = (
    "train", "valid", "test", "vocab", "graph", "out", "seed", "alpha", "lambda_rel",
    "threshold_grid", "architecture", "input_type", "epochs", "batch_size", "lr",
    "d_model", "n_heads", "patience", "mrmp_enabled", "yates",
)


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value run config file")
    parser.add_argument("--train", type=Path)
    parser.add_argument("--valid", type=Path)
    parser.add_argument("--test", type=Path)
    parser.add_argument("--vocab", type=Path, help="vocabulary file for sequential datasets")
    parser.add_argument("--graph", type=Path, help="edge-list file; built from --train when omitted")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--alpha", type=float, help="significance level of the label dependency test")
    parser.add_argument("--lambda-rel", dest="lambda_rel", type=float, help="weight of the relational loss")
    parser.add_argument("--no-mrmp", dest="mrmp_enabled", action="store_const", const=False,
                        help="bypass the relation module (ablation model)")
    parser.add_argument("--threshold-grid", dest="threshold_grid", type=float, nargs="+")
    parser.add_argument("--architecture", choices=["mrmp", "br"])
    parser.add_argument("--input-type", dest="input_type", choices=["binary", "sequential"])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--d-model", dest="d_model", type=int)
    parser.add_argument("--n-heads", dest="n_heads", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--out", type=Path)


def _run_config(args: argparse.Namespace):
    overrides = {key: getattr(args, key, None) for key in OVERRIDE_KEYS}
    return load_run_config(getattr(args, "config", None), overrides)


def _load_for_checkpoint(path: Path, checkpoint: Path, vocab: Optional[Path]) -> data_service.Dataset:
    return training_service.load_split(path, training_service.checkpoint_config(checkpoint), vocab)


def cmd_build_graph(args: argparse.Namespace) -> int:
    config = _run_config(args)
    dataset = data_service.load_dataset(args.dataset, config.input_type, config.vocab, config.max_seq_len)
    graph = build_relation_graphs(dataset.labels, config.alpha, config.yates)
    if graph.degenerate:
        raise DegenerateDatasetError(f"{args.dataset}: every label is constant, no dependency test is possible")
    out = Path(config.out)
    path = write_edge_list(graph, out / "graph.txt")
    write_run_config(config, out)

    stats = graph_stats(graph)
    print(f"labels={stats.labels} alpha={stats.alpha} pulling_edges={stats.pulling_edges} pushing_edges={stats.pushing_edges}")
    for name, histogram in (("pulling", stats.degree_histogram_plus), ("pushing", stats.degree_histogram_minus)):
        print(f"{name} degree histogram: " + " ".join(f"{d}:{n}" for d, n in sorted(histogram.items())))
    print(f"graph written to {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    result = training_service.train(config)
    print(f"best epoch {result.best_epoch}: val_{config.selection_metric}={result.best_metric:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    if config.test is None:
        raise ConfigError("evaluate needs --test")
    test = _load_for_checkpoint(config.test, args.checkpoint, config.vocab)
    valid = _load_for_checkpoint(config.valid, args.checkpoint, config.vocab) if config.valid else None
    out = Path(config.out)
    write_run_config(config, out)
    result = training_service.evaluate(args.checkpoint, test, valid, config.threshold_grid, out)

    for name in METRIC_NAMES:
        print(f"{name}={getattr(result.report, name):.4f} threshold={result.thresholds[name]:.2f}")
    defined = [a for a in result.report.auc if a is not None]
    if defined:
        print(f"mean_auc={sum(defined) / len(defined):.4f} ({len(defined)}/{len(result.report.auc)} labels)")
    if result.cosines is not None:
        print(f"mean_cosine pulling={result.cosines['pulling']:.4f} pushing={result.cosines['pushing']:.4f}")
    print(f"report: {result.report_path}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    config = _run_config(args)
    dataset = _load_for_checkpoint(args.dataset, args.checkpoint, config.vocab)
    out_path = Path(config.out) / "predictions.csv"
    write_run_config(config, config.out)
    training_service.predict(args.checkpoint, dataset, args.threshold, out_path)
    print(f"predictions: {out_path}")
    return 0


def cmd_ablation_report(args: argparse.Namespace) -> int:
    config = _run_config(args)
    dataset = _load_for_checkpoint(args.dataset, args.with_mrmp, config.vocab)
    graph = read_edge_list(config.graph) if config.graph else None
    write_run_config(config, config.out)
    rows, _ = training_service.ablation_report(
        args.with_mrmp, args.without_mrmp, dataset, graph, args.groups, Path(config.out),
    )
    print("relation group n_labels degrees mean_delta_auc")
    for r in rows:
        degrees = "-" if r.min_degree is None else f"{r.min_degree}-{r.max_degree}"
        delta = "-" if r.mean_delta_auc is None else f"{r.mean_delta_auc:+.4f}"
        print(f"{r.relation} {r.group} {r.n_labels} {degrees} {delta}")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    dataset = data_service.parse_sparse_dataset(args.dataset)
    out = Path(args.out or settings.DATA_DIR)
    for part in data_service.split_dataset(dataset, args.proportions, args.seed):
        path = data_service.serialize_sparse_dataset(part, out / f"{dataset.name}-{part.name}.txt")
        print(f"{part.name}: {part.n_instances} instances -> {path}")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    datasets = [
        data_service.load_dataset(path, args.input_type, args.vocab, data_service.DEFAULT_MAX_SEQ_LEN)
        for path in args.datasets
    ]
    rows = [(d.name, data_service.dataset_stats(d)) for d in datasets]
    if len(datasets) > 1:
        rows.append(("total", data_service.dataset_stats(data_service.combine(datasets, "total"))))
    print("name instances labels features cardinality")
    for name, s in rows:
        print(f"{name} {s.instances} {s.labels} {s.features} {s.cardinality:.2f}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = _run_config(args).model_config_only()
    rows = training_service.bench(config, args.seq_lens, args.labels, args.repeats, args.seed or 0)
    print("N L encoder_ms relation_ms decoder_ms total_ms")
    for r in rows:
        print(f"{r.seq_len} {r.n_labels} {r.encoder_ms:.2f} {r.relation_ms:.2f} {r.decoder_ms:.2f} {r.total_ms:.2f}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    dataset = data_service.make_synthetic_dataset(args.kind, args.instances, args.seed)
    path = data_service.serialize_sparse_dataset(dataset, args.out)
    print(f"{dataset.name}: {dataset.n_instances} instances, {dataset.n_labels} labels -> {path}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from mrmp.services.inference_service import inference_service

    inference_service.load(args.checkpoint, args.vocab)
    uvicorn.run("mrmp.main:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrmp", description="Multi-label classification with label relation message passing")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="extract pulling / pushing label graphs")
    p.add_argument("dataset", type=Path)
    p.add_argument("--yates", action="store_true", default=None)
    _add_run_options(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train a model")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="tune thresholds on --valid and report metrics on --test")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_run_options(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write per-instance label predictions")
    p.add_argument("dataset", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    _add_run_options(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablation-report", help="AUC differences with and without MrMP, by node degree")
    p.add_argument("dataset", type=Path)
    p.add_argument("--with", dest="with_mrmp", type=Path, required=True)
    p.add_argument("--without", dest="without_mrmp", type=Path, required=True)
    p.add_argument("--groups", type=int, default=4)
    _add_run_options(p)
    p.set_defaults(func=cmd_ablation_report)

    p = sub.add_parser("split", help="seeded train/valid/test split of a sparse dataset")
    p.add_argument("dataset", type=Path)
    p.add_argument("--proportions", type=float, nargs="+", default=[0.6, 0.1, 0.3])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("stats", help="instances, labels, features and label cardinality")
    p.add_argument("datasets", type=Path, nargs="+")
    p.add_argument("--input-type", dest="input_type", choices=["binary", "sequential"], default="binary")
    p.add_argument("--vocab", type=Path)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bench", help="forward-pass timings over sequence lengths and label counts")
    p.add_argument("--seq-lens", dest="seq_lens", type=int, nargs="+", default=[64, 128, 256])
    p.add_argument("--labels", type=int, nargs="+", default=[50, 200])
    p.add_argument("--repeats", type=int, default=3)
    _add_run_options(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a seeded synthetic corpus")
    p.add_argument("--kind", choices=["function", "planted"], default="function")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="serve a checkpoint over HTTP")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--vocab", type=Path, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def report_error(exc: BaseException, exit_code: int) -> None:
    """One machine-parsable line on stderr"""
    print(f"error code={exit_code} kind={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (args.log_level or settings.LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)

    try:
        return args.func(args)
    except MrmpError as e:
        logger.debug("command failed", exc_info=True)
        report_error(e, e.exit_code)
        return e.exit_code
    except Exception as e:
        logger.exception("unexpected failure")
        report_error(e, 1)
        return 1


if __name__ == "__main__":
    sys.exit(main())
