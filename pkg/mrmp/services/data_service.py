"""
Data Service
데이터셋 로딩 (binary vector / sequential), 배치 생성, 통계

Sparse (binary-vector) file format, UTF-8:
    M F L                       header: instances, features, labels
    1,3 5:1 9:1                 comma-separated label ids, then feature:value pairs
     2:1                        leading whitespace = empty label set
Feature ids become token ids; only presence is used. Id F is reserved for
instances with no active feature, so binary datasets have vocab_size F + 1.

Sequential file format: `<label ids>\\t<tokens>` per line, with a vocabulary
file of one token per line (id = line index + 2; 0 = PAD, 1 = UNK).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional, Sequence

import numpy as np

from mrmp.errors import DatasetFormatError, ShapeError
from mrmp.models.schemas import DatasetStats

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
DEFAULT_MAX_SEQ_LEN = 500


def empty_instance_token(input_type: str, vocab_size: int) -> int:
    """Stand-in id for an instance with no tokens: the reserved last id for binary inputs, UNK for sequences"""
    return vocab_size - 1 if input_type == "binary" else UNK_ID


@dataclass
class Dataset:
    """M instances of token ids with binary label vectors"""

    tokens: list[np.ndarray]
    labels: np.ndarray
    input_type: Literal["binary", "sequential"]
    vocab_size: int
    n_features: int
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2 or self.labels.shape[0] != len(self.tokens):
            raise ShapeError(f"labels {self.labels.shape} do not match {len(self.tokens)} instances")
        for seq in self.tokens:
            if seq.size and (seq.min() < 0 or seq.max() >= self.vocab_size):
                raise ShapeError(f"token id outside vocabulary of size {self.vocab_size}")

    @property
    def n_instances(self) -> int:
        return len(self.tokens)

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]

    def subset(self, indices: Sequence[int], name: str = "") -> "Dataset":
        indices = list(indices)
        return Dataset(
            tokens=[self.tokens[i] for i in indices],
            labels=self.labels[indices] if indices else self.labels[:0],
            input_type=self.input_type,
            vocab_size=self.vocab_size,
            n_features=self.n_features,
            name=name or self.name,
        )


@dataclass
class Batch:
    """Padded token ids (B x S), padding mask (True on real tokens), labels (B x L)"""

    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def _read_lines(path: Path) -> list[str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read().splitlines()
    except FileNotFoundError as e:
        raise DatasetFormatError("file not found", path) from e
    except UnicodeDecodeError as e:
        raise DatasetFormatError(f"not valid UTF-8: {e}", path) from e


def _parse_label_ids(text: str, n_labels: Optional[int], path: Path, line_no: int) -> list[int]:
    try:
        ids = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise DatasetFormatError(f"bad label list '{text}'", path, line_no) from e
    for label in ids:
        if label < 0 or (n_labels is not None and label >= n_labels):
            raise DatasetFormatError(f"label {label} outside [0, {n_labels})", path, line_no)
    return ids


def parse_sparse_dataset(path: Path, max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> Dataset:
    path = Path(path)
    lines = _read_lines(path)
    if not lines:
        raise DatasetFormatError("empty file", path, 1)
    try:
        n_instances, n_features, n_labels = (int(x) for x in lines[0].split())
    except ValueError as e:
        raise DatasetFormatError("header must be 'M F L'", path, 1) from e

    empty_token = empty_instance_token("binary", n_features + 1)
    tokens: list[np.ndarray] = []
    labels = np.zeros((n_instances, n_labels), dtype=np.uint8)
    truncated = 0
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if len(tokens) >= n_instances:
            raise DatasetFormatError(f"more instances than the declared {n_instances}", path, line_no)

        if line[:1].isspace():
            label_part, feature_part = "", line
        else:
            label_part, _, feature_part = line.partition(" ")
            if ":" in label_part:
                label_part, feature_part = "", line

        row = len(tokens)
        labels[row, _parse_label_ids(label_part, n_labels, path, line_no)] = 1

        features: list[int] = []
        for pair in feature_part.split():
            fid_text, _, value_text = pair.partition(":")
            try:
                fid = int(fid_text)
                if value_text:
                    float(value_text)
            except ValueError as e:
                raise DatasetFormatError(f"bad feature pair '{pair}'", path, line_no) from e
            if not 0 <= fid < n_features:
                raise DatasetFormatError(f"feature {fid} outside [0, {n_features})", path, line_no)
            features.append(fid)

        unique = sorted(set(features))
        if len(unique) != len(features):
            logger.warning("%s:%d: duplicate feature ids dropped", path, line_no)
        if len(unique) > max_seq_len:
            unique = unique[:max_seq_len]
            truncated += 1
        tokens.append(np.array(unique or [empty_token], dtype=np.int64))

    if len(tokens) != n_instances:
        raise DatasetFormatError(f"header declares {n_instances} instances, found {len(tokens)}", path)
    if truncated:
        logger.info("%s: %d instances truncated to %d features", path, truncated, max_seq_len)
    return Dataset(tokens, labels, "binary", vocab_size=n_features + 1, n_features=n_features, name=path.stem)


def serialize_sparse_dataset(dataset: Dataset, path: Path) -> Path:
    if dataset.input_type != "binary":
        raise ValueError("only binary-vector datasets have a sparse form")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{dataset.n_instances} {dataset.n_features} {dataset.n_labels}\n")
        for seq, y in zip(dataset.tokens, dataset.labels):
            label_text = ",".join(str(i) for i in np.flatnonzero(y))
            feature_text = " ".join(f"{t}:1" for t in seq if t < dataset.n_features)
            f.write(f"{label_text} {feature_text}".rstrip() + "\n")
    return path


def load_vocab(vocab_path: Path) -> dict[str, int]:
    vocab_path = Path(vocab_path)
    if not vocab_path.exists():
        raise DatasetFormatError("vocabulary file not found", vocab_path)
    vocab: dict[str, int] = {}
    for index, token in enumerate(_read_lines(vocab_path)):
        token = token.strip()
        if token and token not in vocab:
            vocab[token] = index + 2
    return vocab


def encode_tokens(words: Sequence[str], vocab: dict[str, int], max_seq_len: int) -> np.ndarray:
    ids = [vocab.get(w, UNK_ID) for w in words[:max_seq_len]]
    return np.array(ids or [UNK_ID], dtype=np.int64)


def parse_sequence_dataset(
    path: Path,
    vocab_path: Path,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
    n_labels: Optional[int] = None,
) -> Dataset:
    path = Path(path)
    vocab = load_vocab(vocab_path)
    vocab_size = (max(vocab.values()) + 1) if vocab else 2

    rows: list[tuple[list[int], np.ndarray]] = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            raise DatasetFormatError("empty line", path, line_no)
        label_part, sep, text = line.partition("\t")
        if not sep:
            raise DatasetFormatError("expected '<labels>\\t<tokens>'", path, line_no)
        label_ids = _parse_label_ids(label_part, n_labels, path, line_no)
        rows.append((label_ids, encode_tokens(text.split(), vocab, max_seq_len)))

    if n_labels is None:
        n_labels = 1 + max((max(ids) for ids, _ in rows if ids), default=-1)
    labels = np.zeros((len(rows), n_labels), dtype=np.uint8)
    for row, (ids, _) in enumerate(rows):
        labels[row, ids] = 1
    return Dataset(
        [seq for _, seq in rows], labels, "sequential",
        vocab_size=vocab_size, n_features=len(vocab), name=path.stem,
    )


def load_dataset(
    path: Path,
    input_type: str = "binary",
    vocab_path: Optional[Path] = None,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
    n_labels: Optional[int] = None,
) -> Dataset:
    if input_type == "sequential":
        if vocab_path is None:
            raise DatasetFormatError("sequential datasets need a vocabulary file", path)
        return parse_sequence_dataset(path, vocab_path, max_seq_len, n_labels)
    return parse_sparse_dataset(path, max_seq_len)


def pad_batch(sequences: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(s) for s in sequences), default=0)
    tokens = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for row, seq in enumerate(sequences):
        tokens[row, : len(seq)] = seq
        mask[row, : len(seq)] = True
    return tokens, mask


def batch_iter(
    dataset: Dataset,
    batch_size: int = 32,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Every instance once per epoch; shuffled order is a function of (seed, epoch)"""
    order = np.arange(dataset.n_instances)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(dataset.n_instances)
    for start in range(0, dataset.n_instances, batch_size):
        indices = order[start : start + batch_size]
        tokens, mask = pad_batch([dataset.tokens[i] for i in indices])
        yield Batch(tokens=tokens, mask=mask, labels=dataset.labels[indices], indices=indices)


def multi_hot(tokens: np.ndarray, mask: np.ndarray, vocab_size: int, dtype=np.float32) -> np.ndarray:
    """Bag-of-tokens indicator matrix (B x vocab) for the binary-relevance baseline"""
    x = np.zeros((tokens.shape[0], vocab_size), dtype=dtype)
    rows, cols = np.nonzero(mask)
    x[rows, tokens[rows, cols]] = 1
    return x


def dataset_stats(dataset: Dataset) -> DatasetStats:
    cardinality = float(dataset.labels.sum(axis=1).mean()) if dataset.n_instances else 0.0
    return DatasetStats(
        instances=dataset.n_instances,
        labels=dataset.n_labels,
        features=dataset.n_features,
        cardinality=cardinality,
    )


def combine(datasets: Sequence[Dataset], name: str = "") -> Dataset:
    first = datasets[0]
    return Dataset(
        tokens=[seq for d in datasets for seq in d.tokens],
        labels=np.concatenate([d.labels for d in datasets]),
        input_type=first.input_type,
        vocab_size=max(d.vocab_size for d in datasets),
        n_features=max(d.n_features for d in datasets),
        name=name or first.name,
    )


def split_dataset(dataset: Dataset, proportions: Sequence[float] = (0.6, 0.1, 0.3), seed: int = 0) -> list[Dataset]:
    """Seeded random split; cut points are rounded to the nearest instance"""
    proportions = np.asarray(proportions, dtype=float)
    if proportions.ndim != 1 or np.any(proportions <= 0):
        raise ValueError("split proportions must be positive")
    proportions = proportions / proportions.sum()
    order = np.random.default_rng(seed).permutation(dataset.n_instances)
    cuts = np.rint(np.cumsum(proportions)[:-1] * dataset.n_instances).astype(int)
    names = ("train", "valid", "test")
    return [
        dataset.subset(sorted(part.tolist()), name=names[k] if k < len(names) else f"part{k}")
        for k, part in enumerate(np.split(order, cuts))
    ]


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

def make_synthetic_dataset(
    kind: Literal["function", "planted"] = "function",
    n_instances: int = 50,
    seed: int = 0,
) -> Dataset:
    """
    Seeded toy corpora.

    function: 10 labels over 30 tokens; label k is on iff token k or k + 10
        appears (tokens 20..29 are noise).
    planted: 10 labels over 60 tokens. Pairs (0,1) and (2,3) never co-occur,
        pairs (4,5) and (6,7) always do, labels 8 and 9 are independent. Each
        active label emits one of its own 4 tokens; exclusive pairs also share
        4 ambiguous tokens, so telling them apart benefits from the relations.
    """
    rng = np.random.default_rng(seed)
    tokens: list[np.ndarray] = []
    if kind == "function":
        n_labels, vocab = 10, 30
        labels = np.zeros((n_instances, n_labels), dtype=np.uint8)
        for row in range(n_instances):
            seq = np.sort(rng.choice(vocab, size=rng.integers(3, 7), replace=False))
            for k in range(n_labels):
                labels[row, k] = int(k in seq or k + 10 in seq)
            tokens.append(seq.astype(np.int64))
        return Dataset(tokens, labels, "binary", vocab_size=vocab + 1, n_features=vocab, name="synthetic-function")

    if kind != "planted":
        raise ValueError(f"unknown synthetic corpus '{kind}'")
    n_labels, vocab = 10, 60
    own = {k: np.arange(4 * k, 4 * k + 4) for k in range(n_labels)}
    shared = {0: np.arange(40, 44), 2: np.arange(44, 48)}
    noise = np.arange(48, 60)
    labels = np.zeros((n_instances, n_labels), dtype=np.uint8)
    for row in range(n_instances):
        y = labels[row]
        for a in (0, 2):
            state = rng.integers(3)
            if state < 2:
                y[a + state] = 1
        for a in (4, 6):
            if rng.random() < 0.4:
                y[a] = y[a + 1] = 1
        y[8] = rng.random() < 0.3
        y[9] = rng.random() < 0.3
        words: set[int] = set(rng.choice(noise, size=2, replace=False).tolist())
        for k in np.flatnonzero(y):
            pool = own[int(k)]
            if int(k) in (0, 1, 2, 3) and rng.random() < 0.5:
                pool = shared[int(k) - int(k) % 2]
            words.add(int(rng.choice(pool)))
        tokens.append(np.array(sorted(words), dtype=np.int64))
    return Dataset(tokens, labels, "binary", vocab_size=vocab + 1, n_features=vocab, name="synthetic-planted")
