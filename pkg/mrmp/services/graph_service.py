"""
Graph Service
학습 레이블로부터 pulling / pushing 관계 그래프를 만드는 서비스

Each label pair gets a 2x2 contingency table over the training instances; a
chi-squared test of independence decides whether the pair is related, and the
sign of P(j|i) - P(j) decides whether the edge pulls or pushes.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from mrmp.errors import DatasetFormatError, ShapeError
from mrmp.models.schemas import GraphSpec, GraphStats

logger = logging.getLogger(__name__)


class Relation(str, Enum):
    NONE = "none"
    PULLING = "pulling"
    PUSHING = "pushing"


EDGE_SIGNS = {Relation.PULLING: "+", Relation.PUSHING: "-"}


@dataclass(frozen=True, slots=True)
class ContingencyTable:
    """Counts for a label pair (i, j): n11 both, n10 i only, n01 j only, n00 neither"""

    n11: int
    n10: int
    n01: int
    n00: int

    def __post_init__(self):
        if min(self.n11, self.n10, self.n01, self.n00) < 0:
            raise ValueError(f"negative count in {self}")

    @property
    def total(self) -> int:
        return self.n11 + self.n10 + self.n01 + self.n00

    @property
    def marginals(self) -> tuple[int, int, int, int]:
        """(row i=1, row i=0, column j=1, column j=0)"""
        return (self.n11 + self.n10, self.n01 + self.n00, self.n11 + self.n01, self.n10 + self.n00)

    def transpose(self) -> "ContingencyTable":
        return ContingencyTable(self.n11, self.n01, self.n10, self.n00)


@dataclass
class RelationGraph:
    """Pulling (A_plus) and pushing (A_minus) adjacency over L labels"""

    n_labels: int
    A_plus: np.ndarray
    A_minus: np.ndarray
    alpha: float = 0.05
    n_tests: int = 0
    degenerate: bool = False

    def __post_init__(self):
        L = self.n_labels
        self.A_plus = np.asarray(self.A_plus, dtype=np.uint8)
        self.A_minus = np.asarray(self.A_minus, dtype=np.uint8)
        for name, adj in (("A_plus", self.A_plus), ("A_minus", self.A_minus)):
            if adj.shape != (L, L):
                raise ShapeError(f"{name} has shape {adj.shape}, expected ({L}, {L})")
            if not np.array_equal(adj, adj.T) or np.any(np.diag(adj)):
                raise ShapeError(f"{name} must be symmetric with zero diagonal")
        if np.any(self.A_plus & self.A_minus):
            raise ShapeError("a label pair cannot be both pulling and pushing")

    @classmethod
    def empty(cls, n_labels: int, alpha: float = 0.05) -> "RelationGraph":
        zeros = np.zeros((n_labels, n_labels), dtype=np.uint8)
        return cls(n_labels, zeros, zeros.copy(), alpha=alpha)

    @property
    def n_edges(self) -> int:
        return self.n_plus_edges + self.n_minus_edges

    @property
    def n_plus_edges(self) -> int:
        return int(self.A_plus.sum()) // 2

    @property
    def n_minus_edges(self) -> int:
        return int(self.A_minus.sum()) // 2

    def neighbors_plus(self, i: int) -> list[int]:
        """N+(i): original and inverse pulling edges plus the self loop"""
        return sorted({i, *np.flatnonzero(self.A_plus[i]).tolist()})

    def neighbors_minus(self, i: int) -> list[int]:
        return sorted({i, *np.flatnonzero(self.A_minus[i]).tolist()})

    def degrees(self) -> tuple[np.ndarray, np.ndarray]:
        return self.A_plus.sum(axis=1).astype(int), self.A_minus.sum(axis=1).astype(int)

    def edges(self, relation: Relation) -> list[tuple[int, int]]:
        adj = self.A_plus if relation == Relation.PULLING else self.A_minus
        rows, cols = np.nonzero(np.triu(adj, k=1))
        return list(zip(rows.tolist(), cols.tolist()))

    def to_spec(self) -> GraphSpec:
        return GraphSpec(
            labels=self.n_labels,
            alpha=self.alpha,
            plus=self.edges(Relation.PULLING),
            minus=self.edges(Relation.PUSHING),
        )

    @classmethod
    def from_spec(cls, spec: GraphSpec) -> "RelationGraph":
        return graph_from_edges(spec.labels, spec.plus, spec.minus, alpha=spec.alpha)


@dataclass
class DegreeGroups:
    """Per-relation assignment of labels to degree buckets (group 0 = degree 0)"""

    n_groups: int
    degrees: dict[Relation, np.ndarray]
    groups: dict[Relation, np.ndarray]

    def members(self, relation: Relation, group: int) -> list[int]:
        return np.flatnonzero(self.groups[relation] == group).tolist()


def _label_columns(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label matrix must be 2-D (instances x labels), got {labels.shape}")
    return labels.astype(bool)


def build_contingency(labels: np.ndarray, i: int, j: int) -> ContingencyTable:
    """2x2 counts for labels i and j over an instance-major (M x L) label matrix"""
    Y = _label_columns(labels)
    M, L = Y.shape
    if M == 0:
        raise ValueError("empty dataset")
    if i == j:
        raise ValueError("contingency table needs two distinct labels")
    if not (0 <= i < L and 0 <= j < L):
        raise IndexError(f"label index out of range [0, {L})")
    yi, yj = Y[:, i], Y[:, j]
    n11 = int(np.sum(yi & yj))
    n10 = int(np.sum(yi & ~yj))
    n01 = int(np.sum(~yi & yj))
    return ContingencyTable(n11, n10, n01, M - n11 - n10 - n01)


def chi_squared_statistic(table: ContingencyTable, yates: bool = False) -> float:
    """Pearson statistic M(n11 n00 - n10 n01)^2 / product of marginals"""
    row1, row0, col1, col0 = table.marginals
    if min(row1, row0, col1, col0) == 0:
        raise ValueError(f"zero marginal in {table}")
    M = table.total
    cross = abs(table.n11 * table.n00 - table.n10 * table.n01)
    if yates:
        cross = max(0.0, cross - M / 2)
    return M * float(cross) ** 2 / (float(row1) * row0 * col1 * col0)


@lru_cache(maxsize=64)
def critical_value(alpha: float, df: int = 1) -> float:
    """Chi-squared inverse CDF at 1 - alpha (3.841459 for alpha=0.05, df=1)"""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return float(chi2.ppf(1 - alpha, df))


def classify_relation(table: ContingencyTable, alpha: float = 0.05, yates: bool = False) -> Relation:
    threshold = critical_value(alpha)
    row1, row0, col1, col0 = table.marginals
    if min(row1, row0, col1, col0) == 0:
        return Relation.NONE
    if chi_squared_statistic(table, yates=yates) <= threshold:
        return Relation.NONE
    # P(j|i) > P(j)  <=>  n11 * M > (n11 + n10)(n11 + n01), symmetric in i, j
    if table.n11 * table.total > row1 * col1:
        return Relation.PULLING
    return Relation.PUSHING


def build_relation_graphs(labels: np.ndarray, alpha: float = 0.05, yates: bool = False) -> RelationGraph:
    """Test every unordered label pair once and collect pulling / pushing edges"""
    Y = _label_columns(labels)
    M, L = Y.shape
    if L < 2 or M < 1:
        raise ValueError(f"need at least 2 labels and 1 instance, got L={L}, M={M}")
    critical_value(alpha)

    Yi = Y.astype(np.int64)
    both = Yi.T @ Yi
    positives = np.diag(both).copy()

    A_plus = np.zeros((L, L), dtype=np.uint8)
    A_minus = np.zeros((L, L), dtype=np.uint8)
    n_tests = 0
    for i, j in combinations(range(L), 2):
        n11 = int(both[i, j])
        n10 = int(positives[i]) - n11
        n01 = int(positives[j]) - n11
        table = ContingencyTable(n11, n10, n01, M - n11 - n10 - n01)
        relation = classify_relation(table, alpha=alpha, yates=yates)
        n_tests += 1
        if relation == Relation.PULLING:
            A_plus[i, j] = A_plus[j, i] = 1
        elif relation == Relation.PUSHING:
            A_minus[i, j] = A_minus[j, i] = 1

    degenerate = bool(np.all((positives == 0) | (positives == M)))
    if degenerate:
        logger.warning("all %d labels are constant over %d instances; relation graphs are empty", L, M)
    graph = RelationGraph(L, A_plus, A_minus, alpha=alpha, n_tests=n_tests, degenerate=degenerate)
    logger.info(
        "relation graph: %d labels, %d pulling / %d pushing edges (alpha=%g, %d tests)",
        L, graph.n_plus_edges, graph.n_minus_edges, alpha, n_tests,
    )
    return graph


def graph_from_edges(n_labels: int, plus, minus, alpha: float = 0.05) -> RelationGraph:
    A_plus = np.zeros((n_labels, n_labels), dtype=np.uint8)
    A_minus = np.zeros((n_labels, n_labels), dtype=np.uint8)
    for adj, edges in ((A_plus, plus), (A_minus, minus)):
        for i, j in edges:
            if i == j or not (0 <= i < n_labels and 0 <= j < n_labels):
                raise ShapeError(f"invalid edge ({i}, {j}) for {n_labels} labels")
            adj[i, j] = adj[j, i] = 1
    return RelationGraph(n_labels, A_plus, A_minus, alpha=alpha)


def _group_by_degree(degrees: np.ndarray, n_groups: int) -> np.ndarray:
    groups = np.zeros(degrees.shape, dtype=int)
    positive = degrees > 0
    if not positive.any() or n_groups < 2:
        return groups
    # quantile edges over positive degrees; equal degrees always share a bucket
    qs = np.arange(1, n_groups - 1) / (n_groups - 1)
    edges = np.quantile(degrees[positive], qs) if qs.size else np.array([])
    groups[positive] = 1 + np.searchsorted(edges, degrees[positive], side="left")
    return groups


def node_degree_groups(graph: RelationGraph, n_groups: int = 4) -> DegreeGroups:
    """Degree-0 labels form group 0; positive degrees split into n_groups-1 quantile buckets"""
    if n_groups < 1:
        raise ValueError("n_groups must be positive")
    deg_plus, deg_minus = graph.degrees()
    degrees = {Relation.PULLING: deg_plus, Relation.PUSHING: deg_minus}
    groups = {rel: _group_by_degree(deg, n_groups) for rel, deg in degrees.items()}
    return DegreeGroups(n_groups=n_groups, degrees=degrees, groups=groups)


def graph_stats(graph: RelationGraph) -> GraphStats:
    deg_plus, deg_minus = graph.degrees()
    return GraphStats(
        labels=graph.n_labels,
        alpha=graph.alpha,
        pulling_edges=graph.n_plus_edges,
        pushing_edges=graph.n_minus_edges,
        degree_histogram_plus=dict(sorted(Counter(deg_plus.tolist()).items())),
        degree_histogram_minus=dict(sorted(Counter(deg_minus.tolist()).items())),
    )


def write_edge_list(graph: RelationGraph, path: Path) -> Path:
    """`labels=<L> alpha=<a>` header, then `<i> <j> <+|->` with i < j"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(
        (i, j, EDGE_SIGNS[relation])
        for relation in (Relation.PULLING, Relation.PUSHING)
        for i, j in graph.edges(relation)
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"labels={graph.n_labels} alpha={float(graph.alpha)!r}\n")
        for i, j, sign in rows:
            f.write(f"{i} {j} {sign}\n")
    return path


def read_edge_list(path: Path) -> RelationGraph:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetFormatError(f"cannot read graph file: {e}", path) from e
    if not lines:
        raise DatasetFormatError("empty graph file", path, 1)

    header = dict(part.split("=", 1) for part in lines[0].split() if "=" in part)
    try:
        n_labels = int(header["labels"])
        alpha = float(header.get("alpha", 0.05))
    except (KeyError, ValueError) as e:
        raise DatasetFormatError("header must read 'labels=<L> alpha=<a>'", path, 1) from e

    plus, minus = [], []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("+", "-"):
            raise DatasetFormatError(f"expected '<i> <j> <+|->', got '{line}'", path, line_no)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError as e:
            raise DatasetFormatError(f"non-integer label index in '{line}'", path, line_no) from e
        if not (0 <= i < j < n_labels):
            raise DatasetFormatError(f"edge ({i}, {j}) must satisfy 0 <= i < j < {n_labels}", path, line_no)
        (plus if parts[2] == "+" else minus).append((i, j))
    return graph_from_edges(n_labels, plus, minus, alpha=alpha)
