"""Graph construction, path integral clustering (PIC), and average-linkage AHC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

COSINE_FLOOR = 1e-12
SOLVE_TOL = 1e-8


class PathIntegralError(RuntimeError):
    pass


@dataclass
class AffinityGraph:
    weights: np.ndarray
    transition: np.ndarray
    k: int
    sigma: float

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise ValueError(f"sigma must lie in (0, 1), got {self.sigma}")

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass
class Clustering:
    """Partition of node indices.

    ``merge_log`` entries are ``(a, b, affinity)`` where ``a < b`` are the
    smallest node indices of the two clusters merged at that step.
    """

    assignment: np.ndarray
    merge_log: list[tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=int)
        ids = np.unique(self.assignment)
        if len(ids) and not np.array_equal(ids, np.arange(len(ids))):
            raise ValueError("cluster ids must be 0..n_clusters-1 without gaps")

    @property
    def n_clusters(self) -> int:
        return int(self.assignment.max()) + 1 if len(self.assignment) else 0

    @property
    def clusters(self) -> list[list[int]]:
        return clusters_from_assignment(self.assignment)

    @classmethod
    def from_clusters(cls, clusters: Iterable[Iterable[int]], n: int, merge_log=None) -> "Clustering":
        """Number clusters by their smallest member."""
        ordered = sorted((sorted(c) for c in clusters), key=lambda c: c[0])
        assignment = np.full(n, -1, dtype=int)
        for cid, members in enumerate(ordered):
            assignment[members] = cid
        if np.any(assignment < 0):
            raise ValueError("clusters do not cover every node")
        return cls(assignment, list(merge_log or []))


def clusters_from_assignment(assignment) -> list[list[int]]:
    assignment = np.asarray(assignment)
    return [np.flatnonzero(assignment == c).tolist() for c in range(int(assignment.max()) + 1)]


@dataclass(frozen=True)
class StopCriterion:
    """When agglomeration ends.

    ``count`` stops at a cluster count, ``eigen`` derives the count from the
    transition-matrix spectrum, ``threshold`` stops AHC once the best
    average-linkage score falls below the value.
    """

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("count", "eigen", "threshold"):
            raise ValueError(f"unknown stop criterion {self.kind!r}")
        if self.kind == "count" and (self.value < 1 or int(self.value) != self.value):
            raise ValueError("target count must be a positive integer")

    @classmethod
    def count(cls, n: int) -> "StopCriterion":
        return cls("count", int(n))

    @classmethod
    def eigen(cls, th: float) -> "StopCriterion":
        return cls("eigen", float(th))

    @classmethod
    def threshold(cls, th: float) -> "StopCriterion":
        return cls("threshold", float(th))

    @classmethod
    def parse(cls, text: str) -> "StopCriterion":
        kind, _, value = text.partition(":")
        if kind == "count":
            return cls.count(int(value))
        return cls(kind, float(value))

    def __str__(self) -> str:
        return f"{self.kind}:{int(self.value) if self.kind == 'count' else self.value:g}"


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def scores_to_weights(scores, score_to_weight: str = "sigmoid") -> np.ndarray:
    if score_to_weight == "sigmoid":
        return sigmoid(scores)
    if score_to_weight in ("cosine", "shifted_cosine"):
        return np.maximum((1.0 + np.asarray(scores, dtype=np.float64)) / 2.0, COSINE_FLOOR)
    raise ValueError(f"unknown score-to-weight mapping {score_to_weight!r}")


def knn_sparsify(weights: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries of each row (ties to the lower column)."""
    n = weights.shape[0]
    order = np.argsort(-weights, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(weights)
    rows = np.repeat(np.arange(n), k)
    out[rows, order.ravel()] = weights[rows, order.ravel()]
    return out


def graph_from_weights(weights, sigma: float, k: int | None = None) -> AffinityGraph:
    """Row-normalize a nonnegative weight matrix into a graph, optionally K-NN sparsified."""
    w = np.array(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("weight matrix must be square")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    n = w.shape[0]
    if k is not None:
        w = knn_sparsify(w, k)
    else:
        k = int(np.max(np.count_nonzero(w, axis=1)))
    sums = w.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("every node needs at least one positive outgoing weight")
    return AffinityGraph(weights=w, transition=w / sums, k=k, sigma=sigma)


def build_graph(scores, k: int, sigma: float, score_to_weight: str = "sigmoid") -> AffinityGraph:
    """Directed K-NN graph from a pairwise score matrix; self-weights are zero."""
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if n < 2:
        raise ValueError("need at least 2 nodes")
    if not 1 <= k < n:
        raise ValueError(f"K must satisfy 1 <= K < N (K={k}, N={n})")
    w = scores_to_weights(s, score_to_weight)
    np.fill_diagonal(w, 0.0)
    return graph_from_weights(w, sigma, k)


# -- path integrals ------------------------------------------------------------


def _solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    y = np.linalg.solve(matrix, rhs)
    resid = np.max(np.abs(matrix @ y - rhs))
    if resid > SOLVE_TOL:
        raise PathIntegralError(f"path integral solve residual {resid:.3g} exceeds {SOLVE_TOL}")
    return y


def path_integral(g: AffinityGraph, cluster: Iterable[int]) -> float:
    """``1^T (I - sigma P_C)^-1 1 / |C|^2`` over the sub-graph of ``cluster``."""
    idx = sorted(cluster)
    if not idx:
        raise ValueError("cluster must be nonempty")
    n = len(idx)
    m = np.eye(n) - g.sigma * g.transition[np.ix_(idx, idx)]
    return float(_solve(m, np.ones(n)).sum() / n**2)


def _conditional_pair(g: AffinityGraph, ca: Sequence[int], cb: Sequence[int]) -> tuple[float, float]:
    union = sorted(set(ca) | set(cb))
    pos = {node: i for i, node in enumerate(union)}
    sel = np.zeros((len(union), 2))
    sel[[pos[v] for v in ca], 0] = 1.0
    sel[[pos[v] for v in cb], 1] = 1.0
    m = np.eye(len(union)) - g.sigma * g.transition[np.ix_(union, union)]
    y = _solve(m, sel)
    return float(sel[:, 0] @ y[:, 0]) / len(ca) ** 2, float(sel[:, 1] @ y[:, 1]) / len(cb) ** 2


def _check_disjoint(ca, cb):
    if not ca or not cb:
        raise ValueError("clusters must be nonempty")
    if set(ca) & set(cb):
        raise ValueError("clusters overlap")


def conditional_path_integral(g: AffinityGraph, ca: Iterable[int], cb: Iterable[int]) -> float:
    """Path integral of ``ca`` measured inside the sub-graph of ``ca | cb``."""
    ca, cb = list(ca), list(cb)
    _check_disjoint(ca, cb)
    return _conditional_pair(g, ca, cb)[0]


def has_cross_edges(g: AffinityGraph, ca: Sequence[int], cb: Sequence[int]) -> bool:
    p = g.transition
    return bool(np.any(p[np.ix_(ca, cb)]) or np.any(p[np.ix_(cb, ca)]))


def pic_affinity(
    g: AffinityGraph,
    ca: Iterable[int],
    cb: Iterable[int],
    s_a: float | None = None,
    s_b: float | None = None,
) -> float:
    """Sum of the two incremental path integrals; exactly 0 without cross edges.

    ``s_a`` and ``s_b`` are optional cached values of ``path_integral``.
    """
    ca, cb = sorted(ca), sorted(cb)
    _check_disjoint(ca, cb)
    if not has_cross_edges(g, ca, cb):
        return 0.0
    if s_a is None:
        s_a = path_integral(g, ca)
    if s_b is None:
        s_b = path_integral(g, cb)
    c_a, c_b = _conditional_pair(g, ca, cb)
    return (c_a - s_a) + (c_b - s_b)


def nearest_neighbor_clusters(g: AffinityGraph) -> list[list[int]]:
    """Weakly connected components of the directed best-neighbour graph."""
    n = g.n
    best = np.argmax(g.weights, axis=1)
    adj = csr_matrix((np.ones(n), (np.arange(n), best)), shape=(n, n))
    _, labels = connected_components(adj, directed=True, connection="weak")
    return sorted(clusters_from_assignment(labels), key=lambda c: c[0])


def pic_cluster(g: AffinityGraph, stop: StopCriterion, initial: Sequence[Sequence[int]] | None = None) -> Clustering:
    """Greedy path integral clustering from nearest-neighbour initial clusters.

    Each step merges the pair with the largest affinity (ties go to the pair
    with the smallest member indices) and recomputes only the affinities of
    the merged cluster.
    """
    if stop.kind == "count":
        target = int(stop.value)
    elif stop.kind == "eigen":
        target = estimate_num_clusters(g, stop.value)
    else:
        raise ValueError("PIC stops on a cluster count or an eigenvalue threshold")
    clusters = [sorted(c) for c in (initial if initial is not None else nearest_neighbor_clusters(g))]
    clusters.sort(key=lambda c: c[0])
    n_c = len(clusters)
    if target > n_c:
        logger.warning("target of %d clusters exceeds the %d initial clusters; no merging", target, n_c)
        return Clustering.from_clusters(clusters, g.n)

    self_pi = [path_integral(g, c) for c in clusters]
    table = np.full((n_c, n_c), -np.inf)
    for a in range(n_c):
        for b in range(a + 1, n_c):
            table[a, b] = pic_affinity(g, clusters[a], clusters[b], self_pi[a], self_pi[b])
    active = list(range(n_c))
    merge_log = []
    while len(active) > target:
        flat = int(np.argmax(table))
        a, b = divmod(flat, n_c)
        merge_log.append((clusters[a][0], clusters[b][0], float(table[a, b])))
        clusters[a] = sorted(clusters[a] + clusters[b])
        clusters[b] = []
        active.remove(b)
        table[b, :] = -np.inf
        table[:, b] = -np.inf
        self_pi[a] = path_integral(g, clusters[a])
        for c in active:
            if c == a:
                continue
            lo, hi = min(a, c), max(a, c)
            table[lo, hi] = pic_affinity(g, clusters[lo], clusters[hi], self_pi[lo], self_pi[hi])
    return Clustering.from_clusters([clusters[i] for i in active], g.n, merge_log)


def estimate_num_clusters(g: AffinityGraph, th: float) -> int:
    """Number of transition-matrix eigenvalue moduli above ``th`` (at least 1)."""
    moduli = np.abs(np.linalg.eigvals(g.transition))
    return max(1, int(np.count_nonzero(moduli > th)))


def ahc_cluster(scores, stop: StopCriterion) -> Clustering:
    """Average-linkage agglomeration on raw similarity scores."""
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n):
        raise ValueError("score matrix must be square")
    if stop.kind == "count":
        target, th = int(stop.value), -np.inf
    elif stop.kind == "threshold":
        target, th = 1, stop.value
    else:
        raise ValueError("AHC stops on a cluster count or a score threshold")
    if target > n:
        logger.warning("target of %d clusters exceeds %d points; no merging", target, n)
        target = n

    sums = s.copy()
    sizes = np.ones(n)
    alive = np.ones(n, dtype=bool)
    members = [[i] for i in range(n)]
    merge_log = []
    iu = np.triu(np.ones((n, n), dtype=bool), k=1)
    n_c = n
    while n_c > target:
        link = sums / np.outer(sizes, sizes)
        link[~(iu & alive[:, None] & alive[None, :])] = -np.inf
        flat = int(np.argmax(link))
        a, b = divmod(flat, n)
        best = link[a, b]
        if best < th:
            break
        merge_log.append((a, b, float(best)))
        sums[a, :] += sums[b, :]
        sums[:, a] += sums[:, b]
        sizes[a] += sizes[b]
        alive[b] = False
        members[a] += members[b]
        n_c -= 1
    return Clustering.from_clusters([members[i] for i in range(n) if alive[i]], n, merge_log)


def temporal_continuity(scores, beta: float, n_b: int) -> np.ndarray:
    """Scale ``s(i, j)`` by ``beta ** min(n_b, |i - j|)``."""
    if not 0 < beta < 1:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if n_b < 1:
        raise ValueError("n_b must be a positive integer")
    s = np.asarray(scores, dtype=np.float64)
    idx = np.arange(s.shape[0])
    lag = np.minimum(np.abs(idx[:, None] - idx[None, :]), n_b)
    return s * beta**lag


@dataclass(frozen=True)
class ClusterConfig:
    """How a score matrix becomes a clustering.

    ``beta`` and ``n_b`` enable temporal continuity; both must be given
    together. ``k`` is clamped to ``N - 1`` for short recordings.
    """

    method: str = "pic"
    k: int = 30
    sigma: float = 0.1
    score_weight: str = "sigmoid"
    beta: float | None = None
    n_b: int | None = None

    def __post_init__(self):
        if self.method not in ("pic", "ahc"):
            raise ValueError(f"unknown clustering method {self.method!r}")
        if (self.beta is None) != (self.n_b is None):
            raise ValueError("temporal continuity needs both beta and n_b")

    def graph(self, scores) -> AffinityGraph:
        n = np.asarray(scores).shape[0]
        k = min(self.k, n - 1)
        if k < self.k:
            logger.info("K=%d reduced to %d for a %d-segment recording", self.k, k, n)
        return build_graph(scores, k, self.sigma, self.score_weight)


def cluster_scores(
    scores, cfg: ClusterConfig, stop: StopCriterion, temporal: bool = False
) -> Clustering:
    """Cluster a score matrix with AHC or PIC, optionally after temporal continuity."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[0] == 1:
        return Clustering(np.zeros(1, dtype=int))
    if temporal and cfg.beta is not None:
        s = temporal_continuity(s, cfg.beta, cfg.n_b)
    if cfg.method == "ahc":
        if stop.kind == "eigen":
            stop = StopCriterion.count(estimate_num_clusters(cfg.graph(s), stop.value))
        return ahc_cluster(s, stop)
    if stop.kind == "threshold":
        stop = StopCriterion.count(ahc_cluster(s, stop).n_clusters)
    return pic_cluster(cfg.graph(s), stop)
