"""Self-supervised joint embedding and metric learning on cluster pseudo-labels.

The network maps raw recording embeddings ``x`` (dim D) to PLDA latent
vectors ``u`` (dim d) through three affine layers::

    h = Q x + q            (whitening, q frozen at -Q mean)
    z = h / |h|            (fixed length normalization, optional)
    u = V (Gamma z) - b    (recording PCA, then PLDA diagonalizer)

and scores pairs with the closed-form PLDA LLR using a learnable ``psi``.
Training minimizes BCE between ``sigmoid(score)`` and the pseudo-label
adjacency with full-batch gradient descent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from diarclust.core_io import FormatError, RecordingEmbeddings, atomic_write_text, format_row
from diarclust.graphclust import (
    ClusterConfig,
    Clustering,
    StopCriterion,
    ahc_cluster,
    cluster_scores,
    estimate_num_clusters,
    sigmoid,
)
from diarclust.plda import PldaModel, llr_coefficient_grads, llr_coefficients, score_matrix, score_pair
from diarclust.preprocess import PcaTransform, WhiteningTransform, read_numeric_file

logger = logging.getLogger(__name__)

PARAMS = ("q", "gamma", "v", "b", "psi")


class TrainingError(RuntimeError):
    pass


@dataclass
class MetricNet:
    q: np.ndarray
    q_bias: np.ndarray
    gamma: np.ndarray
    v: np.ndarray
    b: np.ndarray
    psi: np.ndarray
    length_norm: bool = True

    @property
    def in_dim(self) -> int:
        return self.q.shape[1]

    @property
    def out_dim(self) -> int:
        return self.v.shape[0]

    def copy(self) -> "MetricNet":
        return MetricNet(**{k: (np.array(v) if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()})

    def check(self) -> None:
        for name in PARAMS + ("q_bias",):
            if not np.all(np.isfinite(getattr(self, name))):
                raise TrainingError(f"parameter {name} became non-finite")
        if np.any(self.psi < 0):
            raise TrainingError("psi went negative")


@dataclass
class TrainingConfig:
    """Self-supervision schedule.

    ``n0_method`` picks how the conservative initial cluster count is found:
    ``"ahc"`` thresholds average-linkage scores at ``initial_cluster_threshold``,
    ``"eigen"`` counts transition-matrix eigenvalues above it.
    """

    learning_rate: float = 1e-3
    epochs_per_iteration: int = 20
    outer_iterations: int = 3
    initial_cluster_threshold: float = 0.7
    n0_method: str = "eigen"
    balance_pairs: bool = False
    length_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.epochs_per_iteration < 1:
            raise ValueError("epochs_per_iteration must be positive")
        if self.outer_iterations < 0:
            raise ValueError("outer_iterations must be nonnegative")
        if self.n0_method not in ("ahc", "eigen"):
            raise ValueError(f"unknown N0 method {self.n0_method!r}")


@dataclass
class TargetAdjacency:
    target: np.ndarray
    mask: np.ndarray

    @property
    def n(self) -> int:
        return self.target.shape[0]


@dataclass
class IterationRecord:
    iteration: int
    losses: list[float]
    n_clusters: int


@dataclass
class SelfSupResult:
    clustering: Clustering
    net: MetricNet
    diagnostics: list[IterationRecord] = field(default_factory=list)
    initial_scores: np.ndarray | None = None
    final_scores: np.ndarray | None = None
    n0: int = 0

    def diagnostic_lines(self) -> list[str]:
        """``iter epoch loss n_clusters`` records."""
        return [
            f"{rec.iteration} {epoch} {loss:.9g} {rec.n_clusters}"
            for rec in self.diagnostics
            for epoch, loss in enumerate(rec.losses)
        ]


# -- network -------------------------------------------------------------------


def init_from_plda(
    wt: WhiteningTransform, pca: PcaTransform, plda: PldaModel, length_norm: bool = True
) -> MetricNet:
    """Copy the baseline chain into the network.

    ``plda`` must live in the recording's PCA space (see ``reduce_plda``). The
    PCA mean is folded into the output bias so the network reproduces the
    baseline projection exactly.
    """
    if pca.in_dim != wt.dim:
        raise ValueError(f"PCA input dim {pca.in_dim} does not match whitening dim {wt.dim}")
    if plda.dim != pca.out_dim:
        raise ValueError(f"PLDA dim {plda.dim} does not match PCA output dim {pca.out_dim}")
    v = plda.diagonalizer.copy()
    return MetricNet(
        q=wt.transform.copy(),
        q_bias=-(wt.transform @ wt.mean),
        gamma=pca.basis.copy(),
        v=v,
        b=v @ (pca.basis @ pca.mean + plda.mean),
        psi=plda.psi.copy(),
        length_norm=length_norm,
    )


def _forward(net: MetricNet, x: np.ndarray):
    h = x @ net.q.T + net.q_bias
    if net.length_norm:
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        norms = np.where(norms > 0, norms, 1.0)
        z = h / norms
    else:
        norms = None
        z = h
    g = z @ net.gamma.T
    u = g @ net.v.T - net.b
    return u, (x, norms, z, g)


def forward_embed(net: MetricNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"network expects N x {net.in_dim} input")
    return _forward(net, x)[0]


def neural_plda_score(net: MetricNet, u_i, u_j) -> float:
    return score_pair(net.psi, u_i, u_j)


def neural_score_matrix(net: MetricNet, x) -> np.ndarray:
    return score_matrix(net.psi, forward_embed(net, x))


# -- targets and loss ----------------------------------------------------------


def build_target_adjacency(pseudo: Clustering, balance_pairs: bool = False, seed: int = 0) -> TargetAdjacency:
    """Same-cluster targets; balancing subsamples the majority class of unordered pairs."""
    labels = np.asarray(pseudo.assignment)
    n = len(labels)
    target = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(target, 0.0)
    mask = ~np.eye(n, dtype=bool)
    if balance_pairs:
        iu, ju = np.triu_indices(n, k=1)
        same = target[iu, ju] == 1
        n_same, n_diff = int(same.sum()), int((~same).sum())
        if n_same and n_diff and n_same != n_diff:
            rng = np.random.default_rng(seed)
            major = np.flatnonzero(same if n_same > n_diff else ~same)
            drop = np.sort(rng.choice(major, size=len(major) - min(n_same, n_diff), replace=False))
            mask[iu[drop], ju[drop]] = False
            mask[ju[drop], iu[drop]] = False
    return TargetAdjacency(target=target, mask=mask)


def bce_loss(net: MetricNet, x, tgt: TargetAdjacency, with_grad: bool = True):
    """Mean BCE over masked pairs of ``sigmoid(score)`` against the targets.

    Returns ``(loss, grads)`` with ``grads`` keyed by ``q, gamma, v, b, psi``
    (``None`` when ``with_grad`` is false).
    """
    x = np.asarray(x, dtype=np.float64)
    n_pairs = int(tgt.mask.sum())
    if n_pairs == 0:
        raise ValueError("target mask selects no pairs")
    u, (x, norms, z, g) = _forward(net, x)
    s = score_matrix(net.psi, u)
    t = tgt.target
    w = tgt.mask.astype(np.float64)
    # log(1 + e^s) - t s is the BCE of sigmoid(s)
    loss = float(np.sum(w * (np.logaddexp(0.0, s) - t * s)) / n_pairs)
    if not with_grad:
        return loss, None

    gs = w * (sigmoid(s) - t) / n_pairs
    _, alpha, gamma_c = llr_coefficients(net.psi)
    dconst, dalpha, dgamma = llr_coefficient_grads(net.psi)
    gsym = gs + gs.T
    weight_sum = gsym.sum(axis=1)  # row sums plus column sums
    gu = gsym @ u
    grad_psi = dconst * gs.sum() + dalpha * np.sum(u * (gs @ u), axis=0) - dgamma * ((u**2).T @ weight_sum)
    du = gu * alpha - 2.0 * weight_sum[:, None] * u * gamma_c

    grad_v = du.T @ g
    grad_b = -du.sum(axis=0)
    dg = du @ net.v
    grad_gamma = dg.T @ z
    dz = dg @ net.gamma
    if net.length_norm:
        dh = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms
    else:
        dh = dz
    grad_q = dh.T @ x
    return loss, {"q": grad_q, "gamma": grad_gamma, "v": grad_v, "b": grad_b, "psi": grad_psi}


def train_iteration(net: MetricNet, x, tgt: TargetAdjacency, cfg: TrainingConfig) -> tuple[MetricNet, list[float]]:
    """Full-batch gradient descent for ``cfg.epochs_per_iteration`` steps.

    The returned trace holds the loss before each step.
    """
    net = net.copy()
    losses = []
    for epoch in range(cfg.epochs_per_iteration):
        loss, grads = bce_loss(net, x, tgt)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        losses.append(loss)
        for name in PARAMS:
            setattr(net, name, getattr(net, name) - cfg.learning_rate * grads[name])
        net.psi = np.maximum(net.psi, 0.0)
        net.check()
    return net, losses


# -- outer loop ----------------------------------------------------------------


def initial_cluster_count(scores: np.ndarray, cluster_cfg: ClusterConfig, cfg: TrainingConfig) -> int:
    if cfg.n0_method == "ahc":
        return ahc_cluster(scores, StopCriterion.threshold(cfg.initial_cluster_threshold)).n_clusters
    return estimate_num_clusters(cluster_cfg.graph(scores), cfg.initial_cluster_threshold)


def selfsup_pipeline(
    rec: RecordingEmbeddings,
    wt: WhiteningTransform,
    pca: PcaTransform,
    plda: PldaModel,
    cfg: TrainingConfig,
    stop: StopCriterion,
    cluster_cfg: ClusterConfig | None = None,
) -> SelfSupResult:
    """Alternate pseudo-labelling and metric training on one recording.

    ``rec`` holds raw embeddings; ``pca`` is the recording PCA fitted by
    ``preprocess_recording`` and ``plda`` the model reduced to that space.
    """
    cluster_cfg = cluster_cfg or ClusterConfig()
    x = rec.matrix
    net = init_from_plda(wt, pca, plda, length_norm=cfg.length_norm)
    scores = neural_score_matrix(net, x)
    initial_scores = scores
    n = rec.n

    if n == 1:
        return SelfSupResult(Clustering(np.zeros(1, dtype=int)), net, [], scores, scores, 1)

    n0 = initial_cluster_count(scores, cluster_cfg, cfg)
    if stop.kind == "count" and n0 < stop.value:
        logger.warning("%s: N0=%d below target %d; using the target", rec.recording_id, n0, int(stop.value))
        n0 = int(stop.value)
    n0 = min(n0, n)
    pseudo = cluster_scores(scores, cluster_cfg, StopCriterion.count(n0))

    diagnostics = []
    for it in range(cfg.outer_iterations):
        tgt = build_target_adjacency(pseudo, cfg.balance_pairs, seed=cfg.seed + it)
        if not tgt.mask.any():
            break
        net, losses = train_iteration(net, x, tgt, cfg)
        scores = neural_score_matrix(net, x)
        new = cluster_scores(scores, cluster_cfg, StopCriterion.count(n0))
        diagnostics.append(IterationRecord(it, losses, new.n_clusters))
        logger.debug("%s: iteration %d loss %.4f -> %.4f", rec.recording_id, it, losses[0], losses[-1])
        unchanged = np.array_equal(new.assignment, pseudo.assignment)
        pseudo = new
        if unchanged:
            break

    final = cluster_scores(scores, cluster_cfg, stop, temporal=True)
    return SelfSupResult(final, net, diagnostics, initial_scores, scores, n0)


def score_contrast(scores: np.ndarray, labels) -> float:
    """Mean sigmoid score over same-label pairs minus that over different-label pairs."""
    labels = np.asarray(labels)
    prob = sigmoid(scores)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(prob[same & off].mean() - prob[~same].mean())


# -- checkpoints ---------------------------------------------------------------


def save_metricnet(net: MetricNet, path) -> None:
    d, dim = net.gamma.shape
    lines = [f"# length_norm={int(net.length_norm)}", f"METRICNET {dim} {d}"]
    lines += [format_row(r) for r in net.q]
    lines.append(format_row(net.q_bias))
    lines += [format_row(r) for r in net.gamma]
    lines += [format_row(r) for r in net.v]
    lines.append(format_row(net.b))
    lines.append(format_row(net.psi))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_metricnet(path) -> MetricNet:
    length_norm = True
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            if raw.startswith("# length_norm="):
                length_norm = raw.strip().endswith("1")
                break
    header, rows = read_numeric_file(path)
    if header[0] != "METRICNET" or len(header) != 3:
        raise FormatError(path, None, "expected header 'METRICNET <D> <d>'")
    dim, d = int(header[1]), int(header[2])
    widths = [dim] * dim + [dim] + [dim] * d + [d] * d + [d, d]
    if len(rows) != len(widths) or any(len(r) != w for r, w in zip(rows, widths)):
        raise FormatError(path, None, "checkpoint block sizes do not match the header")
    blocks = iter(rows)

    def take(count):
        return np.array([next(blocks) for _ in range(count)], dtype=np.float64)

    q = take(dim)
    q_bias = take(1)[0]
    gamma = take(d)
    v = take(d)
    b = take(1)[0]
    psi = take(1)[0]
    return MetricNet(q=q, q_bias=q_bias, gamma=gamma, v=v, b=b, psi=psi, length_norm=length_norm)
