"""Two-covariance PLDA: training, projection, pairwise LLR scoring and sampling.

In the projected space ``u = V x - b`` the within-speaker covariance is the
identity and the between-speaker covariance is ``diag(psi)``. For one
dimension with speaker variance ``psi`` and a pair ``(a, c)``::

    llr = log(psi + 1) - 0.5 log(2 psi + 1)
          + alpha * a * c - gamma * (a^2 + c^2)

    alpha = psi / (2 psi + 1)
    gamma = psi^2 / (2 (psi + 1) (2 psi + 1))

which is the log ratio of the zero-mean joint Gaussian with covariance
``[[psi+1, psi], [psi, psi+1]]`` to two independent ``N(0, psi+1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
import scipy.linalg

from diarclust.core_io import FormatError, atomic_write_text, format_row
from diarclust.preprocess import PcaTransform, fix_signs, read_numeric_file


@dataclass
class PldaModel:
    mean: np.ndarray
    diagonalizer: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.diagonalizer = np.asarray(self.diagonalizer, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)
        d = self.mean.shape[0]
        if self.diagonalizer.shape != (d, d) or self.psi.shape != (d,):
            raise ValueError("inconsistent PLDA dimensions")
        if np.any(self.psi < 0):
            raise ValueError("psi must be nonnegative")
        if not np.linalg.cond(self.diagonalizer) < 1.0 / np.finfo(np.float64).eps:
            raise ValueError("PLDA diagonalizer is singular")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def bias(self) -> np.ndarray:
        return self.diagonalizer @ self.mean

    @property
    def loading(self) -> np.ndarray:
        """``A = V^-1``, mapping latent space back to embedding space."""
        return np.linalg.inv(self.diagonalizer)

    def covariances(self) -> tuple[np.ndarray, np.ndarray]:
        """Within- and between-class covariances in the embedding space."""
        a = self.loading
        return a @ a.T, (a * self.psi) @ a.T


def _diagonalize(mean, within, between) -> PldaModel:
    within = 0.5 * (within + within.T)
    between = 0.5 * (between + between.T)
    w_evals = np.linalg.eigvalsh(within)
    if w_evals[0] <= 1e-10 * max(w_evals[-1], 1e-300):
        raise ValueError("within-class covariance is singular")
    evals, evecs = scipy.linalg.eigh(between, within)
    order = np.argsort(-evals, kind="stable")
    diag = fix_signs(evecs[:, order].T)
    return PldaModel(mean=mean, diagonalizer=diag, psi=np.maximum(evals[order], 0.0))


def fit_plda(embeddings, labels: Sequence[Hashable]) -> PldaModel:
    """Fit from labelled vectors with unbiased random-effects moment estimates.

    With ``S`` speakers and ``N`` vectors, the within covariance is the pooled
    within-speaker scatter over ``N - S``. The speaker-mean scatter (each mean
    weighted by its count, over ``S - 1``) estimates ``n0 * B + W`` with
    ``n0 = (N - sum(n_s^2) / N) / (S - 1)``, so ``B = (that - W) / n0``. A
    generalized eigenproblem then diagonalizes both; negative eigenvalues of
    the between covariance are sampling noise and are clamped to zero.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    if x.ndim != 2 or x.shape[0] != len(labels):
        raise ValueError("embeddings must be N x d with one label per row")
    groups: dict[Hashable, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    if len(groups) < 2:
        raise ValueError("PLDA training needs at least 2 speakers")
    if any(len(idx) < 2 for idx in groups.values()):
        raise ValueError("every speaker needs at least 2 examples")
    n, d = x.shape
    n_spk = len(groups)
    mean = x.mean(axis=0)
    within = np.zeros((d, d))
    between = np.zeros((d, d))
    for idx in groups.values():
        xs = x[idx]
        mu = xs.mean(axis=0)
        dev = xs - mu
        within += dev.T @ dev
        diff = mu - mean
        between += len(idx) * np.outer(diff, diff)
    within /= n - n_spk
    counts = np.array([len(idx) for idx in groups.values()], dtype=np.float64)
    n0 = (n - np.sum(counts**2) / n) / (n_spk - 1)
    between = (between / (n_spk - 1) - within) / n0
    return _diagonalize(mean, within, between)


def reduce_plda(model: PldaModel, pca: PcaTransform) -> PldaModel:
    """Carry a PLDA model through a recording PCA ``y = basis (x - mean)``.

    The Gaussian covariances are projected and re-diagonalized, so scoring
    PCA-reduced vectors uses the marginal model in the reduced space.
    """
    if pca.in_dim != model.dim:
        raise ValueError(f"PCA input dim {pca.in_dim} does not match PLDA dim {model.dim}")
    within, between = model.covariances()
    g = pca.basis
    return _diagonalize(g @ (model.mean - pca.mean), g @ within @ g.T, g @ between @ g.T)


def project(model: PldaModel, x) -> np.ndarray:
    """``u = V x - b`` for a vector or for each row of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"PLDA expects dim {model.dim}, got {x.shape[-1]}")
    return x @ model.diagonalizer.T - model.bias


def llr_coefficients(psi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-dimension ``(const, alpha, gamma)`` of the closed-form LLR."""
    psi = np.asarray(psi, dtype=np.float64)
    const = np.log1p(psi) - 0.5 * np.log1p(2.0 * psi)
    alpha = psi / (2.0 * psi + 1.0)
    gamma = psi**2 / (2.0 * (psi + 1.0) * (2.0 * psi + 1.0))
    return const, alpha, gamma


def llr_coefficient_grads(psi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Derivatives of :func:`llr_coefficients` with respect to ``psi``."""
    psi = np.asarray(psi, dtype=np.float64)
    p1 = psi + 1.0
    p2 = 2.0 * psi + 1.0
    return 1.0 / p1 - 1.0 / p2, 1.0 / p2**2, psi * (3.0 * psi + 2.0) / (2.0 * p1**2 * p2**2)


def score_pair(model_or_psi, u_i, u_j) -> float:
    """Same-vs-different speaker log-likelihood ratio of two projected vectors."""
    psi = model_or_psi.psi if isinstance(model_or_psi, PldaModel) else np.asarray(model_or_psi, dtype=np.float64)
    u_i = np.asarray(u_i, dtype=np.float64)
    u_j = np.asarray(u_j, dtype=np.float64)
    if not (np.all(np.isfinite(u_i)) and np.all(np.isfinite(u_j))):
        raise ValueError("non-finite input to PLDA scoring")
    if u_i.shape != psi.shape or u_j.shape != psi.shape:
        raise ValueError("dimension mismatch in PLDA scoring")
    const, alpha, gamma = llr_coefficients(psi)
    return float(np.sum(const + alpha * (u_i * u_j) - gamma * (u_i**2 + u_j**2)))


def score_matrix(model_or_psi, projected) -> np.ndarray:
    """All-pairs LLR matrix, exactly symmetric."""
    psi = model_or_psi.psi if isinstance(model_or_psi, PldaModel) else np.asarray(model_or_psi, dtype=np.float64)
    u = np.asarray(projected, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != psi.shape[0]:
        raise ValueError("projected matrix must be N x d")
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite input to PLDA scoring")
    const, alpha, gamma = llr_coefficients(psi)
    quad = (u**2) @ gamma
    s = const.sum() + (u * alpha) @ u.T - quad[:, None] - quad[None, :]
    return 0.5 * (s + s.T)


def sample_speakers(model: PldaModel, n_speakers: int, rng: np.random.Generator) -> np.ndarray:
    """Latent speaker variables ``v ~ N(0, diag(psi))``, one row per speaker."""
    return rng.standard_normal((n_speakers, model.dim)) * np.sqrt(model.psi)


def sample_observations(
    model: PldaModel, latents: np.ndarray, labels: Sequence[int], rng: np.random.Generator
) -> np.ndarray:
    """Embeddings ``x = m + A u`` with ``u ~ N(v_label, I)``."""
    labels = np.asarray(labels, dtype=int)
    u = latents[labels] + rng.standard_normal((len(labels), model.dim))
    return model.mean + u @ model.loading.T


def sample_generative(
    model: PldaModel, n_speakers: int, n_segments_per_speaker: int, rng_seed
) -> tuple[np.ndarray, np.ndarray]:
    """Draw a labelled set from the PLDA generative model.

    ``rng_seed`` is an integer seed for a PCG64 generator or an existing
    ``numpy.random.Generator``. Rows are grouped by speaker.
    """
    if n_speakers < 1 or n_segments_per_speaker < 1:
        raise ValueError("need at least one speaker and one segment")
    rng = np.random.default_rng(rng_seed)
    latents = sample_speakers(model, n_speakers, rng)
    labels = np.repeat(np.arange(n_speakers), n_segments_per_speaker)
    return sample_observations(model, latents, labels, rng), labels


def save_plda(model: PldaModel, path) -> None:
    lines = [f"PLDA {model.dim}", format_row(model.mean)]
    lines += [format_row(r) for r in model.diagonalizer]
    lines.append(format_row(model.psi))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_plda(path) -> PldaModel:
    header, rows = read_numeric_file(path)
    if header[0] != "PLDA" or len(header) != 2:
        raise FormatError(path, None, "expected header 'PLDA <d>'")
    d = int(header[1])
    if len(rows) != d + 2 or any(len(r) != d for r in rows):
        raise FormatError(path, None, f"expected {d + 2} rows of width {d}")
    block = np.array(rows)
    return PldaModel(mean=block[0], diagonalizer=block[1 : d + 1], psi=block[d + 1])
