"""Embedding conditioning: whitening, length normalization, recording PCA."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diarclust.core_io import FormatError, RecordingEmbeddings, atomic_write_text, format_row

logger = logging.getLogger(__name__)

EIG_FLOOR = 1e-8


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    vectors = np.array(vectors, dtype=np.float64)
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


@dataclass
class WhiteningTransform:
    mean: np.ndarray
    transform: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def apply(self, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data, dtype=np.float64)
        if data.shape[-1] != self.dim:
            raise ValueError(f"whitening expects dim {self.dim}, got {data.shape[-1]}")
        return (data - self.mean) @ self.transform.T


@dataclass
class PcaTransform:
    mean: np.ndarray
    basis: np.ndarray
    explained_variance: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def out_dim(self) -> int:
        return self.basis.shape[0]

    def apply(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) @ self.basis.T


def fit_whitening(data) -> WhiteningTransform:
    """Fit ``Lambda^-1/2 U^T`` from the eigendecomposition of the sample covariance.

    Eigenvalues are floored at ``1e-8 * max eigenvalue`` so rank-deficient
    sets still give a finite transform.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("whitening needs at least 2 vectors")
    n, dim = data.shape
    if n < dim + 1:
        logger.warning("whitening fitted on %d vectors of dim %d; covariance is rank deficient", n, dim)
    mean = data.mean(axis=0)
    cov = np.cov(data, rowvar=False).reshape(dim, dim)
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1]
    evecs = fix_signs(evecs[:, ::-1].T)
    top = max(evals[0], 0.0)
    floor = EIG_FLOOR * top if top > 0 else EIG_FLOOR
    evals = np.maximum(evals, floor)
    return WhiteningTransform(mean=mean, transform=evecs / np.sqrt(evals)[:, None])


def length_normalize(x: np.ndarray) -> np.ndarray:
    """Scale vectors (rows) to unit Euclidean norm; zero vectors stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


@dataclass(frozen=True)
class PcaMode:
    """Either keep ``dims`` components or the smallest set reaching ``fraction`` of variance."""

    dims: int | None = None
    fraction: float | None = None

    def __post_init__(self):
        if (self.dims is None) == (self.fraction is None):
            raise ValueError("PcaMode needs exactly one of dims or fraction")
        if self.dims is not None and self.dims < 1:
            raise ValueError("PCA dims must be >= 1")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise ValueError("PCA variance fraction must be in (0, 1]")

    @classmethod
    def fixed_dims(cls, d: int) -> "PcaMode":
        return cls(dims=int(d))

    @classmethod
    def variance_fraction(cls, f: float) -> "PcaMode":
        return cls(fraction=float(f))

    @classmethod
    def parse(cls, text: str) -> "PcaMode":
        """``dims:30`` or ``var:0.3``."""
        kind, _, value = text.partition(":")
        if kind == "dims":
            return cls.fixed_dims(int(value))
        if kind in ("var", "variance"):
            return cls.variance_fraction(float(value))
        raise ValueError(f"unknown PCA mode {text!r}")

    def __str__(self) -> str:
        return f"dims:{self.dims}" if self.dims is not None else f"var:{self.fraction:g}"


def fit_recording_pca(rec: RecordingEmbeddings | np.ndarray, mode: PcaMode) -> PcaTransform:
    data = rec.matrix if isinstance(rec, RecordingEmbeddings) else np.asarray(rec, dtype=np.float64)
    n, dim = data.shape
    if n < 2:
        raise ValueError("recording PCA needs at least 2 segments")
    mean = data.mean(axis=0)
    _, sing, vt = np.linalg.svd(data - mean, full_matrices=False)
    variance = sing**2 / (n - 1)
    cap = min(n - 1, dim)
    if mode.dims is not None:
        keep = min(mode.dims, cap)
    else:
        cumulative = np.cumsum(variance)
        # tolerance guards against a cumulative sum landing a hair below the target
        target = mode.fraction * variance.sum() * (1 - 1e-12)
        keep = min(int(np.searchsorted(cumulative, target)) + 1, cap)
    keep = max(keep, 1)
    basis = fix_signs(vt[:keep])
    return PcaTransform(mean=mean, basis=basis, explained_variance=variance[:keep].copy())


def preprocess_recording(
    rec: RecordingEmbeddings, wt: WhiteningTransform, pca_mode: PcaMode
) -> tuple[RecordingEmbeddings, PcaTransform]:
    """Whiten, length-normalize, then fit and apply a recording-level PCA."""
    if rec.dim != wt.dim:
        raise ValueError(f"recording {rec.recording_id!r} has dim {rec.dim}, whitening expects {wt.dim}")
    normed = length_normalize(wt.apply(rec.matrix))
    pca = fit_recording_pca(normed, pca_mode)
    return rec.with_matrix(pca.apply(normed)), pca


# -- persistence ---------------------------------------------------------------


def read_numeric_file(path) -> tuple[list[str], list[list[float]]]:
    """Return the header tokens and the numeric rows of a transform file."""
    header = None
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split()
                continue
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError:
                raise FormatError(path, lineno, "bad number") from None
    if header is None:
        raise FormatError(path, None, "missing header")
    return header, rows


def _take(path, rows, start, count, width):
    block = rows[start : start + count]
    if len(block) != count or any(len(r) != width for r in block):
        raise FormatError(path, None, f"expected {count} rows of width {width}")
    return np.array(block, dtype=np.float64).reshape(count, width)


def save_whitening(wt: WhiteningTransform, path) -> None:
    lines = [f"WHITEN {wt.dim}", format_row(wt.mean)] + [format_row(r) for r in wt.transform]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_whitening(path) -> WhiteningTransform:
    header, rows = read_numeric_file(path)
    if header[0] != "WHITEN" or len(header) != 2:
        raise FormatError(path, None, "expected header 'WHITEN <D>'")
    dim = int(header[1])
    mean = _take(path, rows, 0, 1, dim)[0]
    return WhiteningTransform(mean=mean, transform=_take(path, rows, 1, dim, dim))


def save_pca(pca: PcaTransform, path) -> None:
    lines = [f"PCA {pca.out_dim} {pca.in_dim}", format_row(pca.mean)]
    lines += [format_row(r) for r in pca.basis]
    lines.append(format_row(pca.explained_variance))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_pca(path) -> PcaTransform:
    header, rows = read_numeric_file(path)
    if header[0] != "PCA" or len(header) != 3:
        raise FormatError(path, None, "expected header 'PCA <d> <D>'")
    d, dim = int(header[1]), int(header[2])
    mean = _take(path, rows, 0, 1, dim)[0]
    basis = _take(path, rows, 1, d, dim)
    var = _take(path, rows, 1 + d, 1, d)[0]
    return PcaTransform(mean=mean, basis=basis, explained_variance=var)
