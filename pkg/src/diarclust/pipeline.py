"""End-to-end recording processing shared by the command line and the tests."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from diarclust.core_io import RecordingEmbeddings, SpeakerSegmentation
from diarclust.derscore import segments_to_segmentation
from diarclust.graphclust import ClusterConfig, Clustering, StopCriterion, cluster_scores
from diarclust.plda import PldaModel, project, reduce_plda, score_matrix
from diarclust.preprocess import PcaMode, PcaTransform, WhiteningTransform, preprocess_recording
from diarclust.selfsup import IterationRecord, MetricNet, TrainingConfig, selfsup_pipeline

logger = logging.getLogger(__name__)

MODES = ("baseline-ahc", "baseline-pic", "selfsup-ahc", "selfsup-pic")

PRESETS: dict[str, dict[str, Any]] = {
    "meeting": {
        "k": 30,
        "sigma": 0.1,
        "pca": "dims:30",
        "ahc_threshold": 0.0,
        "eigen_threshold": 0.7,
        "n0_method": "auto",
    },
    "dihard": {
        "k": 40,
        "sigma": 0.5,
        "pca": "var:0.3",
        "ahc_threshold": -0.7,
        "eigen_threshold": 0.7,
        "n0_method": "ahc",
    },
    "custom": {},
}


@dataclass
class PipelineConfig:
    """All knobs of a run.

    ``stop`` is ``auto`` (threshold for AHC, eigenvalues for PIC), ``oracle``
    (speaker count of the reference), or an explicit ``count:N``,
    ``eigen:th`` or ``threshold:th``. ``n0_method`` ``auto`` uses the AHC
    threshold for AHC modes and the eigenvalue threshold for PIC modes.
    """

    preset: str = "meeting"
    mode: str = "selfsup-pic"
    k: int = 30
    sigma: float = 0.1
    score_weight: str = "sigmoid"
    beta: float | None = None
    n_b: int | None = None
    pca: str = "dims:30"
    ahc_threshold: float = 0.0
    eigen_threshold: float = 0.7
    n0_method: str = "auto"
    stop: str = "auto"
    learning_rate: float = 1e-3
    epochs: int = 20
    outer_iterations: int = 3
    balance_pairs: bool = False
    length_norm: bool = True
    seed: int = 0
    collar: float = 0.0
    score_overlap: bool = True
    window: float = 1.5
    shift: float = 0.75
    jobs: int = 1

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.n0_method not in ("auto", "ahc", "eigen"):
            raise ValueError(f"unknown n0_method {self.n0_method!r}")
        PcaMode.parse(self.pca)
        if self.stop not in ("auto", "oracle"):
            StopCriterion.parse(self.stop)
        self.cluster_config()

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "PipelineConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        return cls(preset=preset, **{**PRESETS[preset], **overrides})

    @property
    def method(self) -> str:
        return self.mode.split("-")[1]

    @property
    def selfsup(self) -> bool:
        return self.mode.startswith("selfsup")

    @property
    def pca_mode(self) -> PcaMode:
        return PcaMode.parse(self.pca)

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(self.method, self.k, self.sigma, self.score_weight, self.beta, self.n_b)

    def training_config(self) -> TrainingConfig:
        n0 = self.n0_method
        if n0 == "auto":
            n0 = "ahc" if self.method == "ahc" else "eigen"
        return TrainingConfig(
            learning_rate=self.learning_rate,
            epochs_per_iteration=self.epochs,
            outer_iterations=self.outer_iterations,
            initial_cluster_threshold=self.ahc_threshold if n0 == "ahc" else self.eigen_threshold,
            n0_method=n0,
            balance_pairs=self.balance_pairs,
            length_norm=self.length_norm,
            seed=self.seed,
        )

    def stop_criterion(self, n_speakers: int | None = None) -> StopCriterion:
        if self.stop == "oracle":
            if not n_speakers:
                raise ValueError("oracle stop needs a reference speaker count")
            return StopCriterion.count(n_speakers)
        if self.stop == "auto":
            if self.method == "ahc":
                return StopCriterion.threshold(self.ahc_threshold)
            return StopCriterion.eigen(self.eigen_threshold)
        return StopCriterion.parse(self.stop)

    def as_lines(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, text: str):
    types = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    if name not in types:
        raise ValueError(f"unknown config key {name!r}")
    kind = str(types[name])
    text = text.strip()
    if text.lower() == "none" and "None" in kind:
        return None
    if kind.startswith("bool"):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


def parse_config_text(text: str) -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key = key.strip().replace("-", "_")
        values[key] = _coerce(key, value)
    return values


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """Preset, then file values, then explicit overrides (``None`` overrides are ignored)."""
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    preset = values.pop("preset", "meeting")
    return PipelineConfig.from_preset(preset, **values)


@dataclass
class RecordingResult:
    recording_id: str
    clustering: Clustering
    hypothesis: SpeakerSegmentation
    scores: np.ndarray
    initial_scores: np.ndarray
    diagnostics: list[IterationRecord] = field(default_factory=list)
    net: MetricNet | None = None
    pca: PcaTransform | None = None


def baseline_scores(
    rec: RecordingEmbeddings, wt: WhiteningTransform, plda: PldaModel, pca_mode: PcaMode
) -> tuple[np.ndarray, PcaTransform, PldaModel]:
    """Preprocess one recording and score all segment pairs with PLDA.

    ``plda`` lives in the whitened, length-normalized space; it is reduced
    through the recording PCA before scoring.
    """
    reduced, pca = preprocess_recording(rec, wt, pca_mode)
    plda_r = reduce_plda(plda, pca)
    return score_matrix(plda_r, project(plda_r, reduced.matrix)), pca, plda_r


def run_recording(
    rec: RecordingEmbeddings,
    wt: WhiteningTransform,
    plda: PldaModel,
    cfg: PipelineConfig,
    n_speakers: int | None = None,
) -> RecordingResult:
    stop = cfg.stop_criterion(n_speakers)
    ccfg = cfg.cluster_config()
    scores, pca, plda_r = baseline_scores(rec, wt, plda, cfg.pca_mode)
    if cfg.selfsup:
        res = selfsup_pipeline(rec, wt, pca, plda_r, cfg.training_config(), stop, ccfg)
        clustering, final, diags, net = res.clustering, res.final_scores, res.diagnostics, res.net
        initial = res.initial_scores
    else:
        clustering = cluster_scores(scores, ccfg, stop, temporal=True)
        final = initial = scores
        diags, net = [], None
    hyp = segments_to_segmentation(clustering.assignment, rec.segments, rec.recording_id)
    return RecordingResult(rec.recording_id, clustering, hyp, final, initial, diags, net, pca)


def fit_models(dev, train, train_labels) -> tuple[WhiteningTransform, PldaModel]:
    """Whitening from development vectors, PLDA on whitened, length-normalized training vectors."""
    from diarclust.plda import fit_plda
    from diarclust.preprocess import fit_whitening, length_normalize

    wt = fit_whitening(dev)
    return wt, fit_plda(length_normalize(wt.apply(train)), train_labels)
