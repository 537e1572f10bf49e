"""Synthetic recordings drawn from a PLDA generative model.

Randomness comes from numpy's PCG64 bit generator. A run seeded with
``seed`` derives independent child streams with
``numpy.random.SeedSequence(seed).spawn(...)``, in this order: world model,
whitening development set, PLDA training set, then one stream per recording.
Identical seeds and parameters therefore give bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import ortho_group

from diarclust.core_io import RecordingEmbeddings, SpeakerSegmentation, uniform_segments
from diarclust.derscore import segments_to_segmentation
from diarclust.plda import PldaModel, sample_generative, sample_observations, sample_speakers


@dataclass(frozen=True)
class SynthConfig:
    n_recordings: int = 10
    n_speakers: int = 4
    n_segments: int = 200
    dim: int = 16
    psi: float = 3.0
    window: float = 1.5
    shift: float = 0.75
    p_stay: float = 0.9
    dev_speakers: int = 100
    dev_per_speaker: int = 10
    train_speakers: int = 300
    train_per_speaker: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.n_recordings, self.n_speakers, self.n_segments, self.dim) < 1:
            raise ValueError("counts and dimension must be positive")
        if not 0 <= self.p_stay <= 1:
            raise ValueError("p_stay must lie in [0, 1]")


@dataclass
class SynthRecording:
    embeddings: RecordingEmbeddings
    labels: np.ndarray
    reference: SpeakerSegmentation


@dataclass
class SynthCorpus:
    world: PldaModel
    dev: np.ndarray
    train: np.ndarray
    train_labels: np.ndarray
    recordings: list[SynthRecording]


def make_world(dim: int, psi, rng: np.random.Generator) -> PldaModel:
    """A random embedding-space PLDA model with the given speaker variances."""
    psi = np.broadcast_to(np.asarray(psi, dtype=np.float64), (dim,)).copy()
    rot = ortho_group.rvs(dim, random_state=rng) if dim > 1 else np.ones((1, 1))
    scales = rng.uniform(0.5, 2.0, size=dim)
    loading = rot * scales
    mean = rng.normal(scale=2.0, size=dim)
    return PldaModel(mean=mean, diagonalizer=np.linalg.inv(loading), psi=psi)


def markov_turns(n_segments: int, n_speakers: int, p_stay: float, rng: np.random.Generator) -> np.ndarray:
    """Speaker index per segment; on a switch the next speaker is uniform over the others."""
    labels = np.empty(n_segments, dtype=int)
    labels[0] = rng.integers(n_speakers)
    for i in range(1, n_segments):
        if n_speakers == 1 or rng.random() < p_stay:
            labels[i] = labels[i - 1]
        else:
            step = rng.integers(1, n_speakers)
            labels[i] = (labels[i - 1] + step) % n_speakers
    return labels


def segment_grid(n_segments: int, window: float, shift: float):
    """The first ``n_segments`` full sliding windows."""
    spans = uniform_segments((n_segments - 1) * shift + window, window, shift)
    return spans[:n_segments]


def make_recording(
    world: PldaModel, cfg: SynthConfig, recording_id: str, rng: np.random.Generator
) -> SynthRecording:
    spans = segment_grid(cfg.n_segments, cfg.window, cfg.shift)
    latents = sample_speakers(world, cfg.n_speakers, rng)
    labels = markov_turns(len(spans), cfg.n_speakers, cfg.p_stay, rng)
    x = sample_observations(world, latents, labels, rng)
    rec = RecordingEmbeddings(recording_id, spans, x)
    # dense relabel so reference names follow first appearance
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(cfg.n_speakers, dtype=int)
    remap[np.unique(labels)[order]] = np.arange(len(order))
    labels = remap[labels]
    ref = segments_to_segmentation(labels, spans, recording_id, prefix="ref")
    return SynthRecording(rec, labels, ref)


def make_corpus(cfg: SynthConfig) -> SynthCorpus:
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3 + cfg.n_recordings)]
    world = make_world(cfg.dim, cfg.psi, streams[0])
    dev, _ = sample_generative(world, cfg.dev_speakers, cfg.dev_per_speaker, streams[1])
    train, train_labels = sample_generative(world, cfg.train_speakers, cfg.train_per_speaker, streams[2])
    recordings = [
        make_recording(world, cfg, f"rec{i:03d}", streams[3 + i]) for i in range(cfg.n_recordings)
    ]
    return SynthCorpus(world, dev, train, train_labels, recordings)
