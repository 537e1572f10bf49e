"""Speaker diarization clustering with self-supervised neural PLDA scoring.

Precomputed segment embeddings are conditioned (whitening, length norm,
recording PCA), scored with a two-covariance PLDA model, clustered with
path integral clustering, and optionally refined by training the embedding
transform and PLDA metric on the clustering's own pseudo-labels.
"""

from diarclust.core_io import (
    RecordingEmbeddings,
    SegmentSpan,
    SpeakerSegmentation,
    read_embeddings,
    read_rttm,
    uniform_segments,
    write_embeddings,
    write_rttm,
)
from diarclust.derscore import DerReport, compute_der, segments_to_segmentation
from diarclust.graphclust import (
    AffinityGraph,
    Clustering,
    ahc_cluster,
    build_graph,
    estimate_num_clusters,
    pic_cluster,
    temporal_continuity,
)
from diarclust.plda import PldaModel, fit_plda, project, score_matrix, score_pair
from diarclust.preprocess import (
    PcaTransform,
    WhiteningTransform,
    fit_recording_pca,
    fit_whitening,
    length_normalize,
    preprocess_recording,
)
from diarclust.selfsup import MetricNet, TrainingConfig, init_from_plda, selfsup_pipeline

__version__ = "0.1.0"

__all__ = [
    "AffinityGraph",
    "Clustering",
    "DerReport",
    "MetricNet",
    "PcaTransform",
    "PldaModel",
    "RecordingEmbeddings",
    "SegmentSpan",
    "SpeakerSegmentation",
    "TrainingConfig",
    "WhiteningTransform",
    "ahc_cluster",
    "build_graph",
    "compute_der",
    "estimate_num_clusters",
    "fit_plda",
    "fit_recording_pca",
    "fit_whitening",
    "init_from_plda",
    "length_normalize",
    "pic_cluster",
    "preprocess_recording",
    "project",
    "read_embeddings",
    "read_rttm",
    "score_matrix",
    "score_pair",
    "segments_to_segmentation",
    "selfsup_pipeline",
    "temporal_continuity",
    "uniform_segments",
    "write_embeddings",
    "write_rttm",
]
