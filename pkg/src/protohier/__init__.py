"""Hierarchical prototype representation learning on embedding vectors."""

from .data_io import (
    EmbeddingSet,
    read_embeddings,
    read_labels,
    write_embeddings,
    write_embeddings_csv,
    write_labels,
)
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
    IoError,
    MathError,
    ProtohierError,
    ShapeError,
    StateError,
)
from .evaluate import ClusterReport, KnnReport, cluster_eval, hungarian_match, knn_eval
from .hkmeans import (
    KMeansResult,
    PrototypeTree,
    extract_and_cluster,
    hierarchical_kmeans,
    kmeans,
    read_tree,
    write_tree,
)
from .model import (
    TrainState,
    build_state,
    infonce_loss,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .prototree import (
    SemanticPath,
    all_paths_matrix,
    positive_path,
    sample_negative_paths,
    sample_negative_roots,
    validate_tree,
)
from .spd import GradCheckReport, path_similarity, spd_grad_check, spd_loss
from .synth import HierarchySpec, SynthResult, generate
from .trainer import TrainConfig, default_epoch_split, train

__version__ = "0.1.0"

__all__ = [
    "ClusterReport",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "EmbeddingSet",
    "FormatError",
    "GradCheckReport",
    "HierarchySpec",
    "IoError",
    "KMeansResult",
    "KnnReport",
    "MathError",
    "ProtohierError",
    "PrototypeTree",
    "SemanticPath",
    "ShapeError",
    "StateError",
    "SynthResult",
    "TrainConfig",
    "TrainState",
    "all_paths_matrix",
    "build_state",
    "cluster_eval",
    "default_epoch_split",
    "extract_and_cluster",
    "generate",
    "hierarchical_kmeans",
    "hungarian_match",
    "infonce_loss",
    "kmeans",
    "knn_eval",
    "load_checkpoint",
    "path_similarity",
    "positive_path",
    "read_embeddings",
    "read_labels",
    "read_tree",
    "sample_negative_paths",
    "sample_negative_roots",
    "save_checkpoint",
    "sgd_step",
    "spd_grad_check",
    "spd_loss",
    "train",
    "validate_tree",
    "write_embeddings",
    "write_embeddings_csv",
    "write_labels",
    "write_tree",
]
