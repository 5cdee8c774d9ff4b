"""Self-supervised cross-modal categorization: a small CNN and a count-based
Bayes text model jointly cluster images and caption words into a shared binary
cluster space, with CAM-based localization and a full evaluation battery on a
bundled synthetic shapes world.
"""

from .data import GoldResources, MultimodalSample, WorldSpec, generate_dataset, load_gold, load_image, load_manifest
from .grad import AdamState, Node, Tape, adam_step, backward, bce_loss
from .metrics import (
    MetricsReport,
    build_class_map,
    clustering_fscore,
    concreteness_eval,
    induced_clustering,
    iou,
    kmeans,
    localization_eval,
    mean_association_strength,
    multilabel_eval,
    pearson,
    random_boxes,
    random_clustering,
    textonly_concreteness,
)
from .text import CooccurrenceTable, TextConfig, WordAssignment, load_counts, save_counts
from .trainer import TrainConfig, TrainLog, fit, load_config_file, tokenize, train_step
from .vision import (
    BoundingBox,
    Cam,
    EncoderConfig,
    Network,
    compute_cam,
    extract_box,
    load_checkpoint,
    predict_clusters,
    save_checkpoint,
    train_batch,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BoundingBox",
    "Cam",
    "CooccurrenceTable",
    "EncoderConfig",
    "GoldResources",
    "MetricsReport",
    "MultimodalSample",
    "Network",
    "Node",
    "Tape",
    "TextConfig",
    "TrainConfig",
    "TrainLog",
    "WordAssignment",
    "WorldSpec",
    "adam_step",
    "backward",
    "bce_loss",
    "build_class_map",
    "clustering_fscore",
    "compute_cam",
    "concreteness_eval",
    "extract_box",
    "fit",
    "generate_dataset",
    "induced_clustering",
    "iou",
    "kmeans",
    "load_checkpoint",
    "load_config_file",
    "load_counts",
    "load_gold",
    "load_image",
    "load_manifest",
    "localization_eval",
    "mean_association_strength",
    "multilabel_eval",
    "pearson",
    "predict_clusters",
    "random_boxes",
    "random_clustering",
    "save_checkpoint",
    "save_counts",
    "textonly_concreteness",
    "tokenize",
    "train_batch",
    "train_step",
    "__version__",
]
