"""Multi-modal generalized category discovery with synthesized text embeddings."""

from .cache import EmbeddingCache, export_embeddings, read_cache, write_cache
from .config import PipelineConfig
from .data import (UNLABELED, Batch, GcdSplit, Instance, SyntheticDatasetSpec, build_gcd_split,
                   make_synthetic_dataset, sample_batch, split_arrays)
from .dual import DualBranchGCD, train_dual
from .encoders import ClassTextTable, ClipEncoders, SyntheticOracleEncoders, build_encoders, build_prompt
from .evaluation import (AccReport, ClassNumberEstimator, SemiSupervisedKMeans, concat_features,
                         estimate_class_number, grouped_acc, hungarian_acc, ss_kmeans)
from .exceptions import ConfigError, InvalidStateError, ResourceExhaustedError, TrainingDivergedError
from .tes import TextEmbeddingSynthesizer, align_loss, distill_loss, train_tes

__version__ = "0.1.0"

__all__ = [
    "UNLABELED", "AccReport", "Batch", "ClassNumberEstimator", "ClassTextTable", "ClipEncoders",
    "ConfigError", "DualBranchGCD", "EmbeddingCache", "GcdSplit", "Instance", "InvalidStateError",
    "PipelineConfig", "ResourceExhaustedError", "SemiSupervisedKMeans", "SyntheticDatasetSpec",
    "SyntheticOracleEncoders", "TextEmbeddingSynthesizer", "TrainingDivergedError", "align_loss",
    "build_encoders", "build_gcd_split", "build_prompt", "concat_features", "distill_loss",
    "estimate_class_number", "export_embeddings", "grouped_acc", "hungarian_acc",
    "make_synthetic_dataset", "read_cache", "sample_batch", "split_arrays", "ss_kmeans",
    "train_dual", "train_tes", "write_cache",
]
