"""Open-world semi-supervised classification over a candidate label space.

A frozen vision-language backbone is tuned through low-rank adapters with
two pseudo-label sources for novel classes: a global top-phi% set built
once from a teacher, and per-batch candidate-set recapture.
"""

from .datamodel import DatasetSplit, LabelSpace, SampleRecord, build_split, load_manifest
from .encoders import SyntheticEncoder, SyntheticEncoderConfig, build_class_embeddings, confidence_matrix
from .estimator import SECOSClassifier
from .evaluator import EvalReport, acc_classify, acc_cluster, hungarian_match
from .bwsr import recapture_batch
from .ncsc import build_dn
from .trainer import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit", "LabelSpace", "SampleRecord", "build_split", "load_manifest",
    "SyntheticEncoder", "SyntheticEncoderConfig", "build_class_embeddings", "confidence_matrix",
    "SECOSClassifier", "EvalReport", "acc_classify", "acc_cluster", "hungarian_match",
    "recapture_batch", "build_dn", "TrainConfig", "run_training",
]
