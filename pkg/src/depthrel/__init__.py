"""Scene-graph predicate prediction with fused class/location/RGB/depth features."""

from .data import (
    BoundingBox,
    Entity,
    ParseError,
    SceneDataset,
    SceneImage,
    Triple,
    ValidationError,
    parse_annotations,
    serialize_annotations,
    split_dataset,
)
from .features import (
    AblationMask,
    FeatureRecord,
    FeatureStore,
    PairInput,
    assemble_pair,
    location_features,
    read_feature_file,
    write_feature_file,
)
from .metrics import (
    PredictionSet,
    RecallReport,
    delta_report,
    macro_recall_at_k,
    micro_recall_at_k,
    per_predicate_recall,
    recall_report,
)
from .model import (
    ErmlpEModel,
    ModelConfig,
    TrainConfig,
    TrainReport,
    build_model,
    forward,
    load_checkpoint,
    predict_image,
    save_checkpoint,
    train,
)
from .nn import AdamConfig, Parameter, adam_step, finite_difference_check, xavier_init
from .synth import SynthConfig, synth_generate

__version__ = "0.1.0"

__all__ = [
    "AblationMask",
    "AdamConfig",
    "BoundingBox",
    "Entity",
    "ErmlpEModel",
    "FeatureRecord",
    "FeatureStore",
    "ModelConfig",
    "PairInput",
    "ParseError",
    "Parameter",
    "PredictionSet",
    "RecallReport",
    "SceneDataset",
    "SceneImage",
    "SynthConfig",
    "TrainConfig",
    "TrainReport",
    "Triple",
    "ValidationError",
    "adam_step",
    "assemble_pair",
    "build_model",
    "delta_report",
    "finite_difference_check",
    "forward",
    "load_checkpoint",
    "location_features",
    "macro_recall_at_k",
    "micro_recall_at_k",
    "parse_annotations",
    "per_predicate_recall",
    "predict_image",
    "read_feature_file",
    "recall_report",
    "save_checkpoint",
    "serialize_annotations",
    "split_dataset",
    "synth_generate",
    "train",
    "write_feature_file",
    "xavier_init",
]
