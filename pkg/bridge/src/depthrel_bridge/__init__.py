"""Image-side bridge for the relation engine: depth maps, embeddings, conversion."""

from .convert import VgSchemaError, convert_vg_annotations
from .depth import (
    DepthEstimator,
    DepthMap,
    DepthWeightsError,
    ImageRecord,
    generate_depth,
    load_depth_estimator,
    load_images,
)
from .extract import (
    Backbone,
    BackboneWeightsError,
    build_depth_backbone,
    build_feature_file,
    build_rgb_backbone,
    extract_depth_features,
    extract_rgb_features,
)
from .formats import (
    AnnotationSet,
    EntityRef,
    ImageRef,
    read_annotation_file,
    write_annotation_file,
    write_feature_file,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet",
    "Backbone",
    "BackboneWeightsError",
    "DepthEstimator",
    "DepthMap",
    "DepthWeightsError",
    "EntityRef",
    "ImageRecord",
    "ImageRef",
    "VgSchemaError",
    "build_depth_backbone",
    "build_feature_file",
    "build_rgb_backbone",
    "convert_vg_annotations",
    "extract_depth_features",
    "extract_rgb_features",
    "generate_depth",
    "load_depth_estimator",
    "load_images",
    "read_annotation_file",
    "write_annotation_file",
    "write_feature_file",
]
