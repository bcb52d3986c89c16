"""Per-entity embedding extraction with pretrained backbones.

RGB embeddings come from the 4096-wide penultimate activation of VGG-16;
depth embeddings come from the 512-wide global-pool activation of ResNet-18
run on the entity's depth-map crop replicated to three channels. Both
extractors crop the entity box, resize, and run the backbone in eval mode,
so extraction is deterministic for fixed weights and inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision

from .depth import DepthMap, ImageRecord
from .formats import AnnotationSet, write_feature_file

logger = logging.getLogger(__name__)

RGB_EMBEDDING_DIM = 4096
DEPTH_EMBEDDING_DIM = 512

_IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
_IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)


class BackboneWeightsError(FileNotFoundError):
    """Backbone weights are unavailable; the message says how to supply them."""


@dataclass
class Backbone:
    module: torch.nn.Module
    embedding_dim: int
    input_size: int
    trained: bool


def build_rgb_backbone(weights: str | None = "pretrained", input_size: int = 224,
                       seed: int = 0) -> Backbone:
    """VGG-16 truncated to its penultimate 4096-wide layer.

    weights: "pretrained" downloads the ImageNet checkpoint, a path loads a
    state dict, None builds an untrained network (format testing only).
    """
    if weights == "pretrained":
        try:
            vgg = torchvision.models.vgg16(
                weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1
            )
        except Exception as exc:  # noqa: BLE001 - hub/download failures vary
            raise BackboneWeightsError(
                "could not obtain pretrained VGG-16 weights (offline?). Download "
                "vgg16-397923af.pth from the torchvision model zoo on a connected "
                "machine, then pass its path as `weights`, or pass weights=None "
                "for an untrained network (format testing only)."
            ) from exc
    else:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            vgg = torchvision.models.vgg16(weights=None)
        if weights is not None:
            vgg.load_state_dict(torch.load(weights, map_location="cpu"))
        else:
            logger.warning(
                "untrained VGG-16 backbone: RGB embeddings are not semantically "
                "meaningful, use for format testing only"
            )
    module = torch.nn.Sequential(
        vgg.features,
        vgg.avgpool,
        torch.nn.Flatten(),
        *list(vgg.classifier.children())[:-1],
    )
    module.eval()
    return Backbone(module, RGB_EMBEDDING_DIM, input_size, trained=weights is not None)


def build_depth_backbone(checkpoint: str | None = None, allow_random: bool = False,
                         input_size: int = 224, seed: int = 0) -> Backbone:
    """ResNet-18 truncated to its 512-wide global-pool activation.

    The intended checkpoint is a ResNet-18 trained on depth maps for the
    relation task; training one is out of scope here, so a randomly
    initialized fallback is available behind allow_random for format testing.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        resnet = torchvision.models.resnet18(weights=None)
    if checkpoint is not None:
        resnet.load_state_dict(torch.load(checkpoint, map_location="cpu"))
        trained = True
    elif allow_random:
        logger.warning(
            "randomly initialized depth backbone: depth embeddings are untrained, "
            "use for format testing only"
        )
        trained = False
    else:
        raise BackboneWeightsError(
            "no depth backbone checkpoint supplied. Provide a ResNet-18 state "
            "dict trained on depth maps (any checkpoint of the standard shape "
            "loads), or pass allow_random=True to use an untrained network for "
            "format testing."
        )
    module = torch.nn.Sequential(*list(resnet.children())[:-1], torch.nn.Flatten())
    module.eval()
    return Backbone(module, DEPTH_EMBEDDING_DIM, input_size, trained=trained)


def _clamped_crop(array: np.ndarray, box, width: int, height: int) -> np.ndarray | None:
    """Crop [x, y, w, h] clamped into the image, at least 1x1; None if outside."""
    x, y, w, h = box
    x0 = int(np.floor(max(0.0, min(x, width - 1))))
    y0 = int(np.floor(max(0.0, min(y, height - 1))))
    x1 = int(np.ceil(max(x0 + 1, min(x + w, width))))
    y1 = int(np.ceil(max(y0 + 1, min(y + h, height))))
    if x + w <= 0 or y + h <= 0 or x >= width or y >= height:
        return None
    return array[y0:y1, x0:x1]


def _batched_forward(module: torch.nn.Module, tensors: list[torch.Tensor],
                     batch_size: int = 8) -> np.ndarray:
    outputs = []
    with torch.no_grad():
        for start in range(0, len(tensors), batch_size):
            batch = torch.cat(tensors[start : start + batch_size], dim=0)
            outputs.append(module(batch).numpy())
    return np.concatenate(outputs, axis=0)


def extract_rgb_features(
    images: list[ImageRecord], dataset: AnnotationSet, backbone: Backbone
) -> dict[tuple[int, int], np.ndarray]:
    """(image_id, entity_id) -> 4096-wide embedding of the entity's RGB crop."""
    by_id = {record.image_id: record for record in images}
    features: dict[tuple[int, int], np.ndarray] = {}
    for scene in dataset.images:
        record = by_id.get(scene.image_id)
        if record is None:
            raise ValueError(f"no image pixels supplied for image {scene.image_id}")
        keys, tensors = [], []
        for entity in scene.entities:
            crop = _clamped_crop(record.pixels, entity.box, scene.width, scene.height)
            if crop is None:
                logger.warning(
                    "image %s entity %s: box lies outside the image, emitting zeros",
                    scene.image_id, entity.entity_id,
                )
                features[(scene.image_id, entity.entity_id)] = np.zeros(
                    backbone.embedding_dim, dtype=np.float32
                )
                continue
            tensor = torch.from_numpy(crop.copy()).permute(2, 0, 1).unsqueeze(0).float() / 255.0
            tensor = F.interpolate(
                tensor, size=(backbone.input_size, backbone.input_size),
                mode="bilinear", align_corners=False,
            )
            tensor = (tensor - _IMAGENET_MEAN) / _IMAGENET_STD
            keys.append((scene.image_id, entity.entity_id))
            tensors.append(tensor)
        if tensors:
            embeddings = _batched_forward(backbone.module, tensors)
            for key, emb in zip(keys, embeddings):
                features[key] = emb.astype(np.float32)
    return features


def extract_depth_features(
    depth_maps: list[DepthMap], dataset: AnnotationSet, backbone: Backbone
) -> dict[tuple[int, int], np.ndarray]:
    """(image_id, entity_id) -> 512-wide embedding of the entity's depth crop."""
    by_id = {m.image_id: m for m in depth_maps}
    features: dict[tuple[int, int], np.ndarray] = {}
    for scene in dataset.images:
        depth_map = by_id.get(scene.image_id)
        if depth_map is None:
            raise ValueError(f"no depth map supplied for image {scene.image_id}")
        keys, tensors = [], []
        for entity in scene.entities:
            crop = _clamped_crop(depth_map.values, entity.box, scene.width, scene.height)
            if crop is None:
                logger.warning(
                    "image %s entity %s: box lies outside the depth map, emitting zeros",
                    scene.image_id, entity.entity_id,
                )
                features[(scene.image_id, entity.entity_id)] = np.zeros(
                    backbone.embedding_dim, dtype=np.float32
                )
                continue
            span = float(crop.max() - crop.min())
            normalized = (crop - crop.min()) / span if span > 0 else np.zeros_like(crop)
            tensor = torch.from_numpy(np.asarray(normalized, dtype=np.float32).copy())
            tensor = tensor.unsqueeze(0).unsqueeze(0).repeat(1, 3, 1, 1)
            tensor = F.interpolate(
                tensor, size=(backbone.input_size, backbone.input_size),
                mode="bilinear", align_corners=False,
            )
            keys.append((scene.image_id, entity.entity_id))
            tensors.append(tensor)
        if tensors:
            embeddings = _batched_forward(backbone.module, tensors)
            for key, emb in zip(keys, embeddings):
                features[key] = emb.astype(np.float32)
    return features


def build_feature_file(
    dataset: AnnotationSet,
    rgb_features: dict[tuple[int, int], np.ndarray],
    depth_features: dict[tuple[int, int], np.ndarray],
    path,
    include_background: bool = False,
    class_probs: dict[tuple[int, int], np.ndarray] | None = None,
) -> tuple[int, int, int]:
    """Assemble and write the engine feature file; returns its (C, V, D).

    Class vectors are one-hot ground-truth labels unless detector outputs are
    passed via class_probs. include_background appends an extra class slot
    (kept at zero for one-hot labels), for detectors that emit a background
    dimension.
    """
    c_dim = dataset.num_object_classes + (1 if include_background else 0)
    dims = (c_dim, RGB_EMBEDDING_DIM, DEPTH_EMBEDDING_DIM)
    records = {}
    for scene in dataset.images:
        for entity in scene.entities:
            key = (scene.image_id, entity.entity_id)
            if class_probs is not None:
                c = np.asarray(class_probs[key], dtype=np.float32)
                if c.shape != (c_dim,):
                    raise ValueError(
                        f"class probabilities for {key} have shape {c.shape}, "
                        f"expected ({c_dim},)"
                    )
            else:
                c = np.zeros(c_dim, dtype=np.float32)
                c[entity.class_id] = 1.0
            records[key] = (c, rgb_features[key], depth_features[key])
    write_feature_file(records, dims, path)
    return dims
