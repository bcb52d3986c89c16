"""Depth map generation with a pretrained image-to-depth network.

Any TorchScript module that maps a (1, 3, H, W) float image in [0, 1] to a
single-channel map can act as the estimator. The estimator declares its
output convention: "depth" when larger values already mean farther from the
camera (metric-depth models), "disparity" when larger means nearer
(MiDaS-style models). generate_depth always emits farther-is-larger maps,
flipping disparity outputs per map.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

CONVENTIONS = ("depth", "disparity")


class DepthWeightsError(FileNotFoundError):
    """Estimator weights are missing; the message says how to obtain them."""


@dataclass
class ImageRecord:
    image_id: int
    pixels: np.ndarray  # H x W x 3, uint8
    path: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {self.pixels.dtype}")


@dataclass
class DepthMap:
    """Predicted distance per pixel; larger value = farther from the camera."""

    image_id: int
    values: np.ndarray  # H x W, float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("depth map contains non-finite values")


@dataclass
class DepthEstimator:
    module: torch.nn.Module
    convention: str = "depth"
    input_size: tuple[int, int] | None = None  # (H, W) the module expects
    name: str = "torchscript"

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")


def load_depth_estimator(
    path, convention: str = "depth", input_size: tuple[int, int] | None = None
) -> DepthEstimator:
    """Load a TorchScript image-to-depth module from a local file."""
    if not os.path.exists(path):
        raise DepthWeightsError(
            f"depth estimator weights not found at {path}. Export a pretrained "
            "monocular depth model to TorchScript and point --depth-weights at it, "
            "for example:\n"
            "  model = torch.hub.load('intel-isl/MiDaS', 'MiDaS_small').eval()\n"
            "  torch.jit.trace(model, torch.rand(1, 3, 256, 256)).save('depth.pt')\n"
            "MiDaS-style models emit disparity; pass convention='disparity' so the "
            "maps are flipped to farther-is-larger."
        )
    module = torch.jit.load(str(path), map_location="cpu")
    module.eval()
    return DepthEstimator(module, convention=convention, input_size=input_size,
                          name=os.path.basename(str(path)))


def load_images(paths, image_ids=None) -> list[ImageRecord]:
    """Read RGB images; unreadable files are skipped with a log line."""
    records = []
    for index, path in enumerate(paths):
        image_id = image_ids[index] if image_ids is not None else index
        try:
            with Image.open(path) as img:
                pixels = np.asarray(img.convert("RGB"))
        except (OSError, UnidentifiedImageError) as exc:
            logger.warning("skipping unreadable image %s: %s", path, exc)
            continue
        records.append(ImageRecord(image_id, pixels, path=str(path)))
    return records


def _run_estimator(estimator: DepthEstimator, pixels: np.ndarray) -> np.ndarray:
    # Copy: PIL-backed arrays are read-only and torch warns on wrapping them.
    tensor = torch.from_numpy(pixels.copy()).permute(2, 0, 1).unsqueeze(0).float() / 255.0
    if estimator.input_size is not None:
        tensor = F.interpolate(
            tensor, size=estimator.input_size, mode="bilinear", align_corners=False
        )
    with torch.no_grad():
        raw = estimator.module(tensor)
    while raw.dim() > 2 and raw.shape[0] == 1:
        raw = raw[0]
    if raw.dim() != 2:
        raise ValueError(
            f"estimator returned shape {tuple(raw.shape)}, expected a single-channel map"
        )
    source_hw = pixels.shape[:2]
    if tuple(raw.shape) != source_hw:
        raw = F.interpolate(
            raw.unsqueeze(0).unsqueeze(0), size=source_hw,
            mode="bilinear", align_corners=False,
        )[0, 0]
    return raw.numpy()


def generate_depth(images, estimator: DepthEstimator) -> list[DepthMap]:
    """One farther-is-larger DepthMap per image, at the source resolution."""
    maps = []
    for record in images:
        values = _run_estimator(estimator, record.pixels)
        if estimator.convention == "disparity":
            # Monotone flip: nearer-is-larger becomes farther-is-larger.
            values = values.max() - values
        maps.append(DepthMap(record.image_id, values))
    return maps
