"""Synthetic desk-scale scenes with geometry- and depth-determined predicates.

Entities sit on a coarse placement grid and on discrete depth levels, so
exact coordinate and depth ties occur and every ordered pair receives at
most one predicate:

* spatial-2d: above/below when the vertical centers differ, otherwise
  left-of/right-of when the horizontal centers differ.
* spatial-3d: behind/in-front-of when the depths differ, otherwise the
  spatial-2d rule.
* mixed: each image draws one of the two rule sets at random.

With noise_level=0 the predicate of a pair is a deterministic function of
its location features and the two depths. noise_level > 0 flips each label
to a uniformly random predicate with that probability and perturbs the RGB
embeddings.

Box extents are even integers and cell centers are integers, so a box's
center (x + w/2, y + h/2) reconstructs the placement grid exactly; rule
replay from emitted boxes is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BoundingBox, Entity, SceneDataset, SceneImage, Triple
from .features import FeatureRecord, FeatureStore

PREDICATES = ("above", "below", "left-of", "right-of", "behind", "in-front-of")
CLASSES = ("book", "cup", "lamp", "phone", "plant", "mug", "box", "clock")
RULE_SETS = ("spatial-2d", "spatial-3d", "mixed")

IMAGE_WIDTH = 640
IMAGE_HEIGHT = 480
GRID_COLS = 5
GRID_ROWS = 4
DEPTH_LEVELS = 4

# (C, V, D) for generated feature stores.
SYNTH_DIMS = (len(CLASSES), 32, 16)

DEPTH_BINS = 16
# Fixed projections, independent of the dataset seed, so the same class or
# depth always maps to the same embedding across datasets.
_V_EMBED = np.random.default_rng(0x5EED0001).normal(0.0, 1.0, (len(CLASSES), SYNTH_DIMS[1]))
_D_EMBED = np.random.default_rng(0x5EED0002).normal(0.0, 1.0, (DEPTH_BINS, SYNTH_DIMS[2]))


@dataclass(frozen=True)
class SynthConfig:
    num_images: int
    entities_per_image: tuple[int, int] = (4, 7)
    depth_range: tuple[float, float] = (0.5, 3.0)
    rule_set: str = "spatial-3d"
    noise_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ValueError(f"num_images must be >= 1, got {self.num_images}")
        lo, hi = self.entities_per_image
        if not (1 <= lo <= hi):
            raise ValueError(f"entities_per_image range {self.entities_per_image} is empty")
        if hi > GRID_COLS * GRID_ROWS:
            raise ValueError(
                f"entities_per_image max {hi} exceeds {GRID_COLS * GRID_ROWS} grid cells"
            )
        near, far = self.depth_range
        if not near < far:
            raise ValueError(f"depth_range {self.depth_range} is empty")
        if not (0.0 <= self.noise_level <= 1.0):
            raise ValueError(f"noise_level must lie in [0, 1], got {self.noise_level}")
        if self.rule_set not in RULE_SETS:
            raise ValueError(f"rule_set must be one of {RULE_SETS}, got {self.rule_set!r}")


def predicate_for_pair(
    center_s: tuple[float, float],
    center_o: tuple[float, float],
    depth_s: float,
    depth_o: float,
    rule_set: str,
) -> int | None:
    """The single predicate the rules assign to an ordered pair, if any.

    Depth ordering takes precedence over vertical, vertical over horizontal.
    """
    if rule_set == "spatial-3d":
        if depth_s > depth_o:
            return PREDICATES.index("behind")
        if depth_s < depth_o:
            return PREDICATES.index("in-front-of")
    if center_s[1] < center_o[1]:
        return PREDICATES.index("above")
    if center_s[1] > center_o[1]:
        return PREDICATES.index("below")
    if center_s[0] < center_o[0]:
        return PREDICATES.index("left-of")
    if center_s[0] > center_o[0]:
        return PREDICATES.index("right-of")
    return None


def depth_bin(depth: float, depth_range: tuple[float, float]) -> int:
    """Bin index used to derive the depth embedding; monotone in depth."""
    near, far = depth_range
    frac = (depth - near) / (far - near)
    return int(np.clip(np.floor(frac * DEPTH_BINS), 0, DEPTH_BINS - 1))


def depth_embedding(depth: float, depth_range: tuple[float, float]) -> np.ndarray:
    return _D_EMBED[depth_bin(depth, depth_range)]


def _even_extent(rng: np.random.Generator, cell: float) -> int:
    # Even integer in roughly [0.4, 0.85] of the cell, leaving a margin.
    return 2 * int(round(float(rng.uniform(0.4, 0.85)) * cell / 2.0))


def synth_generate(config: SynthConfig) -> tuple[SceneDataset, FeatureStore]:
    """Generate a dataset and matching feature store; deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    c_dim, v_dim, d_dim = SYNTH_DIMS
    near, far = config.depth_range
    cell_w = IMAGE_WIDTH // GRID_COLS
    cell_h = IMAGE_HEIGHT // GRID_ROWS
    level_values = np.linspace(near, far, DEPTH_LEVELS)

    store = FeatureStore(SYNTH_DIMS)
    images: list[SceneImage] = []
    for image_id in range(config.num_images):
        lo, hi = config.entities_per_image
        n = int(rng.integers(lo, hi + 1))
        cells = rng.choice(GRID_COLS * GRID_ROWS, size=n, replace=False)
        rule_set = config.rule_set
        if rule_set == "mixed":
            rule_set = "spatial-3d" if rng.random() < 0.5 else "spatial-2d"

        entities: list[Entity] = []
        centers: list[tuple[float, float]] = []
        depths: list[float] = []
        for entity_id in range(n):
            col = int(cells[entity_id]) % GRID_COLS
            row = int(cells[entity_id]) // GRID_COLS
            cx = float(col * cell_w + cell_w // 2)
            cy = float(row * cell_h + cell_h // 2)
            w = _even_extent(rng, cell_w)
            h = _even_extent(rng, cell_h)
            class_id = int(rng.integers(c_dim))
            depth = float(level_values[int(rng.integers(DEPTH_LEVELS))])
            box = BoundingBox(cx - w / 2.0, cy - h / 2.0, float(w), float(h))
            entities.append(Entity(entity_id, class_id, box))
            centers.append((cx, cy))
            depths.append(depth)

            c_vec = np.zeros(c_dim, dtype=np.float64)
            c_vec[class_id] = 1.0
            v_vec = _V_EMBED[class_id].copy()
            if config.noise_level > 0:
                v_vec += config.noise_level * rng.normal(0.0, 1.0, v_dim)
            d_vec = depth_embedding(depth, config.depth_range)
            store.add(FeatureRecord(image_id, entity_id, c_vec, v_vec, d_vec))

        triples: list[Triple] = []
        for s in range(n):
            for o in range(n):
                if s == o:
                    continue
                pred = predicate_for_pair(centers[s], centers[o], depths[s], depths[o], rule_set)
                if pred is None:
                    continue
                if config.noise_level > 0 and rng.random() < config.noise_level:
                    pred = int(rng.integers(len(PREDICATES)))
                triples.append(Triple(s, pred, o))
        images.append(
            SceneImage(image_id, IMAGE_WIDTH, IMAGE_HEIGHT, tuple(entities), tuple(triples))
        )

    dataset = SceneDataset(CLASSES, PREDICATES, tuple(images))
    return dataset, store
