"""Scene, entity, and triple data model plus annotation parsing and splits.

The annotation document is UTF-8 JSON with the shape::

    {
      "object_classes": ["cup", ...],
      "predicates": ["above", ...],
      "images": [
        {"id": 0, "width": 640, "height": 480,
         "entities": [{"id": 0, "class": 3, "box": [x, y, w, h]}, ...],
         "triples": [[subject_id, predicate_id, object_id], ...]}
      ]
    }

Boxes are [x, y, w, h] with a top-left origin.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Benchmark-scale vocabulary sizes (VG-150 convention).
VG_NUM_OBJECT_CLASSES = 150
VG_NUM_PREDICATES = 50


class ParseError(ValueError):
    """Malformed annotation syntax. Carries the 1-based line and column."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(message)
        self.line = line
        self.column = column


class ValidationError(ValueError):
    """Semantic violations in a well-formed document; lists every violation."""

    def __init__(self, violations: list[str]):
        super().__init__(
            f"{len(violations)} validation error(s): " + "; ".join(violations)
        )
        self.violations = list(violations)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box [x, y, w, h], top-left origin, pixel units."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError(f"non-finite box {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extent must be positive, got w={self.w} h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass(frozen=True)
class Entity:
    entity_id: int
    class_id: int
    box: BoundingBox


@dataclass(frozen=True)
class Triple:
    subject_id: int
    predicate_id: int
    object_id: int


@dataclass(frozen=True)
class SceneImage:
    image_id: int
    width: int
    height: int
    entities: tuple[Entity, ...]
    triples: tuple[Triple, ...]

    def entity_by_id(self) -> dict[int, Entity]:
        return {e.entity_id: e for e in self.entities}


@dataclass(frozen=True)
class SceneDataset:
    object_class_names: tuple[str, ...]
    predicate_names: tuple[str, ...]
    images: tuple[SceneImage, ...]

    @property
    def num_object_classes(self) -> int:
        return len(self.object_class_names)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_names)

    def total_triples(self) -> int:
        return sum(len(img.triples) for img in self.images)


def _validate_images(
    raw_images: list, num_classes: int, num_predicates: int
) -> tuple[tuple[SceneImage, ...], list[str]]:
    """Build SceneImages from raw dicts, collecting every violation."""
    violations: list[str] = []
    images: list[SceneImage] = []
    seen_image_ids: set[int] = set()
    for idx, raw in enumerate(raw_images):
        if not isinstance(raw, dict):
            violations.append(f"images[{idx}]: not an object")
            continue
        missing = [k for k in ("id", "width", "height", "entities", "triples") if k not in raw]
        if missing:
            violations.append(f"images[{idx}]: missing fields {missing}")
            continue
        image_id = raw["id"]
        if image_id in seen_image_ids:
            violations.append(f"image {image_id}: duplicate image id")
            continue
        seen_image_ids.add(image_id)
        width, height = raw["width"], raw["height"]

        entities: list[Entity] = []
        entity_ids: set[int] = set()
        for eidx, ent in enumerate(raw["entities"]):
            if not isinstance(ent, dict) or any(k not in ent for k in ("id", "class", "box")):
                violations.append(f"image {image_id}: entity[{eidx}] malformed")
                continue
            box = ent["box"]
            if not (isinstance(box, list) and len(box) == 4):
                violations.append(f"image {image_id}: entity {ent['id']} box must be [x,y,w,h]")
                continue
            x, y, w, h = (float(v) for v in box)
            ok = True
            if w <= 0 or h <= 0:
                violations.append(
                    f"image {image_id}: entity {ent['id']} has non-positive box extent w={w} h={h}"
                )
                ok = False
            if ok and not (0 <= x and 0 <= y and x + w <= width and y + h <= height):
                violations.append(
                    f"image {image_id}: entity {ent['id']} box {[x, y, w, h]} exceeds "
                    f"image bounds {width}x{height}"
                )
                ok = False
            if not (0 <= int(ent["class"]) < num_classes):
                violations.append(
                    f"image {image_id}: entity {ent['id']} class {ent['class']} out of range "
                    f"[0, {num_classes})"
                )
                ok = False
            if int(ent["id"]) in entity_ids:
                violations.append(f"image {image_id}: duplicate entity id {ent['id']}")
                ok = False
            if ok:
                entity_ids.add(int(ent["id"]))
                entities.append(Entity(int(ent["id"]), int(ent["class"]), BoundingBox(x, y, w, h)))

        triples: list[Triple] = []
        seen_triples: set[tuple[int, int, int]] = set()
        duplicates = 0
        for tidx, tri in enumerate(raw["triples"]):
            if not (isinstance(tri, list) and len(tri) == 3):
                violations.append(f"image {image_id}: triple[{tidx}] must be [s, p, o]")
                continue
            s, p, o = (int(v) for v in tri)
            ok = True
            for role, eid in (("subject", s), ("object", o)):
                if eid not in entity_ids:
                    violations.append(
                        f"image {image_id}: triple[{tidx}] references missing {role} entity {eid}"
                    )
                    ok = False
            if s == o:
                violations.append(f"image {image_id}: triple[{tidx}] has subject == object ({s})")
                ok = False
            if not (0 <= p < num_predicates):
                violations.append(
                    f"image {image_id}: triple[{tidx}] predicate {p} out of range "
                    f"[0, {num_predicates})"
                )
                ok = False
            if not ok:
                continue
            if (s, p, o) in seen_triples:
                duplicates += 1
                continue
            seen_triples.add((s, p, o))
            triples.append(Triple(s, p, o))
        if duplicates:
            logger.warning(
                "image %s: dropped %d duplicate triple(s)", image_id, duplicates
            )
        images.append(SceneImage(int(image_id), int(width), int(height), tuple(entities), tuple(triples)))
    return tuple(images), violations


def parse_annotations(content: bytes | str) -> SceneDataset:
    """Parse and fully validate an annotation document.

    Raises ParseError on malformed syntax (with line/column) and
    ValidationError listing all semantic violations at once.
    """
    if isinstance(content, bytes):
        content = content.decode("utf-8")
    try:
        doc = json.loads(content)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"annotation syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}",
            line=exc.lineno,
            column=exc.colno,
        ) from exc

    violations: list[str] = []
    if not isinstance(doc, dict):
        raise ValidationError(["top-level document must be an object"])
    for key in ("object_classes", "predicates", "images"):
        if key not in doc or not isinstance(doc[key], list):
            violations.append(f"missing or non-array field '{key}'")
    if violations:
        raise ValidationError(violations)

    object_classes = tuple(str(n) for n in doc["object_classes"])
    predicates = tuple(str(n) for n in doc["predicates"])
    images, violations = _validate_images(doc["images"], len(object_classes), len(predicates))
    if violations:
        raise ValidationError(violations)
    return SceneDataset(object_classes, predicates, images)


def serialize_annotations(dataset: SceneDataset) -> str:
    """Canonical annotation text: sorted keys, 2-space indent."""
    doc = {
        "object_classes": list(dataset.object_class_names),
        "predicates": list(dataset.predicate_names),
        "images": [
            {
                "id": img.image_id,
                "width": img.width,
                "height": img.height,
                "entities": [
                    {"id": e.entity_id, "class": e.class_id,
                     "box": [e.box.x, e.box.y, e.box.w, e.box.h]}
                    for e in img.entities
                ],
                "triples": [[t.subject_id, t.predicate_id, t.object_id] for t in img.triples],
            }
            for img in dataset.images
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def split_dataset(
    dataset: SceneDataset, train_fraction: float, seed: int
) -> tuple[SceneDataset, SceneDataset]:
    """Image-level partition into (train, test); deterministic per seed."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset.images))
    n_train = int(len(dataset.images) * train_fraction)
    train_idx = sorted(int(i) for i in order[:n_train])
    test_idx = sorted(int(i) for i in order[n_train:])
    make = lambda idx: SceneDataset(
        dataset.object_class_names,
        dataset.predicate_names,
        tuple(dataset.images[i] for i in idx),
    )
    return make(train_idx), make(test_idx)
