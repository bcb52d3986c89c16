"""Writers for the engine's two input file formats.

The bridge talks to the engine exclusively through these files, so the
formats are implemented here against their published layout rather than by
importing the engine:

* Annotation file: UTF-8 JSON with `object_classes`, `predicates`, and
  `images` (entities carry `[x, y, w, h]` boxes, top-left origin).
* Feature file "RFB1" (little-endian): magic, version u32=1, C/V/D u32,
  record count u64, then per record image_id u64, entity_id u64 and
  C+V+D float32 values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"RFB1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")
_RECORD_IDS = struct.Struct("<QQ")


@dataclass(frozen=True)
class EntityRef:
    entity_id: int
    class_id: int
    box: tuple[float, float, float, float]  # x, y, w, h (top-left origin)


@dataclass(frozen=True)
class ImageRef:
    image_id: int
    width: int
    height: int
    entities: tuple[EntityRef, ...]
    triples: tuple[tuple[int, int, int], ...]


@dataclass(frozen=True)
class AnnotationSet:
    """Bridge-local view of an engine annotation file."""

    object_classes: tuple[str, ...]
    predicates: tuple[str, ...]
    images: tuple[ImageRef, ...]

    @property
    def num_object_classes(self) -> int:
        return len(self.object_classes)


def annotation_to_doc(ann: AnnotationSet) -> dict:
    return {
        "object_classes": list(ann.object_classes),
        "predicates": list(ann.predicates),
        "images": [
            {
                "id": img.image_id,
                "width": img.width,
                "height": img.height,
                "entities": [
                    {"id": e.entity_id, "class": e.class_id, "box": list(e.box)}
                    for e in img.entities
                ],
                "triples": [list(t) for t in img.triples],
            }
            for img in ann.images
        ],
    }


def read_annotation_file(path) -> AnnotationSet:
    """Light reader for files this package wrote (the engine owns validation)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    images = tuple(
        ImageRef(
            image_id=int(img["id"]),
            width=int(img["width"]),
            height=int(img["height"]),
            entities=tuple(
                EntityRef(int(e["id"]), int(e["class"]), tuple(float(v) for v in e["box"]))
                for e in img["entities"]
            ),
            triples=tuple(tuple(int(v) for v in t) for t in img["triples"]),
        )
        for img in doc["images"]
    )
    return AnnotationSet(
        tuple(str(n) for n in doc["object_classes"]),
        tuple(str(n) for n in doc["predicates"]),
        images,
    )


def write_annotation_file(doc: dict | AnnotationSet, path) -> None:
    """Write an annotation document in the engine's canonical JSON form."""
    if isinstance(doc, AnnotationSet):
        doc = annotation_to_doc(doc)
    for key in ("object_classes", "predicates", "images"):
        if key not in doc:
            raise ValueError(f"annotation document lacks '{key}'")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def write_feature_file(
    records: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]],
    dims: tuple[int, int, int],
    path,
) -> None:
    """Write per-entity (c, v, d) vectors keyed by (image_id, entity_id)."""
    c_dim, v_dim, d_dim = (int(x) for x in dims)
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, c_dim, v_dim, d_dim, len(records))]
    for key in sorted(records):
        image_id, entity_id = key
        c, v, d = (np.asarray(x, dtype=np.float32) for x in records[key])
        for name, vec, want in (("c", c, c_dim), ("v", v, v_dim), ("d", d, d_dim)):
            if vec.shape != (want,):
                raise ValueError(
                    f"record {key}: {name} has shape {vec.shape}, expected ({want},)"
                )
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"record {key}: {name} contains non-finite values")
        if np.any(c < 0):
            raise ValueError(f"record {key}: class probabilities must be non-negative")
        chunks.append(_RECORD_IDS.pack(image_id, entity_id))
        chunks.append(c.astype("<f4").tobytes())
        chunks.append(v.astype("<f4").tobytes())
        chunks.append(d.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
