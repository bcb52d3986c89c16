"""VG-style annotation conversion into the engine's annotation schema.

Expected inputs (the scene_graphs.json-style dump):

* dicts file: {"object_classes": [150 names], "predicates": [50 names]}
* scene graphs file: a JSON array of image records
  {"image_id": int, "width": int, "height": int,
   "objects": [{"object_id": int, "names": ["cup", ...],
                "bbox": [x1, y1, x2, y2]}, ...],
   "relationships": [{"subject_id": int, "predicate": "on",
                      "object_id": int}, ...]}

Boxes arrive in corner format and are converted to [x, y, w, h]; boxes that
poke past the image border are clamped with a log line (VG annotations do
this), self-relations and duplicate triples are dropped with a log line.
Class and predicate names must resolve against the dicts file; anything
else is a schema error that names the offending record.
"""

from __future__ import annotations

import json
import logging

from .formats import AnnotationSet, EntityRef, ImageRef

logger = logging.getLogger(__name__)


class VgSchemaError(ValueError):
    """Input does not follow the expected VG dump schema."""


def _load(source):
    if isinstance(source, (dict, list)):
        return source
    with open(source, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _corner_to_xywh(bbox, context: str) -> tuple[float, float, float, float]:
    if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
        raise VgSchemaError(f"{context}: bbox must be [x1, y1, x2, y2], got {bbox!r}")
    x1, y1, x2, y2 = (float(v) for v in bbox)
    if not (x2 > x1 and y2 > y1):
        raise VgSchemaError(f"{context}: degenerate corner box {bbox!r}")
    return (x1, y1, x2 - x1, y2 - y1)


def _clamp_box(box, width: float, height: float, context: str):
    x, y, w, h = box
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(width, x + w), min(height, y + h)
    if x1 <= x0 or y1 <= y0:
        raise VgSchemaError(f"{context}: box {box!r} lies outside the {width}x{height} image")
    clamped = (x0, y0, x1 - x0, y1 - y0)
    if clamped != box:
        logger.warning("%s: clamped box %s to image bounds", context, box)
    return clamped


def _object_name(obj: dict, context: str) -> str:
    if "names" in obj and obj["names"]:
        return str(obj["names"][0])
    if "name" in obj:
        return str(obj["name"])
    raise VgSchemaError(f"{context}: object has neither 'names' nor 'name'")


def convert_vg_annotations(scene_graphs, dicts) -> AnnotationSet:
    """Convert a VG-style dump; returns the engine-shaped annotation set."""
    dicts_doc = _load(dicts)
    for key in ("object_classes", "predicates"):
        if key not in dicts_doc or not isinstance(dicts_doc[key], list):
            raise VgSchemaError(f"dicts file lacks a '{key}' array")
    class_index = {str(name): i for i, name in enumerate(dicts_doc["object_classes"])}
    predicate_index = {str(name): i for i, name in enumerate(dicts_doc["predicates"])}

    images = []
    for position, record in enumerate(_load(scene_graphs)):
        context = f"image record {position}"
        if not isinstance(record, dict):
            raise VgSchemaError(f"{context}: not an object")
        missing = [k for k in ("image_id", "width", "height", "objects", "relationships")
                   if k not in record]
        if missing:
            raise VgSchemaError(f"{context}: missing fields {missing}")
        image_id = int(record["image_id"])
        context = f"image record {position} (image_id {image_id})"
        width, height = int(record["width"]), int(record["height"])

        entities = []
        entity_ids = set()
        for obj in record["objects"]:
            obj_context = f"{context}, object {obj.get('object_id', '?')}"
            name = _object_name(obj, obj_context)
            if name not in class_index:
                raise VgSchemaError(f"{obj_context}: unknown object class {name!r}")
            box = _clamp_box(
                _corner_to_xywh(obj.get("bbox"), obj_context), width, height, obj_context
            )
            entity_id = int(obj["object_id"])
            if entity_id in entity_ids:
                raise VgSchemaError(f"{obj_context}: duplicate object_id")
            entity_ids.add(entity_id)
            entities.append(EntityRef(entity_id, class_index[name], box))

        triples = []
        seen = set()
        dropped_self = 0
        dropped_dup = 0
        for rel in record["relationships"]:
            rel_context = f"{context}, relationship {rel!r}"
            missing = [k for k in ("subject_id", "predicate", "object_id") if k not in rel]
            if missing:
                raise VgSchemaError(f"{rel_context}: missing fields {missing}")
            predicate = str(rel["predicate"])
            if predicate not in predicate_index:
                raise VgSchemaError(f"{rel_context}: unknown predicate {predicate!r}")
            s, o = int(rel["subject_id"]), int(rel["object_id"])
            for eid in (s, o):
                if eid not in entity_ids:
                    raise VgSchemaError(f"{rel_context}: references missing object {eid}")
            if s == o:
                dropped_self += 1
                continue
            triple = (s, predicate_index[predicate], o)
            if triple in seen:
                dropped_dup += 1
                continue
            seen.add(triple)
            triples.append(triple)
        if dropped_self:
            logger.warning("%s: dropped %d self-relation(s)", context, dropped_self)
        if dropped_dup:
            logger.warning("%s: dropped %d duplicate triple(s)", context, dropped_dup)

        images.append(ImageRef(image_id, width, height, tuple(entities), tuple(triples)))

    return AnnotationSet(
        tuple(str(n) for n in dicts_doc["object_classes"]),
        tuple(str(n) for n in dicts_doc["predicates"]),
        tuple(images),
    )
