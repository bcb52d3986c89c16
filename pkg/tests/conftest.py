import json

import numpy as np
import pytest

from depthrel.data import parse_annotations
from depthrel.features import FeatureRecord, FeatureStore


def make_annotation_doc(**overrides):
    """A minimal valid annotation document as a plain dict."""
    doc = {
        "object_classes": ["cup", "book"],
        "predicates": ["above", "below"],
        "images": [
            {
                "id": 0,
                "width": 100,
                "height": 100,
                "entities": [
                    {"id": 0, "class": 0, "box": [10.0, 10.0, 20.0, 20.0]},
                    {"id": 1, "class": 1, "box": [40.0, 60.0, 30.0, 25.0]},
                ],
                "triples": [[0, 0, 1]],
            }
        ],
    }
    doc.update(overrides)
    return doc


def parse_doc(doc):
    return parse_annotations(json.dumps(doc))


def random_store(rng, dims=(5, 7, 3), n_records=20, n_images=4):
    """Random feature store with float32-exact values."""
    store = FeatureStore(dims)
    used = set()
    while len(used) < n_records:
        key = (int(rng.integers(n_images)), int(rng.integers(100)))
        if key in used:
            continue
        used.add(key)
        c = np.abs(rng.normal(size=dims[0])).astype(np.float32)
        v = rng.normal(size=dims[1]).astype(np.float32)
        d = rng.normal(size=dims[2]).astype(np.float32)
        store.add(FeatureRecord(key[0], key[1], c, v, d))
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
