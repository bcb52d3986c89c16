import numpy as np
import pytest
import torch

from depthrel_bridge.depth import ImageRecord
from depthrel_bridge.extract import build_depth_backbone, build_rgb_backbone
from depthrel_bridge.formats import AnnotationSet, EntityRef, ImageRef


class _MeanChannel(torch.nn.Module):
    """Stand-in depth net: predicted distance = mean channel intensity."""

    def forward(self, x):
        return x.mean(dim=1)


@pytest.fixture(scope="session")
def estimator_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "depth_stub.pt"
    torch.jit.script(_MeanChannel()).save(str(path))
    return path


@pytest.fixture(scope="session")
def rgb_backbone():
    # Untrained fallback; every asserted property is weight-independent.
    return build_rgb_backbone(weights=None, input_size=64, seed=0)


@pytest.fixture(scope="session")
def depth_backbone():
    return build_depth_backbone(allow_random=True, input_size=64, seed=0)


def vg_fixture(num_images=10, seed=77):
    """VG-style scene-graph dump plus its dicts file (150 classes, 50 predicates)."""
    object_classes = [f"class_{i:03d}" for i in range(150)]
    predicates = [f"pred_{i:02d}" for i in range(50)]
    rng = np.random.default_rng(seed)
    scene_graphs = []
    for i in range(num_images):
        width, height = 128, 96
        n = int(rng.integers(2, 5))
        objects = []
        for j in range(n):
            x1 = float(rng.uniform(0, width - 15))
            y1 = float(rng.uniform(0, height - 15))
            x2 = x1 + float(rng.uniform(10, 20))  # may poke past the border
            y2 = y1 + float(rng.uniform(10, 20))
            objects.append({
                "object_id": j,
                "names": [object_classes[int(rng.integers(150))]],
                "bbox": [x1, y1, x2, y2],
            })
        relationships = []
        for _ in range(int(rng.integers(1, 4))):
            s, o = rng.choice(n, size=2, replace=False)
            relationships.append({
                "subject_id": int(s),
                "predicate": predicates[int(rng.integers(50))],
                "object_id": int(o),
            })
        scene_graphs.append({
            "image_id": 1000 + i,
            "width": width,
            "height": height,
            "objects": objects,
            "relationships": relationships,
        })
    return scene_graphs, {"object_classes": object_classes, "predicates": predicates}


def tiny_annotation(num_images=2, entities_per_image=2, size=48):
    """Small in-memory annotation set plus matching random RGB images."""
    rng = np.random.default_rng(5)
    images = []
    records = []
    for i in range(num_images):
        entities = []
        for j in range(entities_per_image):
            x = 4.0 + 18.0 * j
            entities.append(EntityRef(j, j % 3, (x, 6.0 + 3.0 * j, 14.0, 20.0)))
        triples = tuple((s, 0, o) for s in range(entities_per_image)
                        for o in range(entities_per_image) if s != o)
        images.append(ImageRef(i, size, size, tuple(entities), triples))
        pixels = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
        records.append(ImageRecord(i, pixels))
    annotation = AnnotationSet(("a", "b", "c"), ("rel_0", "rel_1"), tuple(images))
    return annotation, records
