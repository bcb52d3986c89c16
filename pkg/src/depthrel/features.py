"""Per-entity feature vectors, pairwise assembly, and the binary feature file.

File format (little-endian, no padding)::

    magic   4 bytes  "RFB1"
    version u32      1
    C, V, D u32 each
    count   u64
    then per record: image_id u64, entity_id u64, C+V+D float32 values

Vectors are float32 on disk and in the store; they are widened to float64
when pair inputs are assembled for training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import BoundingBox, SceneImage

MAGIC = b"RFB1"
FORMAT_VERSION = 1
DEFAULT_DIMS = (150, 4096, 512)

_HEADER = struct.Struct("<4sIIIIQ")
_RECORD_IDS = struct.Struct("<QQ")


class FeatureFileError(Exception):
    """Base class for feature file format errors."""


class MagicMismatchError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class DimMismatchError(FeatureFileError):
    pass


class MissingFeatureError(LookupError):
    """Raised when an entity referenced by a dataset has no feature record."""


def _as_feature_vector(name: str, values, length: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    """Class probabilities c, RGB embedding v, depth embedding d for one entity."""

    image_id: int
    entity_id: int
    c: np.ndarray
    v: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c", _as_feature_vector("c", self.c))
        object.__setattr__(self, "v", _as_feature_vector("v", self.v))
        object.__setattr__(self, "d", _as_feature_vector("d", self.d))
        if np.any(self.c < 0):
            raise ValueError("class probabilities must be non-negative")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.entity_id == other.entity_id
            and np.array_equal(self.c, other.c)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.d, other.d)
        )


class FeatureStore:
    """Immutable-after-load map from (image_id, entity_id) to FeatureRecord."""

    def __init__(self, dims: tuple[int, int, int]):
        c, v, d = (int(x) for x in dims)
        if min(c, v, d) < 1:
            raise ValueError(f"dims must be positive, got {dims}")
        self.dims: tuple[int, int, int] = (c, v, d)
        self._records: dict[tuple[int, int], FeatureRecord] = {}

    def add(self, record: FeatureRecord) -> None:
        c, v, d = self.dims
        if (len(record.c), len(record.v), len(record.d)) != (c, v, d):
            raise ValueError(
                f"record dims ({len(record.c)}, {len(record.v)}, {len(record.d)}) "
                f"do not match store dims {self.dims}"
            )
        key = (record.image_id, record.entity_id)
        if key in self._records:
            raise ValueError(f"duplicate feature record for {key}")
        self._records[key] = record

    def get(self, image_id: int, entity_id: int) -> FeatureRecord:
        try:
            return self._records[(image_id, entity_id)]
        except KeyError:
            raise MissingFeatureError(
                f"no feature record for entity {entity_id} in image {image_id}"
            ) from None

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureStore):
            return NotImplemented
        return self.dims == other.dims and self._records == other._records

    def validate_against(self, dataset) -> None:
        """Require a record for every entity the dataset references."""
        missing = [
            (img.image_id, e.entity_id)
            for img in dataset.images
            for e in img.entities
            if (img.image_id, e.entity_id) not in self._records
        ]
        if missing:
            raise MissingFeatureError(
                f"{len(missing)} entities lack feature records, first: "
                f"image {missing[0][0]} entity {missing[0][1]}"
            )


def location_features(bb_s: BoundingBox, bb_o: BoundingBox) -> np.ndarray:
    """Scale-invariant location feature [t_x, t_y, t_w, t_h].

    t_x = (x_s - x_o) / w_o, t_y = (y_s - y_o) / h_o,
    t_w = ln(w_s / w_o),     t_h = ln(h_s / h_o).
    """
    if bb_s.w <= 0 or bb_s.h <= 0 or bb_o.w <= 0 or bb_o.h <= 0:
        raise ValueError("boxes must have positive width and height")
    return np.array(
        [
            (bb_s.x - bb_o.x) / bb_o.w,
            (bb_s.y - bb_o.y) / bb_o.h,
            np.log(bb_s.w / bb_o.w),
            np.log(bb_s.h / bb_o.h),
        ],
        dtype=np.float64,
    )


# Canonical order used for mask labels and CLI flags.
MASK_SOURCE_ORDER = ("l", "c", "v", "d")


@dataclass(frozen=True)
class AblationMask:
    """Which feature sources feed the model; at least one must be enabled."""

    use_l: bool = True
    use_c: bool = True
    use_v: bool = True
    use_d: bool = True

    def __post_init__(self):
        if not (self.use_l or self.use_c or self.use_v or self.use_d):
            raise ValueError("ablation mask must enable at least one source")

    def uses(self, source: str) -> bool:
        return getattr(self, f"use_{source}")

    def enabled(self) -> tuple[str, ...]:
        return tuple(s for s in MASK_SOURCE_ORDER if self.uses(s))

    def label(self) -> str:
        return ",".join(self.enabled())

    @classmethod
    def from_label(cls, label: str) -> "AblationMask":
        parts = [p.strip() for p in label.split(",") if p.strip()]
        unknown = [p for p in parts if p not in MASK_SOURCE_ORDER]
        if unknown:
            raise ValueError(f"unknown mask source(s) {unknown}, expected subset of l,c,v,d")
        return cls(**{f"use_{s}": s in parts for s in MASK_SOURCE_ORDER})


FULL_MASK = AblationMask()


@dataclass
class PairInput:
    """Concatenated per-pair vectors for the sources enabled by the mask."""

    mask: AblationMask
    l_pair: np.ndarray | None = None
    c_pair: np.ndarray | None = None
    v_pair: np.ndarray | None = None
    d_pair: np.ndarray | None = None

    def __post_init__(self):
        for source in MASK_SOURCE_ORDER:
            vec = getattr(self, f"{source}_pair")
            if self.mask.uses(source):
                if vec is None:
                    raise ValueError(f"mask enables '{source}' but {source}_pair is absent")
                if not np.all(np.isfinite(vec)):
                    raise ValueError(f"{source}_pair contains non-finite values")
            elif vec is not None:
                raise ValueError(f"mask disables '{source}' but {source}_pair is present")
        if self.mask.use_l and self.l_pair.shape != (8,):
            raise ValueError(f"l_pair must have shape (8,), got {self.l_pair.shape}")

    def source(self, source: str) -> np.ndarray:
        vec = getattr(self, f"{source}_pair")
        if vec is None:
            raise ValueError(f"source '{source}' not present in this pair input")
        return vec


def assemble_pair(
    store: FeatureStore,
    image: SceneImage,
    subject_id: int,
    object_id: int,
    mask: AblationMask,
) -> PairInput:
    """Build the model input for one ordered (subject, object) pair."""
    by_id = image.entity_by_id()
    for role, eid in (("subject", subject_id), ("object", object_id)):
        if eid not in by_id:
            raise ValueError(f"{role} entity {eid} not found in image {image.image_id}")
    bb_s = by_id[subject_id].box
    bb_o = by_id[object_id].box

    l_pair = c_pair = v_pair = d_pair = None
    if mask.use_l:
        l_pair = np.concatenate([location_features(bb_s, bb_o), location_features(bb_o, bb_s)])
    if mask.use_c or mask.use_v or mask.use_d:
        rec_s = store.get(image.image_id, subject_id)
        rec_o = store.get(image.image_id, object_id)
        if mask.use_c:
            c_pair = np.concatenate([rec_s.c, rec_o.c]).astype(np.float64)
        if mask.use_v:
            v_pair = np.concatenate([rec_s.v, rec_o.v]).astype(np.float64)
        if mask.use_d:
            d_pair = np.concatenate([rec_s.d, rec_o.d]).astype(np.float64)
    return PairInput(mask=mask, l_pair=l_pair, c_pair=c_pair, v_pair=v_pair, d_pair=d_pair)


def write_feature_file(store: FeatureStore, path) -> None:
    """Write the store in the binary format above; rejects non-finite values."""
    c_dim, v_dim, d_dim = store.dims
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, c_dim, v_dim, d_dim, len(store))]
    for key in sorted((r.image_id, r.entity_id) for r in store):
        rec = store.get(*key)
        for name, vec, dim in (("c", rec.c, c_dim), ("v", rec.v, v_dim), ("d", rec.d, d_dim)):
            if len(vec) != dim:
                raise DimMismatchError(
                    f"record {key}: {name} has length {len(vec)}, store dims say {dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"record {key}: {name} contains non-finite values")
        chunks.append(_RECORD_IDS.pack(rec.image_id, rec.entity_id))
        chunks.append(rec.c.astype("<f4").tobytes())
        chunks.append(rec.v.astype("<f4").tobytes())
        chunks.append(rec.d.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_feature_file(path) -> FeatureStore:
    """Read a feature file written by write_feature_file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"file is {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, c_dim, v_dim, d_dim, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {FORMAT_VERSION}")
    record_size = _RECORD_IDS.size + 4 * (c_dim + v_dim + d_dim)
    payload = len(blob) - _HEADER.size
    if payload < count * record_size:
        raise TruncatedFileError(
            f"payload holds {payload} bytes, {count} records need {count * record_size}"
        )
    if payload > count * record_size:
        raise DimMismatchError(
            f"payload holds {payload} bytes but header dims {(c_dim, v_dim, d_dim)} "
            f"and count {count} imply {count * record_size}"
        )
    store = FeatureStore((c_dim, v_dim, d_dim))
    offset = _HEADER.size
    for _ in range(count):
        image_id, entity_id = _RECORD_IDS.unpack_from(blob, offset)
        offset += _RECORD_IDS.size
        values = np.frombuffer(blob, dtype="<f4", count=c_dim + v_dim + d_dim, offset=offset)
        offset += 4 * (c_dim + v_dim + d_dim)
        try:
            store.add(
                FeatureRecord(
                    image_id,
                    entity_id,
                    values[:c_dim].copy(),
                    values[c_dim : c_dim + v_dim].copy(),
                    values[c_dim + v_dim :].copy(),
                )
            )
        except ValueError as exc:
            raise FeatureFileError(f"invalid record for ({image_id}, {entity_id}): {exc}") from exc
    return store
