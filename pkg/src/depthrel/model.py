"""The fused relation model: per-source branches, fusion layer, classifier.

Each enabled source (RGB pair v, location pair l, class pair c, depth pair d)
passes through its own linear+ReLU+dropout branch; branch outputs are
concatenated in the fixed order (v, l, c, d), projected by a fused
linear+ReLU+dropout layer into the relation space, and scored per predicate
by a final linear layer. Training minimizes softmax cross-entropy over the
observed triples, one example per triple; the softmax over predicates
supplies the implicit negatives.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import SceneDataset, SceneImage
from .features import AblationMask, FeatureStore, PairInput, assemble_pair
from .nn import (
    AdamConfig,
    Parameter,
    adam_step,
    dropout_backward,
    dropout_forward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_cross_entropy,
    xavier_init,
)

# Fusion concatenation order; fixed by the model definition.
SOURCE_ORDER = ("v", "l", "c", "d")

DEFAULT_BRANCH_WIDTHS = {"c": 64, "v": 512, "d": 4096, "l": 20}
DEFAULT_BRANCH_DROPOUT = {"c": 0.1, "v": 0.8, "d": 0.6, "l": 0.1}

CHECKPOINT_MAGIC = b"RCK1"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")  # magic, version, config byte length
_TENSOR_HEADER = struct.Struct("<II")  # rows, cols


class MaskMismatchError(ValueError):
    """Pair inputs were assembled under a different mask than the model's."""


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dims: tuple[int, int, int]  # (C, V, D)
    num_predicates: int
    mask: AblationMask = AblationMask()
    branch_widths: dict[str, int] = field(
        default_factory=lambda: dict(DEFAULT_BRANCH_WIDTHS)
    )
    branch_dropout: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_BRANCH_DROPOUT)
    )
    fusion_width: int = 4096
    fusion_dropout: float = 0.1

    def __post_init__(self):
        if self.num_predicates < 1:
            raise ValueError("num_predicates must be positive")
        for s in SOURCE_ORDER:
            if self.branch_widths.get(s, 0) < 1:
                raise ValueError(f"branch width for '{s}' must be positive")
            if not (0.0 <= self.branch_dropout.get(s, 0.0) < 1.0):
                raise ValueError(f"branch dropout for '{s}' must lie in [0, 1)")
        if self.fusion_width < 1:
            raise ValueError("fusion_width must be positive")
        if not (0.0 <= self.fusion_dropout < 1.0):
            raise ValueError("fusion_dropout must lie in [0, 1)")

    def input_width(self, source: str) -> int:
        c, v, d = self.dims
        return {"l": 8, "c": 2 * c, "v": 2 * v, "d": 2 * d}[source]

    def enabled_sources(self) -> tuple[str, ...]:
        return tuple(s for s in SOURCE_ORDER if self.mask.uses(s))

    def fusion_input_width(self) -> int:
        return sum(self.branch_widths[s] for s in self.enabled_sources())


@dataclass
class Layer:
    weight: Parameter
    bias: Parameter


@dataclass
class ErmlpEModel:
    config: ModelConfig
    sources: tuple[str, ...]
    branches: dict[str, Layer]
    fusion: Layer
    classifier: Layer

    def parameters(self) -> list[Parameter]:
        """All parameters in declaration order (branches, fusion, classifier)."""
        out: list[Parameter] = []
        for s in self.sources:
            out.extend((self.branches[s].weight, self.branches[s].bias))
        out.extend((self.fusion.weight, self.fusion.bias))
        out.extend((self.classifier.weight, self.classifier.bias))
        return out

    def parameter_count(self, include_bias: bool = True) -> int:
        total = 0
        for p in self.parameters():
            if not include_bias and p.value.shape[0] == 1:
                continue
            total += p.value.size
        return total


def build_model(config: ModelConfig, rng: np.random.Generator) -> ErmlpEModel:
    """Xavier-initialized model; all biases start at zero."""
    sources = config.enabled_sources()
    if not sources:
        raise ValueError("model requires at least one enabled source")

    def layer(n_in: int, n_out: int) -> Layer:
        return Layer(
            weight=Parameter(xavier_init(n_in, n_out, rng)),
            bias=Parameter(np.zeros((1, n_out))),
        )

    branches = {s: layer(config.input_width(s), config.branch_widths[s]) for s in sources}
    fusion = layer(config.fusion_input_width(), config.fusion_width)
    classifier = layer(config.fusion_width, config.num_predicates)
    return ErmlpEModel(config, sources, branches, fusion, classifier)


def stack_pairs(model: ErmlpEModel, pairs) -> dict[str, np.ndarray]:
    """Stack per-pair vectors into one (B, width) matrix per source."""
    for p in pairs:
        if p.mask != model.config.mask:
            raise MaskMismatchError(
                f"pair assembled with mask '{p.mask.label()}' but model expects "
                f"'{model.config.mask.label()}'"
            )
    return {
        s: np.stack([p.source(s) for p in pairs]).astype(np.float64)
        for s in model.sources
    }


def _check_input_dims(model: ErmlpEModel, inputs: dict[str, np.ndarray]) -> None:
    for s in model.sources:
        want = model.config.input_width(s)
        got = inputs[s].shape[1]
        if got != want:
            raise ValueError(f"source '{s}': expected input width {want}, found {got}")


def forward_stacked(
    model: ErmlpEModel,
    inputs: dict[str, np.ndarray],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    cache: dict | None = None,
) -> np.ndarray:
    """Forward pass on pre-stacked inputs; fills `cache` for backward."""
    _check_input_dims(model, inputs)
    segments = []
    branch_caches = {}
    for s in model.sources:
        x = inputs[s]
        layer = model.branches[s]
        pre = linear_forward(x, layer.weight.value, layer.bias.value)
        act = relu_forward(pre)
        out, mask = dropout_forward(act, model.config.branch_dropout[s], mode, rng)
        branch_caches[s] = (x, pre, mask)
        segments.append(out)
    fused_in = np.concatenate(segments, axis=1)
    fused_pre = linear_forward(fused_in, model.fusion.weight.value, model.fusion.bias.value)
    fused_act = relu_forward(fused_pre)
    embedding, fusion_mask = dropout_forward(
        fused_act, model.config.fusion_dropout, mode, rng
    )
    logits = linear_forward(embedding, model.classifier.weight.value, model.classifier.bias.value)
    if cache is not None:
        cache.update(
            branches=branch_caches,
            fused_in=fused_in,
            fused_pre=fused_pre,
            fusion_mask=fusion_mask,
            embedding=embedding,
        )
    return logits


def forward(
    model: ErmlpEModel,
    pairs,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Logits (B, P) for a batch of PairInputs."""
    return forward_stacked(model, stack_pairs(model, pairs), mode=mode, rng=rng)


def backward_stacked(model: ErmlpEModel, cache: dict, grad_logits: np.ndarray) -> None:
    """Accumulate parameter gradients from a cached forward pass."""
    grad_emb, gw, gb = linear_backward(
        grad_logits, cache["embedding"], model.classifier.weight.value
    )
    model.classifier.weight.grad += gw
    model.classifier.bias.grad += gb

    grad_fused_act = dropout_backward(grad_emb, cache["fusion_mask"])
    grad_fused_pre = relu_backward(grad_fused_act, cache["fused_pre"])
    grad_fused_in, gw, gb = linear_backward(
        grad_fused_pre, cache["fused_in"], model.fusion.weight.value
    )
    model.fusion.weight.grad += gw
    model.fusion.bias.grad += gb

    offset = 0
    for s in model.sources:
        width = model.config.branch_widths[s]
        seg = grad_fused_in[:, offset : offset + width]
        offset += width
        x, pre, mask = cache["branches"][s]
        grad_act = dropout_backward(seg, mask)
        grad_pre = relu_backward(grad_act, pre)
        _, gw, gb = linear_backward(grad_pre, x, model.branches[s].weight.value)
        model.branches[s].weight.grad += gw
        model.branches[s].bias.grad += gb


def loss_and_gradients(
    model: ErmlpEModel,
    inputs: dict[str, np.ndarray],
    targets: np.ndarray,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> float:
    """One forward/backward pass; populates parameter gradients."""
    cache: dict = {}
    logits = forward_stacked(model, inputs, mode=mode, rng=rng, cache=cache)
    loss, grad_logits = softmax_cross_entropy(logits, targets)
    backward_stacked(model, cache, grad_logits)
    return loss


@dataclass(frozen=True)
class TrainConfig:
    adam: AdamConfig = AdamConfig()
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainReport:
    epoch_mean_loss: list[float]
    final_train_accuracy: float
    wall_time_s: float


def _collect_training_inputs(
    model: ErmlpEModel, dataset: SceneDataset, store: FeatureStore
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    store.validate_against(dataset)
    mask = model.config.mask
    rows: list[PairInput] = []
    targets: list[int] = []
    for image in dataset.images:
        for t in image.triples:
            rows.append(assemble_pair(store, image, t.subject_id, t.object_id, mask))
            targets.append(t.predicate_id)
    if not rows:
        raise ValueError("dataset contains no triples to train on")
    return stack_pairs(model, rows), np.asarray(targets, dtype=np.int64)


def train(
    model: ErmlpEModel,
    dataset: SceneDataset,
    store: FeatureStore,
    config: TrainConfig,
) -> TrainReport:
    """Train over the observed triples; deterministic for a fixed seed."""
    started = time.perf_counter()
    inputs, targets = _collect_training_inputs(model, dataset, store)
    n = targets.shape[0]
    params = model.parameters()
    rng = np.random.default_rng(config.seed)

    epoch_losses: list[float] = []
    t = 0
    for _ in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = {s: inputs[s][idx] for s in model.sources}
            loss = loss_and_gradients(model, batch, targets[idx], mode="train", rng=rng)
            t += 1
            adam_step(params, config.adam, t)
            total += loss * idx.shape[0]
        epoch_losses.append(total / n)

    correct = 0
    for start in range(0, n, 4096):
        batch = {s: inputs[s][start : start + 4096] for s in model.sources}
        logits = forward_stacked(model, batch, mode="eval")
        correct += int((logits.argmax(axis=1) == targets[start : start + 4096]).sum())
    return TrainReport(
        epoch_mean_loss=epoch_losses,
        final_train_accuracy=correct / n,
        wall_time_s=time.perf_counter() - started,
    )


def predict_image(
    model: ErmlpEModel,
    image: SceneImage,
    store: FeatureStore,
    mask: AblationMask | None = None,
    graph_constraint: bool = True,
) -> list[tuple[int, int, int, float]]:
    """Rank (subject, predicate, object, score) candidates for one image.

    Scores are softmax probabilities over predicates per ordered pair. With
    the graph constraint only the best predicate per pair survives. Ties
    break by ascending (subject_id, object_id, predicate_id).
    """
    mask = model.config.mask if mask is None else mask
    entity_ids = sorted(e.entity_id for e in image.entities)
    pair_ids = [(s, o) for s in entity_ids for o in entity_ids if s != o]
    if not pair_ids:
        return []
    pairs = [assemble_pair(store, image, s, o, mask) for s, o in pair_ids]
    probs = softmax(forward(model, pairs, mode="eval"))

    candidates: list[tuple[int, int, int, float]] = []
    if graph_constraint:
        best = probs.argmax(axis=1)
        for row, (s, o) in enumerate(pair_ids):
            p = int(best[row])
            candidates.append((s, p, o, float(probs[row, p])))
    else:
        for row, (s, o) in enumerate(pair_ids):
            for p in range(probs.shape[1]):
                candidates.append((s, p, o, float(probs[row, p])))
    candidates.sort(key=lambda c: (-c[3], c[0], c[2], c[1]))
    return candidates


def _config_to_text(config: ModelConfig) -> str:
    lines = [
        "dims=" + ",".join(str(v) for v in config.dims),
        f"fusion_dropout={config.fusion_dropout!r}",
        f"fusion_width={config.fusion_width}",
        "mask=" + config.mask.label(),
        f"num_predicates={config.num_predicates}",
    ]
    for s in SOURCE_ORDER:
        lines.append(f"branch_dropout_{s}={config.branch_dropout[s]!r}")
        lines.append(f"branch_width_{s}={config.branch_widths[s]}")
    return "\n".join(sorted(lines)) + "\n"


def _config_from_text(text: str) -> ModelConfig:
    kv: dict[str, str] = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key] = value
    try:
        dims = tuple(int(v) for v in kv["dims"].split(","))
        widths = {s: int(kv[f"branch_width_{s}"]) for s in SOURCE_ORDER}
        dropout = {s: float(kv[f"branch_dropout_{s}"]) for s in SOURCE_ORDER}
        return ModelConfig(
            dims=dims,  # type: ignore[arg-type]
            num_predicates=int(kv["num_predicates"]),
            mask=AblationMask.from_label(kv["mask"]),
            branch_widths=widths,
            branch_dropout=dropout,
            fusion_width=int(kv["fusion_width"]),
            fusion_dropout=float(kv["fusion_dropout"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointShapeError(f"invalid checkpoint config block: {exc}") from exc


def save_checkpoint(model: ErmlpEModel, config: ModelConfig, path) -> None:
    """Serialize config and parameters (float64, declaration order)."""
    if config != model.config:
        raise ValueError("config does not match the model being saved")
    config_bytes = _config_to_text(config).encode("utf-8")
    chunks = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(config_bytes))]
    chunks.append(config_bytes)
    for p in model.parameters():
        rows, cols = p.value.shape
        chunks.append(_TENSOR_HEADER.pack(rows, cols))
        chunks.append(p.value.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[ErmlpEModel, ModelConfig]:
    """Rebuild a model whose eval-mode behavior matches the saved one exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CKPT_HEADER.size:
        raise CheckpointTruncatedError(
            f"file is {len(blob)} bytes, header needs {_CKPT_HEADER.size}"
        )
    magic, version, config_len = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )
    offset = _CKPT_HEADER.size
    if len(blob) < offset + config_len:
        raise CheckpointTruncatedError("config block truncated")
    config = _config_from_text(blob[offset : offset + config_len].decode("utf-8"))
    offset += config_len

    model = build_model(config, np.random.default_rng(0))
    for p in model.parameters():
        if len(blob) < offset + _TENSOR_HEADER.size:
            raise CheckpointTruncatedError("tensor header truncated")
        rows, cols = _TENSOR_HEADER.unpack_from(blob, offset)
        offset += _TENSOR_HEADER.size
        if (rows, cols) != p.value.shape:
            raise CheckpointShapeError(
                f"tensor shape {(rows, cols)} does not match config-derived "
                f"shape {p.value.shape}"
            )
        nbytes = rows * cols * 8
        if len(blob) < offset + nbytes:
            raise CheckpointTruncatedError("tensor data truncated")
        p.value[...] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset).reshape(
            rows, cols
        )
        offset += nbytes
    if offset != len(blob):
        raise CheckpointShapeError(f"{len(blob) - offset} trailing bytes after last tensor")
    return model, config
