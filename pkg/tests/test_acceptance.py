"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see per-criterion lines.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from depthrel.cli import EXIT_OK, main
from depthrel.data import BoundingBox, Entity, SceneDataset, SceneImage, Triple
from depthrel.features import (
    AblationMask,
    MagicMismatchError,
    PairInput,
    TruncatedFileError,
    location_features,
    read_feature_file,
    write_feature_file,
)
from depthrel.metrics import (
    K_EFFECTIVE,
    PredictionSet,
    macro_recall_at_k,
    micro_recall_at_k,
    per_predicate_recall,
)
from depthrel.model import (
    AdamConfig,
    CheckpointMagicError,
    CheckpointTruncatedError,
    ModelConfig,
    TrainConfig,
    build_model,
    forward,
    load_checkpoint,
    loss_and_gradients,
    predict_image,
    save_checkpoint,
    stack_pairs,
    train,
)
from depthrel.nn import (
    Parameter,
    dropout_backward,
    dropout_forward,
    finite_difference_check,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from depthrel.synth import PREDICATES, SynthConfig, synth_generate

from conftest import random_store
from test_metrics import _random_instance, brute_force_macro, brute_force_micro


def _report(name, started, budget_s):
    elapsed = time.perf_counter() - started
    assert elapsed < budget_s, f"{name} took {elapsed:.1f}s, budget {budget_s}s"
    print(f"ACCEPTANCE PASS: {name} ({elapsed:.1f}s)")


def test_gradient_correctness():
    """Finite differences validate every layer and the composed model."""
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0

    # Linear layer.
    x = rng.normal(size=(4, 5))
    w, b = Parameter(rng.normal(size=(5, 3))), Parameter(rng.normal(size=(1, 3)))
    r = rng.normal(size=(4, 3))
    _, gw, gb = linear_backward(r, x, w.value)
    w.grad[...], b.grad[...] = gw, gb
    worst = max(worst, finite_difference_check(
        lambda: float((linear_forward(x, w.value, b.value) * r).sum()), [w, b]
    ))

    # ReLU away from the kink.
    xr = rng.normal(size=(4, 6))
    xr[np.abs(xr) < 1e-4] = 0.3
    p = Parameter(xr)
    rr = rng.normal(size=(4, 6))
    p.grad[...] = relu_backward(rr, p.value)
    worst = max(worst, finite_difference_check(
        lambda: float((relu_forward(p.value) * rr).sum()), [p]
    ))

    # Dropout with a fixed mask.
    pd = Parameter(rng.normal(size=(3, 5)))
    _, mask = dropout_forward(pd.value, 0.4, "train", rng)
    rd = rng.normal(size=(3, 5))
    pd.grad[...] = dropout_backward(rd, mask)
    worst = max(worst, finite_difference_check(
        lambda: float((pd.value * mask * rd).sum()), [pd]
    ))

    # Softmax cross-entropy.
    pl = Parameter(rng.normal(size=(4, 7)))
    targets = np.array([0, 3, 6, 2])
    pl.grad[...] = softmax_cross_entropy(pl.value, targets)[1]
    worst = max(worst, finite_difference_check(
        lambda: softmax_cross_entropy(pl.value, targets)[0], [pl]
    ))

    # Composed model at the stated small dimensions.
    config = ModelConfig(
        dims=(6, 8, 8),
        num_predicates=5,
        mask=AblationMask.from_label("l,c,v,d"),
        branch_widths={"c": 4, "v": 8, "d": 8, "l": 4},
        fusion_width=8,
    )
    model = build_model(config, rng)
    pairs = []
    for _ in range(3):
        pairs.append(PairInput(
            mask=config.mask,
            l_pair=rng.normal(size=8),
            c_pair=np.abs(rng.normal(size=12)),
            v_pair=rng.normal(size=16),
            d_pair=rng.normal(size=16),
        ))
    inputs = stack_pairs(model, pairs)
    model_targets = np.array([0, 2, 4])

    from depthrel.model import forward_stacked

    def model_loss():
        return softmax_cross_entropy(
            forward_stacked(model, inputs, mode="eval"), model_targets
        )[0]

    loss_and_gradients(model, inputs, model_targets, mode="eval")
    worst = max(worst, finite_difference_check(
        model_loss, model.parameters(), epsilon=1e-6
    ))

    assert worst < 1e-5, f"max relative gradient error {worst:.2e}"
    _report(f"gradient correctness (max rel err {worst:.2e})", started, 10.0)


def test_metric_oracle_equivalence():
    """Micro/Macro Recall@K match a brute-force reference exactly, 100 cases."""
    started = time.perf_counter()
    rng = np.random.default_rng(99)
    for _ in range(100):
        gt, preds = _random_instance(rng, int(rng.integers(1, 6)), 6, 8)
        for k in (1, 3, 10):
            assert micro_recall_at_k(preds, gt, k) == brute_force_micro(preds, gt, k)
            assert macro_recall_at_k(preds, gt, k) == brute_force_macro(preds, gt, k)
    _report("metric oracle equivalence (100 instances, K in {1,3,10})", started, 10.0)


def test_location_feature_properties():
    """Hand-computed example to 1e-12 and invariance to 1e-9 over 1000 pairs."""
    started = time.perf_counter()
    got = location_features(BoundingBox(2, 4, 10, 20), BoundingBox(1, 2, 5, 10))
    expected = np.array([0.2, 0.2, math.log(2.0), math.log(2.0)])
    assert np.max(np.abs(got - expected)) < 1e-12

    rng = np.random.default_rng(5)
    for _ in range(1000):
        boxes = []
        for _ in range(2):
            boxes.append(BoundingBox(
                float(rng.uniform(-100, 100)), float(rng.uniform(-100, 100)),
                float(rng.uniform(0.1, 100)), float(rng.uniform(0.1, 100)),
            ))
        base = location_features(boxes[0], boxes[1])
        dx, dy = rng.uniform(-100, 100, size=2)
        alpha = float(rng.uniform(0.01, 100.0))
        moved = location_features(
            BoundingBox(alpha * (boxes[0].x + dx), alpha * (boxes[0].y + dy),
                        alpha * boxes[0].w, alpha * boxes[0].h),
            BoundingBox(alpha * (boxes[1].x + dx), alpha * (boxes[1].y + dy),
                        alpha * boxes[1].w, alpha * boxes[1].h),
        )
        assert np.max(np.abs(moved - base)) < 1e-9
    _report("location-feature properties", started, 5.0)


def test_convergence_and_zero_lr_control():
    """Location-only model reaches 95% micro R@K-effective on 2-D rules."""
    started = time.perf_counter()
    dataset, store = synth_generate(
        SynthConfig(num_images=500, rule_set="spatial-2d", noise_level=0.0, seed=42)
    )
    config = ModelConfig(
        dims=store.dims,
        num_predicates=dataset.num_predicates,
        mask=AblationMask.from_label("l"),
        fusion_width=64,
    )
    model = build_model(config, np.random.default_rng(0))
    report = train(
        model, dataset, store,
        TrainConfig(adam=AdamConfig(learning_rate=1e-3), epochs=30, seed=0),
    )
    assert len(report.epoch_mean_loss) == 30
    ranked = {
        img.image_id: predict_image(model, img, store, graph_constraint=True)
        for img in dataset.images
    }
    recall = micro_recall_at_k(PredictionSet.from_ranked(ranked), dataset, K_EFFECTIVE)
    assert recall >= 0.95, f"micro R@K-effective {recall:.4f} below 0.95"

    control = build_model(config, np.random.default_rng(0))
    before = [p.value.copy() for p in control.parameters()]
    train(control, dataset, store,
          TrainConfig(adam=AdamConfig(learning_rate=0.0), epochs=30, seed=0))
    for p, b in zip(control.parameters(), before):
        assert np.array_equal(p.value, b), "lr=0 must leave parameters bit-identical"
    _report(f"convergence (micro R@K-eff {recall:.4f}) and lr=0 control", started, 300.0)


def test_depth_ablation_direction():
    """Adding depth to location lifts the depth-dependent predicate recalls."""
    started = time.perf_counter()
    dataset, store = synth_generate(
        SynthConfig(num_images=240, rule_set="spatial-3d", noise_level=0.0, seed=11)
    )
    depth_preds = (PREDICATES.index("behind"), PREDICATES.index("in-front-of"))

    def depth_macro(mask_label):
        config = ModelConfig(
            dims=store.dims,
            num_predicates=dataset.num_predicates,
            mask=AblationMask.from_label(mask_label),
            branch_widths={"c": 16, "v": 16, "d": 32, "l": 20},
            fusion_width=64,
        )
        model = build_model(config, np.random.default_rng(0))
        train(model, dataset, store,
              TrainConfig(adam=AdamConfig(learning_rate=1e-3), epochs=15, seed=0))
        ranked = {
            img.image_id: predict_image(model, img, store, graph_constraint=True)
            for img in dataset.images
        }
        per_p = per_predicate_recall(PredictionSet.from_ranked(ranked), dataset, K_EFFECTIVE)
        return sum(per_p[p][0] for p in depth_preds) / len(depth_preds)

    location_only = depth_macro("l")
    location_and_depth = depth_macro("l,d")
    gap = location_and_depth - location_only
    assert gap >= 0.2, (
        f"expected l,d to exceed l by >= 0.2 on behind/in-front-of, got "
        f"{location_and_depth:.3f} vs {location_only:.3f}"
    )
    _report(f"depth-ablation direction (gap {gap:.3f})", started, 240.0)


def test_macro_micro_divergence_fixture():
    """Three hits of one predicate, one miss of another: 0.75 pooled vs 0.5 macro."""
    started = time.perf_counter()
    gt = SceneDataset(
        ("thing",),
        ("p0", "p1"),
        (
            SceneImage(
                0, 100, 100,
                tuple(Entity(i, 0, BoundingBox(1 + i, 1, 1, 1)) for i in range(3)),
                (Triple(0, 0, 1), Triple(1, 0, 2), Triple(2, 0, 0), Triple(0, 1, 2)),
            ),
        ),
    )
    preds = PredictionSet.from_ranked(
        {0: [(0, 0, 1, 0.9), (1, 0, 2, 0.8), (2, 0, 0, 0.7)]}
    )
    assert micro_recall_at_k(preds, gt, 10, pooled=True) == 0.75
    assert macro_recall_at_k(preds, gt, 10) == 0.5
    _report("macro-vs-micro divergence fixture", started, 5.0)


def _digests(directory):
    return {
        p.relative_to(directory).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(directory.rglob("*"))
        if p.is_file()
    }


def test_determinism_echoed_config_reruns(tmp_path):
    """synth, train, and eval reruns from echoed configs are byte-identical."""
    started = time.perf_counter()
    data = tmp_path / "data"
    rc = main(["synth", "--images", "20", "--rules", "spatial-3d", "--seed", "9",
               "--out", str(data)])
    assert rc == EXIT_OK
    run = tmp_path / "run"
    rc = main(["train", "--dataset", str(data / "dataset.json"),
               "--features", str(data / "features.rfb"),
               "--mask", "l,d", "--lr", "1e-3", "--epochs", "4",
               "--fusion-width", "32", "--widths", "c=8,v=8,d=8,l=16",
               "--seed", "1", "--out", str(run)])
    assert rc == EXIT_OK
    ev = tmp_path / "eval"
    rc = main(["eval", "--dataset", str(data / "dataset.json"),
               "--features", str(data / "features.rfb"),
               "--checkpoint", str(run / "checkpoint.rck"),
               "--k", "20,50,100", "--out", str(ev)])
    assert rc == EXIT_OK

    snapshots = {d: _digests(d) for d in (data, run, ev)}
    for directory, command in ((data, "synth"), (run, "train"), (ev, "eval")):
        rc = main([command, "--config", str(directory / f"{command}.config.ini")])
        assert rc == EXIT_OK
        assert _digests(directory) == snapshots[directory], f"{command} rerun differed"
    _report("determinism of echoed-config reruns", started, 60.0)


def test_format_round_trips(tmp_path):
    """Feature files and checkpoints round-trip bit-exactly; corruption raises."""
    started = time.perf_counter()
    rng = np.random.default_rng(123)

    for trial in range(3):
        store = random_store(rng, dims=(5, 9, 4), n_records=100)
        path = tmp_path / f"store_{trial}.rfb"
        write_feature_file(store, path)
        assert read_feature_file(path) == store

    feature_path = tmp_path / "store_0.rfb"
    corrupted = bytearray(feature_path.read_bytes())
    corrupted[:4] = b"ZZB1"
    bad_path = tmp_path / "bad.rfb"
    bad_path.write_bytes(bytes(corrupted))
    with pytest.raises(MagicMismatchError):
        read_feature_file(bad_path)
    truncated = feature_path.read_bytes()[:-7]
    bad_path.write_bytes(truncated)
    with pytest.raises(TruncatedFileError):
        read_feature_file(bad_path)

    config = ModelConfig(
        dims=(6, 8, 8),
        num_predicates=5,
        mask=AblationMask.from_label("l,c,v,d"),
        branch_widths={"c": 4, "v": 8, "d": 8, "l": 4},
        fusion_width=8,
    )
    for trial in range(3):
        model = build_model(config, np.random.default_rng(trial))
        pairs = [
            PairInput(
                mask=config.mask,
                l_pair=rng.normal(size=8),
                c_pair=np.abs(rng.normal(size=12)),
                v_pair=rng.normal(size=16),
                d_pair=rng.normal(size=16),
            )
            for _ in range(3)
        ]
        base = forward(model, pairs, mode="eval")
        ckpt = tmp_path / f"model_{trial}.rck"
        save_checkpoint(model, config, ckpt)
        loaded, _ = load_checkpoint(ckpt)
        assert np.max(np.abs(forward(loaded, pairs, mode="eval") - base)) == 0.0

    ckpt_blob = bytearray((tmp_path / "model_0.rck").read_bytes())
    ckpt_blob[:4] = b"ZCK1"
    bad_ckpt = tmp_path / "bad.rck"
    bad_ckpt.write_bytes(bytes(ckpt_blob))
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(bad_ckpt)
    bad_ckpt.write_bytes((tmp_path / "model_0.rck").read_bytes()[:-9])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(bad_ckpt)

    _report("format round-trips and corruption fixtures", started, 30.0)
