import copy

import numpy as np
import pytest

from depthrel.features import AblationMask, FeatureStore, PairInput
from depthrel.model import (
    AdamConfig,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    MaskMismatchError,
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
from depthrel.nn import finite_difference_check, softmax_cross_entropy
from depthrel.synth import SynthConfig, synth_generate

SMALL_DIMS = (6, 8, 8)
SMALL_WIDTHS = {"c": 4, "v": 8, "d": 8, "l": 4}


def small_config(mask="l,c,v,d", num_predicates=5, fusion_width=8):
    return ModelConfig(
        dims=SMALL_DIMS,
        num_predicates=num_predicates,
        mask=AblationMask.from_label(mask),
        branch_widths=dict(SMALL_WIDTHS),
        fusion_width=fusion_width,
    )


def random_pairs(config, rng, batch):
    pairs = []
    for _ in range(batch):
        kwargs = {}
        for source in ("l", "c", "v", "d"):
            if config.mask.uses(source):
                width = config.input_width(source)
                vec = rng.normal(size=width)
                if source == "c":
                    vec = np.abs(vec)
                kwargs[f"{source}_pair"] = vec
        pairs.append(PairInput(mask=config.mask, **kwargs))
    return pairs


class TestBuildModel:
    def test_location_branch_parameter_count(self):
        config = ModelConfig(
            dims=(150, 4096, 512), num_predicates=50,
            mask=AblationMask.from_label("l"), fusion_width=64,
        )
        model = build_model(config, np.random.default_rng(0))
        branch = model.branches["l"]
        assert branch.weight.value.shape == (8, 20)
        assert branch.weight.value.size == 160  # weights only
        assert branch.weight.value.size + branch.bias.value.size == 180

    def test_class_branch_weight_count(self):
        config = ModelConfig(
            dims=(150, 16, 16), num_predicates=50,
            mask=AblationMask.from_label("c"), fusion_width=32,
        )
        model = build_model(config, np.random.default_rng(0))
        assert model.branches["c"].weight.value.shape == (300, 64)
        assert model.branches["c"].weight.value.size == 19200

    def test_full_mask_fusion_input_width(self):
        config = ModelConfig(dims=(150, 4096, 512), num_predicates=50)
        assert config.fusion_input_width() == 64 + 512 + 4096 + 20

    def test_default_hyperparameters(self):
        config = ModelConfig(dims=(150, 4096, 512), num_predicates=50)
        assert config.branch_widths == {"c": 64, "v": 512, "d": 4096, "l": 20}
        assert config.branch_dropout == {"c": 0.1, "v": 0.8, "d": 0.6, "l": 0.1}
        assert config.fusion_width == 4096
        assert config.fusion_dropout == 0.1

    def test_biases_zero_weights_bounded(self):
        config = small_config()
        model = build_model(config, np.random.default_rng(3))
        for source, layer in model.branches.items():
            assert not layer.bias.value.any()
            n_in = config.input_width(source)
            bound = np.sqrt(6.0 / (n_in + config.branch_widths[source]))
            assert np.abs(layer.weight.value).max() <= bound

    def test_empty_mask_impossible(self):
        with pytest.raises(ValueError):
            AblationMask(False, False, False, False)

    def test_parameter_count_weights_only(self):
        model = build_model(small_config("l", fusion_width=8), np.random.default_rng(0))
        # l branch 8x4, fusion 4x8, classifier 8x5
        assert model.parameter_count(include_bias=False) == 8 * 4 + 4 * 8 + 8 * 5
        assert model.parameter_count() == 8 * 4 + 4 + 4 * 8 + 8 + 8 * 5 + 5


class TestForward:
    def test_eval_deterministic(self, rng):
        config = small_config()
        model = build_model(config, rng)
        pairs = random_pairs(config, rng, 3)
        a = forward(model, pairs, mode="eval")
        b = forward(model, pairs, mode="eval")
        assert np.array_equal(a, b)

    def test_rows_independent(self, rng):
        config = small_config()
        model = build_model(config, rng)
        pairs = random_pairs(config, rng, 2)
        both = forward(model, pairs, mode="eval")
        first = forward(model, pairs[:1], mode="eval")
        second = forward(model, pairs[1:], mode="eval")
        assert np.max(np.abs(both - np.vstack([first, second]))) < 1e-12

    def test_mask_mismatch_rejected(self, rng):
        config = small_config("l")
        model = build_model(config, rng)
        full = small_config("l,c,v,d")
        pairs = random_pairs(full, rng, 2)
        with pytest.raises(MaskMismatchError):
            forward(model, pairs, mode="eval")

    def test_wrong_input_width_names_dims(self, rng):
        config = small_config("l")
        model = build_model(config, rng)
        with pytest.raises(ValueError, match="expected input width 8, found 6"):
            from depthrel.model import forward_stacked
            forward_stacked(model, {"l": np.zeros((2, 6))})

    def test_fusion_order_permutation_consistency(self, rng):
        config = small_config()
        model = build_model(config, rng)
        pairs = random_pairs(config, rng, 4)
        base = forward(model, pairs, mode="eval")

        permuted = copy.deepcopy(model)
        new_order = ("c", "d", "v", "l")
        blocks = {}
        offset = 0
        for source in model.sources:
            width = config.branch_widths[source]
            blocks[source] = model.fusion.weight.value[offset : offset + width]
            offset += width
        permuted.sources = new_order
        permuted.fusion.weight.value = np.concatenate(
            [blocks[s] for s in new_order], axis=0
        )
        assert np.max(np.abs(forward(permuted, pairs, mode="eval") - base)) < 1e-10

    def test_train_mode_uses_dropout(self, rng):
        config = small_config()
        model = build_model(config, rng)
        pairs = random_pairs(config, rng, 4)
        a = forward(model, pairs, mode="train", rng=np.random.default_rng(0))
        b = forward(model, pairs, mode="eval")
        assert not np.array_equal(a, b)

    def test_composed_gradient_check(self, rng):
        config = small_config()
        model = build_model(config, rng)
        pairs = random_pairs(config, rng, 3)
        inputs = stack_pairs(model, pairs)
        targets = np.array([0, 2, 4])

        def loss_fn():
            from depthrel.model import forward_stacked
            logits = forward_stacked(model, inputs, mode="eval")
            return softmax_cross_entropy(logits, targets)[0]

        loss_and_gradients(model, inputs, targets, mode="eval")
        error = finite_difference_check(loss_fn, model.parameters(), epsilon=1e-6)
        assert error < 1e-5


def make_training_setup(rule_set="spatial-2d", num_images=40, mask="l", seed=3,
                        zero_dropout=False):
    dataset, store = synth_generate(SynthConfig(num_images=num_images, rule_set=rule_set, seed=seed))
    kwargs = {}
    if zero_dropout:
        kwargs["branch_dropout"] = {"c": 0.0, "v": 0.0, "d": 0.0, "l": 0.0}
        kwargs["fusion_dropout"] = 0.0
    config = ModelConfig(
        dims=store.dims,
        num_predicates=dataset.num_predicates,
        mask=AblationMask.from_label(mask),
        branch_widths={"c": 16, "v": 16, "d": 16, "l": 20},
        fusion_width=32,
        **kwargs,
    )
    return dataset, store, config


class TestTrain:
    def test_zero_lr_leaves_parameters_bit_identical(self):
        # Zero dropout so the loss is a deterministic function of parameters.
        dataset, store, config = make_training_setup(num_images=6, zero_dropout=True)
        model = build_model(config, np.random.default_rng(1))
        before = [p.value.copy() for p in model.parameters()]
        report = train(
            model, dataset, store,
            TrainConfig(adam=AdamConfig(learning_rate=0.0), epochs=3, seed=0),
        )
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p.value, b)
        assert max(report.epoch_mean_loss) - min(report.epoch_mean_loss) < 1e-9

    def test_same_seed_identical_loss_curves(self):
        dataset, store, config = make_training_setup(num_images=8)
        reports = []
        for _ in range(2):
            model = build_model(config, np.random.default_rng(5))
            reports.append(
                train(model, dataset, store,
                      TrainConfig(adam=AdamConfig(learning_rate=1e-3), epochs=3, seed=11))
            )
        assert reports[0].epoch_mean_loss == reports[1].epoch_mean_loss
        assert reports[0].final_train_accuracy == reports[1].final_train_accuracy

    def test_missing_features_fails_before_training(self):
        dataset, store, config = make_training_setup(num_images=4)
        from depthrel.features import MissingFeatureError

        empty = FeatureStore(store.dims)
        model = build_model(config, np.random.default_rng(1))
        before = [p.value.copy() for p in model.parameters()]
        with pytest.raises(MissingFeatureError):
            train(model, dataset, empty, TrainConfig(epochs=1, seed=0))
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p.value, b)

    def test_convergence_on_separable_task(self):
        dataset, store, config = make_training_setup(num_images=80)
        model = build_model(config, np.random.default_rng(0))
        report = train(
            model, dataset, store,
            TrainConfig(adam=AdamConfig(learning_rate=1e-3), epochs=15, seed=0),
        )
        assert report.final_train_accuracy >= 0.95
        assert len(report.epoch_mean_loss) == 15

    def test_loss_mostly_non_increasing_and_halved(self):
        dataset, store, config = make_training_setup(num_images=60, zero_dropout=True)
        model = build_model(config, np.random.default_rng(2))
        report = train(
            model, dataset, store,
            TrainConfig(adam=AdamConfig(learning_rate=1e-3), epochs=20, seed=4),
        )
        losses = report.epoch_mean_loss
        upticks = sum(1 for a, b in zip(losses, losses[1:]) if b > a)
        assert upticks <= max(1, int(0.05 * (len(losses) - 1)))
        assert losses[-1] < 0.5 * losses[0]

    def test_wall_time_recorded(self):
        dataset, store, config = make_training_setup(num_images=4)
        model = build_model(config, np.random.default_rng(1))
        report = train(model, dataset, store, TrainConfig(epochs=1, seed=0))
        assert report.wall_time_s > 0


class TestPredictImage:
    @pytest.fixture
    def trained(self):
        dataset, store, config = make_training_setup(num_images=30)
        model = build_model(config, np.random.default_rng(0))
        train(model, dataset, store,
              TrainConfig(adam=AdamConfig(learning_rate=1e-3), epochs=10, seed=0))
        return model, dataset, store

    def test_candidate_counts(self, rng):
        dataset, store = synth_generate(SynthConfig(num_images=1, entities_per_image=(2, 2), seed=9))
        config = ModelConfig(
            dims=store.dims, num_predicates=50,
            mask=AblationMask.from_label("l"), fusion_width=16,
            branch_widths={"c": 4, "v": 4, "d": 4, "l": 8},
        )
        model = build_model(config, rng)
        image = dataset.images[0]
        unconstrained = predict_image(model, image, store, graph_constraint=False)
        constrained = predict_image(model, image, store, graph_constraint=True)
        assert len(unconstrained) == 2 * 50
        assert len(constrained) == 2

    def test_scores_sum_to_one_per_pair(self, trained):
        model, dataset, store = trained
        image = dataset.images[0]
        candidates = predict_image(model, image, store, graph_constraint=False)
        by_pair = {}
        for s, p, o, score in candidates:
            by_pair.setdefault((s, o), 0.0)
            by_pair[(s, o)] += score
        for total in by_pair.values():
            assert abs(total - 1.0) < 1e-9

    def test_ranking_matches_resort_oracle(self, trained):
        model, dataset, store = trained
        image = dataset.images[1]
        candidates = predict_image(model, image, store, graph_constraint=False)
        resorted = sorted(candidates, key=lambda c: (-c[3], c[0], c[2], c[1]))
        assert candidates == resorted

    def test_single_entity_image_empty(self, trained):
        model, dataset, store = trained
        from depthrel.data import Entity, SceneImage, BoundingBox

        lonely = SceneImage(
            999, 640, 480,
            (Entity(0, 0, BoundingBox(10, 10, 20, 20)),),
            (),
        )
        assert predict_image(model, lonely, store) == []

    def test_constraint_keeps_best_predicate(self, trained):
        model, dataset, store = trained
        image = dataset.images[2]
        unconstrained = predict_image(model, image, store, graph_constraint=False)
        constrained = predict_image(model, image, store, graph_constraint=True)
        best = {}
        for s, p, o, score in unconstrained:
            if (s, o) not in best or score > best[(s, o)][1]:
                best[(s, o)] = (p, score)
        assert {(s, o): p for s, p, o, _ in constrained} == {
            pair: p for pair, (p, _) in best.items()
        }


class TestCheckpoint:
    def test_round_trip_identical_logits(self, tmp_path, rng):
        config = small_config()
        model = build_model(config, rng)
        pairs = random_pairs(config, rng, 4)
        base = forward(model, pairs, mode="eval")
        path = tmp_path / "model.rck"
        save_checkpoint(model, config, path)
        loaded, loaded_config = load_checkpoint(path)
        assert loaded_config == config
        assert np.max(np.abs(forward(loaded, pairs, mode="eval") - base)) == 0.0

    def test_corrupted_magic(self, tmp_path, rng):
        config = small_config()
        model = build_model(config, rng)
        path = tmp_path / "model.rck"
        save_checkpoint(model, config, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XCK1"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path, rng):
        config = small_config()
        model = build_model(config, rng)
        path = tmp_path / "model.rck"
        save_checkpoint(model, config, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (42).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path, rng):
        config = small_config()
        model = build_model(config, rng)
        path = tmp_path / "model.rck"
        save_checkpoint(model, config, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path, rng):
        config = small_config()
        model = build_model(config, rng)
        path = tmp_path / "model.rck"
        save_checkpoint(model, config, path)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)

    def test_lonly_checkpoint_rejects_full_mask_inputs(self, tmp_path, rng):
        config = small_config("l")
        model = build_model(config, rng)
        path = tmp_path / "model.rck"
        save_checkpoint(model, config, path)
        loaded, _ = load_checkpoint(path)
        full_pairs = random_pairs(small_config("l,c,v,d"), rng, 2)
        with pytest.raises(MaskMismatchError):
            forward(loaded, full_pairs, mode="eval")

    def test_config_model_consistency_enforced(self, tmp_path, rng):
        model = build_model(small_config("l"), rng)
        other = small_config("l,d")
        with pytest.raises(ValueError, match="does not match"):
            save_checkpoint(model, other, tmp_path / "model.rck")
