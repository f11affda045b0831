"""
Тесты игрушечного обучения: синтетическая задача, конфигурация, тренер,
извлечение признаков и матрица оптимизаторов x головы
"""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from vitscale.core.exceptions import (
    ConfigurationError,
    DivergenceError,
    ShapeError,
    UnknownOptimizerError,
)
from vitscale.core.models import ShapeConfig
from vitscale.core.optim import OptimConfig, WeightDecayRule
from vitscale.core.probe import probe_accuracy, raw_pixel_features
from vitscale.core.schedules import ScheduleConfig
from vitscale.core.vit import clone_params, init_params
from vitscale.training.config import (
    MICRO_SHAPE,
    SyntheticSpec,
    TrainConfig,
    load_train_file,
    shape_from_model_block,
)
from vitscale.training.synthetic import (
    class_templates,
    gen_synthetic,
    nearest_template_accuracy,
)
from vitscale.training.trainer import (
    BatchSampler,
    Trainer,
    TrainLog,
    accuracy,
    extract_features,
    train,
)

OPTIMIZERS = ("adam", "adam-hp", "adafactor-mod")
HEADS = ("CLS", "GAP", "MAP")


def make_config(steps=5, optimizer="adam", head="MAP", lr=3e-3, batch=16,
                log_every=1, **changes) -> TrainConfig:
    warmup = min(100, steps)
    schedule = ScheduleConfig(base_lr=lr, warmup_steps=warmup, decay_type="rsqrt",
                              timescale=200, total_steps=steps,
                              cooldown_steps=min(200, steps - warmup))
    return TrainConfig(shape=ShapeConfig(**MICRO_SHAPE, head_type=head),
                       schedule=schedule, optimizer=optimizer, batch=batch,
                       total_steps=steps, log_every=log_every, **changes)


@pytest.fixture
def small_task():
    return gen_synthetic(SyntheticSpec(n_per_class=8, noise=0.05, seed=0))


# =============================================================================
# Синтетическая задача
# =============================================================================

class TestSynthetic:
    """Шаблоны классов и генерация данных"""

    def test_shapes_and_label_order(self):
        images, labels = gen_synthetic(SyntheticSpec(n_per_class=5))
        assert images.shape == (20, 16, 16, 3)
        np.testing.assert_array_equal(labels, np.repeat(np.arange(4), 5))

    def test_deterministic(self):
        spec = SyntheticSpec(seed=4)
        a, _ = gen_synthetic(spec)
        b, _ = gen_synthetic(spec)
        np.testing.assert_array_equal(a, b)

    def test_templates_distinct(self):
        templates = class_templates(SyntheticSpec(classes=8))
        flat = templates.reshape(8, -1)
        distances = np.linalg.norm(flat[:, None] - flat[None], axis=2)
        assert np.all(distances[~np.eye(8, dtype=bool)] > 0)

    def test_noise_free_images_are_templates(self):
        spec = SyntheticSpec(noise=0.0, n_per_class=2)
        images, labels = gen_synthetic(spec)
        np.testing.assert_array_equal(images, class_templates(spec)[labels])

    def test_nearest_template_oracle(self):
        spec = SyntheticSpec(noise=0.1, classes=4, res=16, n_per_class=100)
        images, labels = gen_synthetic(spec)
        assert nearest_template_accuracy(images, labels,
                                         class_templates(spec)) >= 0.99

    @pytest.mark.parametrize("changes", [
        {"classes": 1}, {"noise": -0.1}, {"res": 15}, {"classes": 33},
        {"template_gap": 0.0}, {"n_per_class": 0},
    ])
    def test_invalid_spec(self, changes):
        with pytest.raises(ConfigurationError):
            SyntheticSpec(**changes)


# =============================================================================
# Конфигурация
# =============================================================================

class TestTrainConfig:
    """Валидация и JSON формат"""

    def test_unknown_optimizer(self):
        with pytest.raises(UnknownOptimizerError):
            make_config(optimizer="sgd")

    def test_decay_product_checked_up_front(self):
        with pytest.raises(ConfigurationError):
            make_config(base_wd=0.02)

    def test_custom_rules_allow_larger_decay(self):
        config = make_config(base_wd=0.02,
                             wd_rules=(WeightDecayRule(".*/kernel", 1.0),))
        assert config.base_wd == 0.02

    @pytest.mark.parametrize("changes", [
        {"batch": 0}, {"total_steps": -1}, {"polyak_decay": 1.0},
        {"loss": "hinge"}, {"log_every": 0}, {"base_wd": -1.0},
    ])
    def test_invalid_fields(self, changes):
        with pytest.raises(ConfigurationError):
            replace(make_config(), **changes)

    def test_dict_round_trip(self):
        config = make_config(steps=50, optimizer="adafactor-mod", head="CLS",
                             polyak_decay=0.99, loss="sigmoid", init_head_bias=-10.0)
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_from_dict_defaults(self):
        config = TrainConfig.from_dict({"lr": 8e-4})
        assert config.optimizer == "adafactor-mod"
        assert config.shape == ShapeConfig(**MICRO_SHAPE)
        assert config.optim == OptimConfig()

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"lr": 1e-3, "momentum": 0.9})

    def test_lr_required(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"total_steps": 10})

    def test_model_block_variant(self):
        shape = shape_from_model_block({"variant": "B/16", "pool_type": "tok",
                                        "classes": 10})
        assert (shape.width, shape.head_type, shape.num_classes) == (768, "CLS", 10)

    def test_model_block_unknown_key(self):
        with pytest.raises(ConfigurationError):
            shape_from_model_block({"hidden": 32})

    def test_load_file_with_data_block(self, tmp_path):
        path = tmp_path / "train.json"
        path.write_text(json.dumps({
            "lr": 1e-3, "total_steps": 20, "batch_size": 8,
            "model": {"res": 8, "patch": 4, "classes": 3},
            "data": {"n_per_class": 4, "noise": 0.2},
        }), encoding="utf-8")
        config, spec = load_train_file(path)
        assert config.batch == 8
        assert (spec.res, spec.classes, spec.noise) == (8, 3, 0.2)

    def test_load_file_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{lr: ", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_train_file(path)


# =============================================================================
# Тренер
# =============================================================================

class TestBatchSampler:
    """Перестановки по эпохам"""

    def test_epoch_covers_all_examples(self):
        sampler = BatchSampler(12, 4, seed=0)
        seen = np.concatenate([sampler.next() for _ in range(3)])
        assert sorted(seen.tolist()) == list(range(12))

    def test_batch_capped_by_dataset(self):
        assert len(BatchSampler(5, 32, seed=0).next()) == 5


class TestTrainer:
    """Шаги, журнал и отказоустойчивость"""

    def test_bit_reproducible(self, small_task):
        images, labels = small_task
        params_a, log_a = train(make_config(steps=4), images, labels)
        params_b, log_b = train(make_config(steps=4), images, labels)
        assert log_a.losses == log_b.losses
        for name in params_a:
            np.testing.assert_array_equal(params_a[name].data, params_b[name].data)

    def test_first_loss_is_log_classes(self, small_task):
        images, labels = small_task
        _, log = train(make_config(steps=1), images, labels)
        assert log.rows[0].loss == pytest.approx(math.log(4))
        assert log.rows[0].step == 1

    def test_zero_steps_keeps_init(self, small_task):
        images, labels = small_task
        config = make_config(steps=0)
        params, log = train(config, images, labels)
        initial = init_params(config.shape, seed=config.seed)
        assert log.rows == []
        for name in initial:
            np.testing.assert_array_equal(params[name].data, initial[name].data)

    def test_loss_decreases(self, small_task):
        images, labels = small_task
        _, log = train(make_config(steps=30, batch=32, lr=3e-3), images, labels)
        assert np.mean(log.losses[-5:]) < log.losses[0]

    def test_divergence_reports_last_good_step(self, small_task):
        images, labels = small_task
        config = make_config(steps=3)
        params = init_params(config.shape)
        params["head/bias"].data[0] = np.nan
        with pytest.raises(DivergenceError) as info:
            Trainer(config, params=params).run(images, labels)
        assert (info.value.step, info.value.last_good_step) == (1, 0)

    def test_clipping_recorded(self, small_task):
        images, labels = small_task
        config = make_config(steps=3, optim=OptimConfig(grad_clip_norm=1e-6))
        _, log = train(config, images, labels)
        assert log.clipped_steps == [1, 2, 3]
        assert all(row.grad_norm > 1e-6 for row in log.rows)

    def test_clipping_engages_at_default_lr(self, small_task):
        images, labels = small_task
        trainer = Trainer(make_config(steps=10, lr=8e-4, batch=32))
        params, log = trainer.run(images, labels)
        assert log.clipped_steps and min(log.clipped_steps) <= 10
        assert all(math.isfinite(loss) for loss in log.losses)
        assert all(np.all(np.isfinite(p.data)) for p in params.values())

    def test_head_decay_multiplier_shrinks_head(self, small_task):
        images, labels = small_task
        norms = {}
        for mult in (1.0, 100.0):
            rules = (WeightDecayRule(".*head/kernel", mult),
                     WeightDecayRule(".*/kernel", 1.0))
            config = make_config(steps=20, base_wd=3e-3, wd_rules=rules)
            params, _ = train(config, images, labels)
            norms[mult] = np.linalg.norm(params["head/kernel"].data)
        assert norms[100.0] < norms[1.0]

    def test_bf16_momentum_tracks_full_precision(self, small_task):
        images, labels = small_task
        finals = {}
        for optimizer in ("adam", "adam-hp"):
            _, log = train(make_config(steps=60, optimizer=optimizer), images, labels)
            finals[optimizer] = float(np.mean(log.losses[-10:]))
        assert finals["adam-hp"] == pytest.approx(finals["adam"], rel=0.2)

    def test_polyak_average_returned(self, small_task):
        images, labels = small_task
        trainer = Trainer(make_config(steps=3, polyak_decay=0.5))
        averaged, _ = trainer.run(images, labels)
        live = trainer.params["embed/kernel"].data
        assert not np.array_equal(averaged["embed/kernel"].data, live)

    def test_weight_decay_changes_result(self, small_task):
        images, labels = small_task
        plain, _ = train(make_config(steps=3), images, labels)
        rules = (WeightDecayRule(".*/kernel", 1.0),)
        config = make_config(steps=3, base_wd=0.1, wd_rules=rules)
        decayed, _ = train(config, images, labels)
        shrunk = np.linalg.norm(decayed["embed/kernel"].data)
        assert shrunk < np.linalg.norm(plain["embed/kernel"].data)

    def test_data_shape_checked(self):
        config = make_config(steps=1)
        with pytest.raises(ShapeError):
            train(config, np.zeros((4, 8, 8, 3)), np.zeros(4, dtype=int))

    def test_log_csv(self, small_task, tmp_path):
        images, labels = small_task
        _, log = train(make_config(steps=2), images, labels)
        path = tmp_path / "logs" / "train.csv"
        log.to_csv(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "step,loss,lr,grad_norm"
        assert len(lines) == 3
        assert lines[1].startswith("1,")

    def test_empty_log(self):
        assert TrainLog().final_loss is None


class TestFeatures:
    """Замороженные признаки и точность"""

    def test_extract_shapes(self, micro_shape, small_task):
        images, labels = small_task
        params = init_params(micro_shape)
        features = extract_features(params, images, micro_shape, labels=labels)
        assert (features.n, features.dim) == (32, micro_shape.width)
        np.testing.assert_array_equal(features.y, labels)

    def test_missing_labels_default_to_zero(self, micro_shape, small_task):
        images, _ = small_task
        features = extract_features(init_params(micro_shape), images, micro_shape)
        assert np.all(features.y == 0)

    def test_extraction_leaves_params_untouched(self, micro_shape, small_task):
        images, _ = small_task
        params = init_params(micro_shape)
        before = clone_params(params)
        extract_features(params, images, micro_shape)
        for name in params:
            np.testing.assert_array_equal(params[name].data, before[name].data)

    def test_accuracy_range(self, micro_shape, small_task):
        images, labels = small_task
        value = accuracy(init_params(micro_shape), images, labels, micro_shape)
        # нулевой классификатор: argmax всегда класс 0
        assert value == pytest.approx(0.25)


# =============================================================================
# Матрица обучения
# =============================================================================

@pytest.mark.slow
class TestTrainingMatrix:
    """Каждый оптимизатор с каждой головой обучается на синтетической задаче"""

    @pytest.mark.parametrize("optimizer", OPTIMIZERS)
    @pytest.mark.parametrize("head", HEADS)
    def test_reaches_train_accuracy(self, optimizer, head):
        images, labels = gen_synthetic(SyntheticSpec(n_per_class=64, noise=0.05))
        config = make_config(steps=2000, optimizer=optimizer, head=head, batch=32,
                             log_every=500)
        params, log = train(config, images, labels)
        assert all(math.isfinite(loss) for loss in log.losses)
        assert accuracy(params, images, labels, config.shape) >= 0.95

    def test_features_beat_raw_pixels(self):
        spec = SyntheticSpec(n_per_class=128, noise=0.3, template_gap=0.1, seed=1)
        images, labels = gen_synthetic(spec)
        test_spec = SyntheticSpec(n_per_class=64, noise=0.3, template_gap=0.1, seed=2)
        test_images, test_labels = gen_synthetic(test_spec)

        config = make_config(steps=2000, head="MAP", batch=32, log_every=500)
        params, _ = train(config, images, labels)
        shape = config.shape
        train_features = extract_features(params, images, shape, labels=labels)
        test_features = extract_features(params, test_images, shape,
                                         labels=test_labels)
        learned = probe_accuracy(train_features, test_features, k=10, seed=0)

        raw = probe_accuracy(raw_pixel_features(images, labels, 4),
                             raw_pixel_features(test_images, test_labels, 4),
                             k=10, seed=0)
        assert learned >= raw + 0.10
