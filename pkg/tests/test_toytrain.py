import json
import math

import numpy as np
import pytest

from negbound.datamodel import AugmentationSpec
from negbound.errors import DivergenceError
from negbound.rng import stream
from negbound.toytrain import (
    TrainConfig,
    contrastive_loss_and_grad,
    encode,
    evaluate_classifiers,
    generate_synthetic,
    gradient_check,
    init_encoder,
    moving_average,
    nearest_center_accuracy,
    sample_training_tuples,
    train_encoder,
)

SMALL = TrainConfig(n_classes=4, samples_per_class=40, input_dim=8, embed_dim=4, k_negatives=7, epochs=4, probe_epochs=50)


@pytest.fixture(scope="module")
def default_run():
    return train_encoder(TrainConfig(k_negatives=31))


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = SMALL.replace(hidden_dim=6)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.from_json(p) == cfg

    def test_partial_json_takes_defaults(self):
        cfg = TrainConfig.from_dict({"epochs": 3, "augmentation": {"kind": "compose", "sigma": 0.2, "drop_rate": 0.1}})
        assert cfg.epochs == 3 and cfg.n_classes == 10
        assert cfg.augmentation == AugmentationSpec("compose", 0.2, 0.1)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize(
        "kw", [{"n_classes": 0}, {"embed_dim": 0}, {"hidden_dim": -1}, {"temperature": 0.0}, {"cluster_sigma": -1.0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SMALL.replace(**kw)


class TestSynthetic:
    def test_rejects_small_input_dim(self):
        with pytest.raises(ValueError, match="input_dim"):
            generate_synthetic(SMALL.replace(input_dim=3))

    def test_zero_sigma_collapses_to_centers(self):
        data = generate_synthetic(SMALL.replace(cluster_sigma=0.0))
        assert np.allclose(data.x_train, data.centers[data.y_train], atol=0)

    def test_centers_orthogonal_at_separation(self):
        data = generate_synthetic(SMALL)
        g = data.centers @ data.centers.T
        assert np.allclose(g, 16 * np.eye(4), atol=1e-10)

    def test_stratified_split(self):
        data = generate_synthetic(SMALL)
        assert np.bincount(data.y_val).tolist() == [4] * 4
        assert np.bincount(data.y_train).tolist() == [36] * 4

    def test_deterministic(self):
        a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
        assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_val, b.y_val)

    def test_default_nearest_center(self):
        assert nearest_center_accuracy(generate_synthetic(TrainConfig())) >= 0.95


class TestGradients:
    @pytest.mark.parametrize("hidden", [0, 5])
    def test_finite_differences(self, hidden):
        cfg = TrainConfig(n_classes=3, samples_per_class=4, input_dim=4, hidden_dim=hidden, embed_dim=3, k_negatives=3)
        data = generate_synthetic(cfg)
        params = init_encoder(cfg, stream(1, "init"))
        xa, xp, xn = sample_training_tuples(data, cfg, stream(2, "tuples"), n=5)
        assert gradient_check(params, xa, xp, xn, 0.5) < 1e-4

    def test_constant_encoder_loss(self):
        cfg = SMALL
        data = generate_synthetic(cfg)
        params = {"W": np.zeros((4, 8))}
        params["W"][0, 0] = 1.0
        xa, xp, xn = sample_training_tuples(data, cfg, stream(0, "t"))
        # every input maps to the sign of its first coordinate; force one direction
        xa[:, 0], xp[:, 0], xn[:, :, 0] = 1.0, 1.0, 1.0
        loss, per, _ = contrastive_loss_and_grad(params, xa, xp, xn, 0.5)
        assert loss == pytest.approx(math.log(8), abs=1e-12)

    def test_outputs_unit_norm(self):
        params = init_encoder(SMALL, stream(0, "t"))
        z, _ = encode(params, stream(1, "t").normal(size=(10, 8)))
        assert np.allclose(np.linalg.norm(z, axis=1), 1.0)


class TestTraining:
    def test_zero_learning_rate(self):
        cfg = SMALL.replace(learning_rate=0.0)
        res = train_encoder(cfg)
        init = init_encoder(cfg, stream(cfg.seed, "encoder-init"))
        assert np.array_equal(res.params["W"], init["W"])
        losses = [row[1] for row in res.loss_trace]
        assert len(set(losses)) == 1

    def test_zero_epochs_emits_untrained_embeddings(self):
        res = train_encoder(SMALL.replace(epochs=0))
        assert res.loss_trace == []
        assert res.train_set.normalized and res.train_set.n == 144

    def test_deterministic(self):
        a, b = train_encoder(SMALL), train_encoder(SMALL)
        assert a.loss_trace == b.loss_trace
        assert (a.mean_acc, a.probe_acc) == (b.mean_acc, b.probe_acc)
        assert np.array_equal(a.val_set.features, b.val_set.features)

    def test_divergence(self):
        with pytest.raises(DivergenceError) as info:
            train_encoder(SMALL.replace(learning_rate=1e300, temperature=0.01))
        assert info.value.trace

    def test_hidden_layer_and_preprojection(self):
        res = train_encoder(SMALL.replace(hidden_dim=6, report_preprojection=True))
        assert set(res.params) == {"W1", "b1", "W2"}
        assert 0.0 <= res.preprojection_probe_acc <= 1.0

    def test_trace_finite(self):
        res = train_encoder(SMALL)
        assert all(math.isfinite(v) for _, v, _ in res.loss_trace)

    def test_separation_zero_untrained_is_chance(self):
        cfg = TrainConfig(cluster_separation=0.0, epochs=0, samples_per_class=300, probe_epochs=100)
        res = train_encoder(cfg)
        n = res.val_set.n
        sigma = math.sqrt(0.1 * 0.9 / n)
        assert abs(res.mean_acc - 0.1) < 3 * sigma
        assert abs(res.probe_acc - 0.1) < 3 * sigma

    def test_zero_sigma_large_separation_perfect(self):
        res = train_encoder(SMALL.replace(cluster_sigma=0.0, cluster_separation=20.0))
        assert res.mean_acc == 1.0 and res.probe_acc == 1.0

    def test_evaluate_classifiers_repeatable(self):
        res = train_encoder(SMALL)
        assert evaluate_classifiers(res) == (res.mean_acc, res.probe_acc)


class TestDefaultRun:
    def test_learns_below_constant_ceiling(self, default_run):
        assert default_run.loss_trace[-1][1] < math.log(32) - 0.5

    def test_moving_average_non_increasing(self, default_run):
        ma = moving_average([v for _, v, _ in default_run.loss_trace], 20)
        assert ma.size > 0
        assert np.all(np.diff(ma) <= 0)

    def test_probe_close_to_mean_classifier(self, default_run):
        assert default_run.probe_acc >= default_run.mean_acc - 0.02

    def test_probe_loss_below_mean_classifier_loss(self, default_run):
        assert default_run.probe_train_ce <= default_run.mean_train_ce + 1e-6

    def test_embeddings_normalized(self, default_run):
        assert np.allclose(np.linalg.norm(default_run.val_set.features, axis=1), 1.0)
        assert not default_run.train_unnormalized.normalized
