from collections import Counter

import numpy as np
import pytest

import faultfit.training as training
from faultfit.fault import BitFlip, Gaussian
from faultfit.fixedpoint import QFormat
from faultfit.nn import Adam, DenseLayer, DenseNetwork, forward, mse_loss
from faultfit.training import (
    TrainConfig,
    fault_training_epoch,
    regular_epoch,
    train,
    write_history_csv,
)


def toy_autoencoder(seed=0, widths=(6, 4, 2, 4, 6)):
    return DenseNetwork.build(list(widths), np.random.default_rng(seed))


def toy_images(seed=0, n=40, dim=6):
    return np.random.default_rng(seed).uniform(size=(n, dim))


class TestRegularEpoch:
    def test_zero_learning_rate(self):
        net = toy_autoencoder()
        X = toy_images()
        before = net.parameter_vector()
        initial = mse_loss(forward(net, X)[0], X)
        loss = regular_epoch(net, X, X, Adam(learning_rate=0.0), np.random.default_rng(0), 7)
        np.testing.assert_array_equal(net.parameter_vector(), before)
        assert loss == pytest.approx(initial, rel=1e-12)

    def test_linear_regression_loss_decreases(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, size=(64, 1))
        y = 3.0 * x + 1.0
        net = DenseNetwork([DenseLayer([[0.0]], [0.0], "identity")])
        opt = Adam(learning_rate=0.05)
        losses = [regular_epoch(net, x, y, opt, rng, 8) for _ in range(10)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_same_seed_same_losses(self):
        def run():
            net = toy_autoencoder(3)
            X = toy_images(3)
            rng = np.random.default_rng(11)
            opt = Adam()
            return [regular_epoch(net, X, X, opt, rng, 8) for _ in range(3)]

        assert run() == run()

    def test_empty(self):
        with pytest.raises(ValueError):
            regular_epoch(toy_autoencoder(), np.zeros((0, 6)), np.zeros((0, 6)), Adam(),
                          np.random.default_rng(0))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            regular_epoch(toy_autoencoder(), np.zeros((3, 6)), np.zeros((2, 6)), Adam(),
                          np.random.default_rng(0))


class TestFaultTrainingEpoch:
    def test_single_layer_net_is_unchanged(self):
        net = DenseNetwork.build([5, 5], np.random.default_rng(2))
        X = toy_images(2, dim=5)
        before = net.parameter_vector().tobytes()
        fault_training_epoch(net, X, X, Adam(), Gaussian(0.01), np.random.default_rng(0), 4)
        assert net.parameter_vector().tobytes() == before
        assert not net.layers[0].frozen

    def test_no_residual_perturbation(self):
        net = toy_autoencoder(4)
        X = toy_images(4)
        fault_training_epoch(net, X, X, Adam(), BitFlip(QFormat.parse("Q16.12")),
                             np.random.default_rng(1), 8)
        held_out = toy_images(99, n=10)
        first = mse_loss(forward(net, held_out)[0], held_out)
        assert mse_loss(forward(net, held_out)[0], held_out) == first
        assert not any(layer.frozen for layer in net.layers)

    def test_frozen_layer_restored_every_batch(self):
        net = DenseNetwork.build([6, 4, 6], np.random.default_rng(5))
        X = toy_images(5)
        seen = []

        def check(info):
            before = info.before
            for k, (old, new) in enumerate(zip(before.layers, net.layers)):
                same = (np.array_equal(old.weights, new.weights)
                        and np.array_equal(old.biases, new.biases))
                if k == info.layer:
                    assert same, f"frozen layer {k} changed in batch {info.batch}"
                else:
                    assert not same, f"trainable layer {k} did not move in batch {info.batch}"
            seen.append(info.layer)

        fault_training_epoch(net, X, X, Adam(), Gaussian(0.01), np.random.default_rng(6), 4,
                             observer=check, snapshot=True)
        assert len(seen) == 10 and set(seen) == {0, 1}

    def test_exactly_one_fault_per_batch(self, monkeypatch):
        calls = []
        real_inject = training.inject

        def counting_inject(*args, **kwargs):
            calls.append(1)
            return real_inject(*args, **kwargs)

        monkeypatch.setattr(training, "inject", counting_inject)
        net = toy_autoencoder(6)
        X = toy_images(6, n=37)
        batches = []
        fault_training_epoch(net, X, X, Adam(), Gaussian(0.01), np.random.default_rng(0), 5,
                             observer=lambda info: batches.append(info.batch))
        assert len(calls) == len(batches) == 8

    def test_layer_selection_uniform(self):
        net = DenseNetwork.build([2, 2, 2, 2, 2, 2], np.random.default_rng(7))
        X = np.random.default_rng(7).uniform(size=(10_000, 2))
        layers = Counter()
        fault_training_epoch(net, X, X, Adam(), Gaussian(0.01), np.random.default_rng(8), 1,
                             observer=lambda info: layers.update([info.layer]))
        n = sum(layers.values())
        assert n == 10_000
        se = np.sqrt(0.2 * 0.8 / n)
        assert all(abs(layers[k] / n - 0.2) <= 3 * se for k in range(5))

    def test_layer_then_parameter_sampling(self):
        # a tiny layer next to a big one is still picked half the time
        net = DenseNetwork.build([50, 1, 1], np.random.default_rng(9))
        X = np.random.default_rng(9).uniform(size=(4000, 50))
        Y = np.random.default_rng(10).uniform(size=(4000, 1))
        layers = Counter()
        fault_training_epoch(net, X, Y, Adam(), Gaussian(0.01), np.random.default_rng(1), 1,
                             observer=lambda info: layers.update([info.layer]))
        assert abs(layers[1] / 4000 - 0.5) < 3 * np.sqrt(0.25 / 4000)


class TestTrain:
    def test_warmup_equal_total_matches_baseline(self):
        X = toy_images(8)
        a = train(toy_autoencoder(8), X, X, TrainConfig(4, warmup_epochs=4, batch_size=8,
                                                         seed=3, regime="fit"))
        b = train(toy_autoencoder(8), X, X, TrainConfig(4, warmup_epochs=0, batch_size=8,
                                                         seed=3, regime="baseline"))
        assert a.net.parameter_vector().tobytes() == b.net.parameter_vector().tobytes()
        assert [r.mean_loss for r in a.history] == [r.mean_loss for r in b.history]
        assert {r.phase for r in a.history} == {"warmup"}

    def test_golden_equals_baseline(self):
        X = toy_images(9)
        nets = [train(toy_autoencoder(9), X, X, TrainConfig(3, batch_size=8, seed=5,
                                                              regime=r)).net
                for r in ("golden", "baseline")]
        assert nets[0].parameter_vector().tobytes() == nets[1].parameter_vector().tobytes()

    def test_zero_epochs(self):
        net = toy_autoencoder(10)
        before = net.parameter_vector().tobytes()
        out = train(net, toy_images(), toy_images(), TrainConfig(0, warmup_epochs=0))
        assert out.history == [] and out.net.parameter_vector().tobytes() == before

    def test_history_phases(self):
        X = toy_images(11)
        out = train(toy_autoencoder(11), X, X, TrainConfig(5, warmup_epochs=2, batch_size=10))
        assert [r.phase for r in out.history] == ["warmup"] * 2 + ["fit"] * 3
        assert [r.epoch for r in out.history] == [1, 2, 3, 4, 5]

    def test_fit_differs_from_baseline(self):
        X = toy_images(12)
        fit = train(toy_autoencoder(12), X, X, TrainConfig(3, warmup_epochs=1, batch_size=8))
        base = train(toy_autoencoder(12), X, X, TrainConfig(3, batch_size=8, regime="baseline"))
        assert not np.array_equal(fit.net.parameter_vector(), base.net.parameter_vector())

    def test_deterministic(self):
        X = toy_images(13)
        cfg = TrainConfig(3, warmup_epochs=1, batch_size=8, seed=21)
        a = train(toy_autoencoder(13), X, X, cfg)
        b = train(toy_autoencoder(13), X, X, cfg)
        assert a.net.parameter_vector().tobytes() == b.net.parameter_vector().tobytes()

    @pytest.mark.parametrize("kwargs", [dict(epochs_total=2, warmup_epochs=3),
                                        dict(epochs_total=2, batch_size=0),
                                        dict(epochs_total=2, regime="jpeg")])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_history_csv(self, tmp_path):
        X = toy_images(14)
        out = train(toy_autoencoder(14), X, X, TrainConfig(2, batch_size=8))
        path = tmp_path / "history.csv"
        write_history_csv(path, out.history)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,phase,mean_loss"
        assert lines[1].startswith("1,warmup,") and lines[2].startswith("2,fit,")
        assert float(lines[2].split(",")[2]) == out.history[1].mean_loss
