import mpmath
import numpy as np
import pytest

from gaborscope.autodiff import Adam, ops, step_decay
from gaborscope.network import SingleEpochNet
from gaborscope.synthetic import three_class_task
from gaborscope.trainer import (ConfigError, DivergenceError, EpochArrays, TrainConfig, TrainLog, WindowSet,
                                cross_entropy, sample_minibatch, stage_pools, train_multi, train_single)


@pytest.fixture(scope="module")
def tiny():
    eps = three_class_task(8, seed=1)
    return EpochArrays.from_epochs(eps[:18]), EpochArrays.from_epochs(eps[18:])


def small_config(**kw):
    base = dict(classes=(0, 2, 3), validate_every=2, max_iterations=4, minibatch_size=4, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.minibatch_size, c.initial_lr, c.lr_decay_every, c.validate_every) == (16, 0.000625, 5000, 1000)
        assert (c.lr_decay_factor, c.max_iterations, c.patience) == (0.5, 100_000, 20)

    def test_key_value(self):
        c = TrainConfig.from_text("# run\nmax_iterations = 300\nclasses = 0, 2, 3\nablation=plain_conv_200\n")
        assert c.max_iterations == 300 and c.classes == (0, 2, 3) and c.ablation == "plain_conv_200"

    def test_json(self):
        c = TrainConfig.from_text('{"seed": 4, "lr_decay_factor": 0.25}')
        assert c.seed == 4 and c.lr_decay_factor == 0.25

    @pytest.mark.parametrize("text", ["minibatch_size=0", "lr_decay_factor=1.0", "bogus=1", "ablation=vgg",
                                      "seed", "classes=0 0", "initial_lr=abc"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            TrainConfig.from_text(text)


class TestSchedule:
    def test_step_decay(self):
        c = TrainConfig()
        assert step_decay(0, c.initial_lr, c.lr_decay_every, c.lr_decay_factor) == 0.000625
        assert step_decay(4999, c.initial_lr, 5000, 0.5) == 0.000625
        assert step_decay(5000, c.initial_lr, 5000, 0.5) == 0.0003125
        assert step_decay(10000, c.initial_lr, 5000, 0.5) == 0.00015625


class TestSampler:
    def test_uniform_over_stages(self):
        labels = np.array([0] * 500 + [1] * 20 + [2] * 300 + [3] * 5 + [4] * 100)
        pools = stage_pools(labels, range(5))
        draws = labels[sample_minibatch(pools, 10_000, np.random.default_rng(0))]
        freq = np.bincount(draws, minlength=5) / 10_000
        assert np.all(np.abs(freq - 0.2) <= 0.02)
        # chi-square against the uniform stage law, 4 degrees of freedom, 0.1% critical value 18.47
        chi2 = ((np.bincount(draws, minlength=5) - 2000) ** 2 / 2000).sum()
        assert chi2 < 18.47

    def test_uniform_within_stage(self):
        labels = np.array([0, 0, 0, 0, 1])
        draws = sample_minibatch(stage_pools(labels, [0, 1]), 20_000, np.random.default_rng(1))
        counts = np.bincount(draws, minlength=5)[:4]
        assert np.all(np.abs(counts / counts.sum() - 0.25) < 0.02)

    def test_seeded(self):
        pools = stage_pools(np.arange(50) % 5, range(5))
        a = sample_minibatch(pools, 16, np.random.default_rng(7))
        b = sample_minibatch(pools, 16, np.random.default_rng(7))
        assert list(a) == list(b)

    def test_empty_stage(self):
        with pytest.raises(ConfigError, match="4"):
            stage_pools(np.array([0, 1, 2, 3]), range(5))


class TestLoss:
    def test_uniform(self):
        assert cross_entropy(np.zeros(5), 3) == pytest.approx(np.log(5), rel=1e-15)

    def test_dominant_logit(self):
        assert cross_entropy([800.0, 0, 0, 0, 0], 0) == 0.0

    def test_worked_example(self):
        mpmath.mp.dps = 50
        ref = -mpmath.log(mpmath.e ** 10 / (mpmath.e ** 10 + 4))
        got = cross_entropy([10.0, 0, 0, 0, 0], 0)
        assert got == pytest.approx(float(ref), rel=1e-12)
        assert got == pytest.approx(1.815e-4, rel=1e-3)

    def test_batch_op_agrees(self):
        logits = np.random.default_rng(0).standard_normal((6, 5))
        cls = [0, 1, 2, 3, 4, 0]
        batch = float(ops.softmax_cross_entropy(logits, cls).data)
        assert batch == pytest.approx(np.mean([cross_entropy(r, c) for r, c in zip(logits, cls)]), rel=1e-14)


class TestTraining:
    def test_loss_decreases_on_frozen_batch(self, tiny):
        train, _ = tiny
        model = SingleEpochNet(seed=0, dropout=0.0)
        opt = Adam(model.parameters(), lr=0.000625)
        idx = np.arange(8)
        losses = []
        for _ in range(10):
            loss = ops.softmax_cross_entropy(model.forward(train.eeg[idx], train.eog[idx], training=True),
                                             train.labels[idx])
            losses.append(float(loss.data))
            loss.backward()
            model.before_step()
            opt.step()
            model.after_step()
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_deterministic_step(self, tiny):
        train, _ = tiny
        outs = []
        for _ in range(2):
            model = SingleEpochNet(seed=1, dropout=0.0)
            loss = ops.softmax_cross_entropy(model.forward(train.eeg[:4], train.eog[:4]), train.labels[:4])
            loss.backward()
            opt = Adam(model.parameters(), lr=1e-3)
            opt.step()
            outs.append(model.params["fc3.weight"].data.copy())
        np.testing.assert_array_equal(*outs)

    def test_run_is_reproducible_and_selects_best(self, tiny, tmp_path):
        train, val = tiny
        a = train_single(small_config(), train, val)
        b = train_single(small_config(), train, val)
        assert [r.iteration for r in a.log.rows] == [2, 4]
        assert a.log.rows == b.log.rows
        assert a.best_kappa == max(r.val_kappa for r in a.log.rows)
        # the restored model reproduces the selected validation kappa
        from gaborscope.metrics import kappa
        pred = a.model.predict_logits(val.eeg, val.eog).argmax(1)
        assert kappa(val.labels, pred) == pytest.approx(a.best_kappa)
        path = tmp_path / "log.csv"
        a.log.write_csv(path)
        assert path.read_text().splitlines()[0] == "iteration,train_loss,val_loss,train_kappa,val_kappa"
        assert TrainLog.read_csv(path).rows == a.log.rows

    def test_ablation_log_schema(self, tiny):
        train, val = tiny
        res = train_single(small_config(ablation="plain_conv_200", max_iterations=2), train, val)
        assert res.model.first_layer_kind == "plain_conv_200" and len(res.log.rows) == 1

    def test_divergence(self, tiny):
        train, val = tiny
        model = SingleEpochNet(seed=0)
        model.params["fc3.bias"].data[:] = np.nan
        with pytest.raises(DivergenceError) as err:
            train_single(small_config(), train, val, model=model)
        assert err.value.iteration == 1

    def test_empty_validation(self, tiny):
        train, _ = tiny
        empty = EpochArrays(np.zeros((0, 3000)), np.zeros((0, 3000)), np.zeros(0, int))
        with pytest.raises(ConfigError):
            train_single(small_config(), train, empty)

    def test_patience_stops_early(self, tiny):
        train, val = tiny
        res = train_single(small_config(max_iterations=20, validate_every=1, patience=1, initial_lr=1e-9), train, val)
        assert len(res.log.rows) < 20

    def test_multi(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 5, 60)
        probs = np.eye(5)[labels] * 0.6 + 0.08
        windows = np.stack([probs[np.clip(np.arange(i - 4, i + 5), 0, 59)] for i in range(60)])
        data = WindowSet(windows, labels)
        cfg = TrainConfig(validate_every=100, max_iterations=200, seed=0, initial_lr=0.03)
        a = train_multi(cfg, data, data)
        b = train_multi(cfg, data, data)
        assert a.log.rows == b.log.rows
        assert a.best_kappa > 0.5
