import math

import numpy as np
import pytest

from gaborscope.autodiff import Adam, Tensor, grad_check, ops, step_decay
from gaborscope.autodiff.ops import BatchNormState
from gaborscope.autodiff.tensor import NonFiniteError


def P(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def weighted(out: Tensor, seed=0) -> Tensor:
    """Reduce an output to a scalar with fixed random weights so every entry matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, w))


def separated(rng, shape):
    """Entries at least 0.05 apart, so max/relu kinks sit far from any probe."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * 0.05
    return vals.reshape(shape)


TOL = 1e-5
FLOOR = 1e-6


def check(fn, params, probes=100, seed=0, delta=1e-5):
    per = max(1, probes // len(params))
    rep = grad_check(fn, params, delta=delta, max_entries=per, rng=np.random.default_rng(seed), floor=FLOOR)
    return rep


class TestPrimitiveValues:
    def test_relu(self):
        x = P([-1.0, 2.0])
        y = ops.relu(x)
        assert list(y.data) == [0.0, 2.0]
        ops.sum(y).backward()
        assert x.grad[1] == 1.0 and x.grad[0] == 0.0

    def test_uniform_logits_loss(self):
        for cls in range(5):
            loss = ops.softmax_cross_entropy(np.zeros((1, 5)), [cls])
            assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    def test_maxpool_example(self):
        x = Tensor(np.array([1.0, 3.0, 2.0]).reshape(1, 3, 1))
        assert ops.maxpool1d(x, 3, 3).data.reshape(-1).tolist() == [3.0]

    def test_maxpool_drops_remainder(self):
        x = Tensor(np.arange(8.0).reshape(1, 8, 1))
        assert ops.maxpool1d(x, 3, 3).data.reshape(-1).tolist() == [2.0, 5.0]

    def test_zero_lstm(self):
        H = 4
        params = [(P(np.zeros((d, 4 * H))), P(np.zeros((H, 4 * H))), P(np.zeros(4 * H))) for d in (3, H)]
        out, last = ops.lstm_layer(Tensor(np.zeros((2, 9, 3))), params, H)
        assert np.all(out.data == 0) and np.all(last.data == 0)

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 17, 1))
        y = ops.conv1d(x, np.ones((1, 1, 1)), padding="same")
        np.testing.assert_array_equal(y.data, x)

    def test_conv_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 11, 3))
        w = rng.standard_normal((4, 3, 5))
        for padding, pad in (("valid", 0), ("same", 2)):
            xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
            T = xp.shape[1] - 4
            ref = np.zeros((2, T, 4))
            for b in range(2):
                for t in range(T):
                    for o in range(4):
                        ref[b, t, o] = sum(w[o, c, k] * xp[b, t + k, c] for c in range(3) for k in range(5))
            np.testing.assert_allclose(ops.conv1d(x, w, padding=padding).data, ref, atol=1e-12)

    def test_cross_correlate_matches_numpy(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 40))
        k = rng.standard_normal((2, 7))
        out = ops.cross_correlate1d(x, k).data
        for b in range(3):
            for i in range(2):
                np.testing.assert_allclose(out[b, :, i], np.correlate(x[b], k[i], mode="valid"), atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            ops.conv1d(np.zeros((1, 10, 2)), np.zeros((3, 4, 3)))
        with pytest.raises(ValueError):
            ops.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            ops.cross_correlate1d(np.zeros((1, 5)), np.zeros((1, 6)))

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            ops.mul(Tensor(np.array([1e308])), 1e10)


class TestGradients:
    """Central differences at float64; 100 sampled entries per primitive."""

    def test_dense(self):
        rng = np.random.default_rng(0)
        x, w, b = P(rng.standard_normal((4, 6))), P(rng.standard_normal((6, 3))), P(rng.standard_normal(3))
        rep = check(lambda: weighted(ops.dense(x, w, b)), [x, w, b])
        assert rep.max_rel_error < TOL, rep

    def test_constant_function(self):
        x = P(np.ones(3))
        rep = grad_check(lambda: ops.sum(ops.mul(x, 0.0)), [x])
        assert rep.max_abs_error == 0.0
        assert np.all(x.grad == 0)

    @pytest.mark.parametrize("padding", ["valid", "same"])
    def test_conv1d(self, padding):
        rng = np.random.default_rng(1)
        x, w, b = P(rng.standard_normal((2, 12, 3))), P(rng.standard_normal((4, 3, 3))), P(rng.standard_normal(4))
        rep = check(lambda: weighted(ops.conv1d(x, w, b, padding=padding)), [x, w, b])
        assert rep.max_rel_error < TOL, rep

    def test_cross_correlate1d(self):
        rng = np.random.default_rng(2)
        x, k = P(rng.standard_normal((2, 30))), P(rng.standard_normal((3, 8)))
        rep = check(lambda: weighted(ops.cross_correlate1d(x, k)), [x, k])
        assert rep.max_rel_error < TOL, rep

    def test_relu_maxpool(self):
        rng = np.random.default_rng(3)
        x = P(separated(rng, (2, 10, 3)))
        for w, s in ((3, 3), (3, 2)):
            rep = check(lambda: weighted(ops.maxpool1d(ops.relu(x), w, s)), [x])
            assert rep.max_rel_error < TOL, rep

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm(self, training):
        rng = np.random.default_rng(4)
        x, g, b = P(rng.standard_normal((3, 5, 4))), P(rng.uniform(0.5, 2, 4)), P(rng.standard_normal(4))
        st = BatchNormState(4)
        st.running_mean = rng.standard_normal(4)
        st.running_var = rng.uniform(0.5, 2, 4)
        frozen = (st.running_mean.copy(), st.running_var.copy())

        def fn():
            if not training:
                st.running_mean, st.running_var = frozen
            return weighted(ops.batchnorm1d(x, g, b, st, training))

        rep = check(fn, [x, g, b])
        assert rep.max_rel_error < TOL, rep

    def test_dropout_fixed_mask(self):
        rng = np.random.default_rng(5)
        x = P(rng.standard_normal((4, 6)))
        rep = check(lambda: weighted(ops.dropout(x, 0.5, True, np.random.default_rng(9))), [x])
        assert rep.max_rel_error < TOL, rep

    def test_sigmoid_tanh_einsum(self):
        rng = np.random.default_rng(6)
        a, b = P(rng.standard_normal((3, 4, 2))), P(rng.standard_normal((4, 5)))
        rep = check(lambda: weighted(ops.tanh(ops.sigmoid(ops.einsum("ock,cj->ojk", a, b)))), [a, b])
        assert rep.max_rel_error < TOL, rep

    def test_lstm_length9(self):
        rng = np.random.default_rng(7)
        H, D = 10, 5
        params = []
        for d_in in (D, H):
            params.append((P(rng.uniform(-0.4, 0.4, (d_in, 4 * H))), P(rng.uniform(-0.4, 0.4, (H, 4 * H))),
                           P(rng.uniform(-0.4, 0.4, 4 * H))))
        x = P(rng.standard_normal((3, 9, D)))
        flat = [x] + [t for triple in params for t in triple]
        for reverse in (False, True):
            rep = check(lambda: weighted(ops.lstm_layer(x, params, H, reverse=reverse)[0]), flat, probes=140)
            assert rep.max_rel_error < 1e-4, rep

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(8)
        z = P(rng.standard_normal((6, 5)))
        rep = check(lambda: ops.softmax_cross_entropy(z, [0, 1, 2, 3, 4, 0]), [z])
        assert rep.max_rel_error < TOL, rep

    def test_shape_ops(self):
        rng = np.random.default_rng(9)
        a, b = P(rng.standard_normal((2, 3, 4))), P(rng.standard_normal((2, 2, 4)))

        def fn():
            c = ops.concat([a, b], axis=1)
            s = ops.stack([c[:, 0, :], c[:, 4, :]], axis=1)
            return weighted(ops.add(ops.reshape(s, (2, 8)), ops.mean(c, axis=1).reshape(2, 4)[:, [0, 1, 2, 3, 0, 1, 2, 3]]))

        rep = check(fn, [a, b])
        assert rep.max_rel_error < TOL, rep


class TestGraphProperties:
    def test_backward_is_linear(self):
        rng = np.random.default_rng(0)
        x, w = P(rng.standard_normal((3, 4))), P(rng.standard_normal((4, 2)))

        def grads(build):
            build().backward()
            return x.grad.copy(), w.grad.copy()

        l1 = lambda: ops.sum(ops.tanh(ops.matmul(x, w)))  # noqa: E731
        l2 = lambda: ops.sum(ops.mul(ops.matmul(x, w), ops.matmul(x, w)))  # noqa: E731
        g1, g2 = grads(l1), grads(l2)
        g12 = grads(lambda: ops.add(l1(), l2()))
        for a, b, c in zip(g1, g2, g12):
            np.testing.assert_allclose(a + b, c, atol=1e-12)

    def test_adjoints_reset_between_passes(self):
        x = P([1.0, 2.0])
        y = ops.sum(ops.mul(x, x))
        y.backward()
        first = x.grad.copy()
        y.backward()
        np.testing.assert_array_equal(first, x.grad)

    def test_batchnorm_eval_is_affine(self):
        rng = np.random.default_rng(1)
        st = BatchNormState(3)
        st.running_mean, st.running_var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
        g, b = rng.standard_normal(3), rng.standard_normal(3)
        f = lambda x: ops.batchnorm1d(Tensor(x), g, b, st, False).data  # noqa: E731
        x1, x2 = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 5, 3))
        np.testing.assert_allclose(f(2 * x1 - 3 * x2) - f(np.zeros_like(x1)),
                                   2 * (f(x1) - f(np.zeros_like(x1))) - 3 * (f(x2) - f(np.zeros_like(x1))), atol=1e-12)

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.arange(6.0))
        assert ops.dropout(x, 0.5, False) is x

    def test_dropout_train_scales_kept_units(self):
        x = Tensor(np.ones(10000))
        y = ops.dropout(x, 0.5, True, np.random.default_rng(0)).data
        assert set(np.unique(y)) <= {0.0, 2.0}
        assert abs(y.mean() - 1.0) < 0.05


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = P([0.0])
        opt = Adam({"p": p}, lr=0.000625)
        opt.step({"p": np.array([1.0])})
        # m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
        assert p.data[0] == pytest.approx(-0.000625 / (1 + 1e-8), rel=1e-12)

    def test_zero_gradient_keeps_params(self):
        p = P([1.5, -2.0])
        opt = Adam({"p": p})
        for _ in range(50):
            opt.step({"p": np.zeros(2)})
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(3)
            p = P(rng.standard_normal(4))
            opt = Adam({"p": p})
            traj = []
            for _ in range(20):
                opt.step({"p": rng.standard_normal(4)})
                traj.append(p.data.copy())
            return np.array(traj)

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_gradient(self):
        opt = Adam({"p": P([1.0])})
        with pytest.raises(FloatingPointError):
            opt.step({"p": np.array([np.nan])})

    def test_schedule(self):
        assert step_decay(0, 0.000625, 5000, 0.5) == 0.000625
        assert step_decay(4999, 0.000625, 5000, 0.5) == 0.000625
        assert step_decay(5000, 0.000625, 5000, 0.5) == 0.0003125
