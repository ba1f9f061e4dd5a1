"""Tensor op unit tests: spec'd examples, naive-loop oracles, and
finite-difference gradient checks on a 64-bit shadow evaluation."""

import numpy as np
import pytest

import oracles
from oodkit import autodiff
from oodkit.autodiff import SGD, Tensor, conv2d, global_average_pool, linear, no_grad, relu

FD_EPS = 1e-3
FD_RTOL = 1e-4


def relative_error(a, b):
    denom = max(np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


class TestConv2d:
    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, w, b)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == pytest.approx(9.0)

    def test_identity_1x1_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 5, 7)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
        expected = oracles.conv2d_naive(x, w, b, padding=1)
        np.testing.assert_allclose(out.data, expected, atol=1e-5)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2)])
    def test_strided_padded_oracle(self, rng, stride, padding):
        x = rng.standard_normal((2, 2, 9, 9)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        expected = oracles.conv2d_naive(x, w, b, stride=stride, padding=padding)
        assert out.shape == expected.shape
        np.testing.assert_allclose(out.data, expected, atol=1e-5)

    def test_output_size_formula(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 10, 10)).astype(np.float32))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=2, padding=1)
        assert out.shape == (1, 1, 5, 5)

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            conv2d(x, w, Tensor(np.zeros(2)))

    def test_kernel_too_large_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ValueError, match="larger"):
            conv2d(x, w, Tensor(np.zeros(1)))


class TestRelu:
    def test_basic(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_gradient(self):
        x = Tensor(-np.ones((3, 3)), requires_grad=True)
        out = relu(x)
        assert not out.data.any()
        out.sum().backward()
        assert not x.grad.any()

    def test_gradient_is_indicator(self, rng):
        data = rng.standard_normal(64).astype(np.float32)
        data[np.abs(data) < 0.01] = 0.5  # stay clear of the kink
        x = Tensor(data, requires_grad=True)
        relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, (data > 0).astype(np.float32))


class TestGlobalAveragePool:
    def test_constant_map(self):
        out = global_average_pool(Tensor(np.full((2, 3, 4, 4), 2.0)))
        np.testing.assert_allclose(out.data, 2.0)

    def test_single_cell_identity(self, rng):
        x = rng.standard_normal((2, 5, 1, 1)).astype(np.float32)
        out = global_average_pool(Tensor(x))
        np.testing.assert_array_equal(out.data, x[:, :, 0, 0])

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
        out = global_average_pool(Tensor(x))
        np.testing.assert_allclose(out.data, oracles.gap_naive(x), atol=1e-6)


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x, atol=1e-7)

    def test_zero_weight_gives_bias(self, rng):
        b = rng.standard_normal(5).astype(np.float32)
        out = linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 4))), Tensor(b))
        for row in out.data:
            np.testing.assert_array_equal(row, b)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((4, 6)).astype(np.float32)
        w = rng.standard_normal((3, 6)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        out = linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, oracles.linear_naive(x, w, b), atol=1e-5)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="width"):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


class TestBackward:
    def test_sum_gradient_all_ones(self, rng):
        w = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, np.ones((3, 4), dtype=np.float32))

    def test_sum_of_squares(self):
        w = Tensor([1.0, -2.0], requires_grad=True)
        (w * w).sum().backward()
        np.testing.assert_allclose(w.grad, [2.0, -4.0])

    def test_non_scalar_rejected(self):
        w = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (w * 2.0).backward()

    def test_gradients_accumulate_until_cleared(self):
        w = Tensor([1.0, 1.0], requires_grad=True)
        w.sum().backward()
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, [2.0, 2.0])
        w.zero_grad()
        assert w.grad is None

    def test_no_grad_builds_no_graph(self):
        w = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = (w * 3.0).sum()
        assert out._prev == ()


class TestFiniteDifferences:
    """Autodiff gradients vs central finite differences of the float64 oracles."""

    def _check(self, build, arrays, oracle, n_trials=20, seed=7, accept=None):
        rng = np.random.default_rng(seed)
        for _ in range(n_trials):
            values = [a(rng) for a in arrays]
            while accept is not None and not accept(values):
                values = [a(rng) for a in arrays]
            tensors = [Tensor(v, requires_grad=True) for v in values]
            loss = build(tensors)
            loss.backward()
            for i, t in enumerate(tensors):
                fd = oracles.finite_difference_grad(oracle, values, i, eps=FD_EPS)
                assert relative_error(t.grad.astype(np.float64), fd) <= FD_RTOL

    def test_conv2d(self):
        def make_x(rng):
            return rng.standard_normal((2, 2, 5, 5)).astype(np.float32)

        def make_w(rng):
            return rng.standard_normal((3, 2, 3, 3)).astype(np.float32)

        def make_b(rng):
            return rng.standard_normal(3).astype(np.float32)

        proj = np.random.default_rng(99).standard_normal((2, 3, 5, 5))

        def build(ts):
            return (conv2d(ts[0], ts[1], ts[2], padding=1) * Tensor(proj)).sum()

        def oracle(arrays):
            return (oracles.conv2d_naive(*arrays, padding=1) * proj).sum()

        self._check(build, [make_x, make_w, make_b], oracle)

    def test_linear(self):
        def make_x(rng):
            return rng.standard_normal((3, 4)).astype(np.float32)

        def make_w(rng):
            return rng.standard_normal((2, 4)).astype(np.float32)

        def make_b(rng):
            return rng.standard_normal(2).astype(np.float32)

        proj = np.random.default_rng(98).standard_normal((3, 2))

        def build(ts):
            return (linear(ts[0], ts[1], ts[2]) * Tensor(proj)).sum()

        def oracle(arrays):
            return (oracles.linear_naive(*arrays) * proj).sum()

        self._check(build, [make_x, make_w, make_b], oracle)

    def test_gap(self):
        def make_x(rng):
            return rng.standard_normal((2, 3, 4, 4)).astype(np.float32)

        proj = np.random.default_rng(97).standard_normal((2, 3))

        def build(ts):
            return (global_average_pool(ts[0]) * Tensor(proj)).sum()

        def oracle(arrays):
            return (oracles.gap_naive(arrays[0]) * proj).sum()

        self._check(build, [make_x], oracle)

    def test_relu(self):
        def make_x(rng):
            data = rng.standard_normal(40).astype(np.float32)
            data[np.abs(data) < 5 * FD_EPS] = 0.5
            return data

        proj = np.random.default_rng(96).standard_normal(40)

        def build(ts):
            return (relu(ts[0]) * Tensor(proj)).sum()

        def oracle(arrays):
            return (oracles.relu_naive(arrays[0]) * proj).sum()

        self._check(build, [make_x], oracle)

    def test_composite_residual_net(self):
        """Gradient check through conv+relu+add+gap+linear stacked together."""

        def make_x(rng):
            return rng.standard_normal((1, 2, 6, 6)).astype(np.float32)

        def make_w(rng):
            return rng.standard_normal((2, 2, 3, 3)).astype(np.float32)

        def make_hw(rng):
            return rng.standard_normal((3, 2)).astype(np.float32)

        proj = np.random.default_rng(95).standard_normal((1, 3))

        def build(ts):
            x, w, hw = ts
            zero_b = Tensor(np.zeros(2))
            h = relu(conv2d(x, w, zero_b, padding=1) + x)
            return (linear(global_average_pool(h), hw, Tensor(np.zeros(3))) * Tensor(proj)).sum()

        def oracle(arrays):
            x, w, hw = arrays
            h = oracles.relu_naive(oracles.conv2d_naive(x, w, np.zeros(2), padding=1) + x)
            pooled = oracles.gap_naive(h)
            return (oracles.linear_naive(pooled, hw, np.zeros(3)) * proj).sum()

        def away_from_relu_kink(values):
            x, w, _ = values
            pre = oracles.conv2d_naive(x, w, np.zeros(2), padding=1) + x
            return np.abs(pre).min() > 5 * FD_EPS

        self._check(build, [make_x, make_w, make_hw], oracle, seed=11, accept=away_from_relu_kink)


class TestDeterminism:
    def test_forward_and_grad_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), requires_grad=True)
            b = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
            out = relu(conv2d(x, w, b, padding=1))
            global_average_pool(out).sum().backward()
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestSGD:
    def test_single_step_analytic(self):
        w = Tensor([1.0], requires_grad=True)
        opt = SGD({"w": w}, lr=0.1, momentum=0.0, weight_decay=0.0)
        (w * w).sum().backward()
        opt.step()
        np.testing.assert_allclose(w.data, [0.8])
        assert w.grad is None

    def test_zero_gradient_leaves_params(self):
        w = Tensor([3.0, -1.0], requires_grad=True)
        opt = SGD([w], lr=0.5, momentum=0.0, weight_decay=0.0)
        (w * 0.0).sum().backward()
        opt.step()
        np.testing.assert_array_equal(w.data, [3.0, -1.0])

    def test_momentum_recurrence_two_steps(self):
        w = Tensor([1.0], requires_grad=True)
        opt = SGD([w], lr=0.1, momentum=0.9, weight_decay=0.0)
        (w * w).sum().backward()
        opt.step()
        np.testing.assert_allclose(w.data, [0.8], rtol=1e-6)
        np.testing.assert_allclose(opt.velocity[0], [2.0], rtol=1e-6)
        (w * w).sum().backward()
        opt.step()
        np.testing.assert_allclose(opt.velocity[0], [3.4], rtol=1e-6)
        np.testing.assert_allclose(w.data, [0.46], rtol=1e-6)

    def test_missing_grad_rejected(self):
        w = Tensor([1.0], requires_grad=True)
        opt = SGD({"w": w}, lr=0.1)
        with pytest.raises(ValueError, match="missing gradient.*w"):
            opt.step()

    def test_weight_decay_term(self):
        w = Tensor([2.0], requires_grad=True)
        opt = SGD([w], lr=0.1, momentum=0.0, weight_decay=0.5)
        (w * 0.0).sum().backward()
        opt.step()
        # v = 0 + (0 + 0.5*2) = 1; w = 2 - 0.1 = 1.9
        np.testing.assert_allclose(w.data, [1.9], rtol=1e-6)

    def test_velocity_persists_across_steps(self):
        w = Tensor([0.0], requires_grad=True)
        opt = SGD([w], lr=1.0, momentum=0.5, weight_decay=0.0)
        for expected_v in (1.0, 1.5, 1.75):
            w.grad = np.ones(1, dtype=np.float32)
            opt.step()
            np.testing.assert_allclose(opt.velocity[0], [expected_v], rtol=1e-6)

    def test_invalid_hyperparameters_rejected(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            SGD([w], lr=0.0)
        with pytest.raises(ValueError):
            SGD([w], lr=0.1, momentum=1.0)
        with pytest.raises(ValueError):
            SGD([w], lr=0.1, weight_decay=-1.0)
