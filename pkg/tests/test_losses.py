"""Loss functions: analytic cases, oracles, hinge subgradient contract, and
the empty-selection degeneracy."""

import numpy as np
import pytest

import oracles
from oodkit.autodiff import SGD, Tensor
from oodkit.bgextract import BackgroundSet
from oodkit.losses import (
    LossConfig,
    background_norm_hinge,
    cross_entropy,
    joint_loss,
    lff_loss,
)

FD_EPS = 1e-3


def _bg(vectors, threshold=0.1):
    vectors = np.asarray(vectors, dtype=np.float32)
    return BackgroundSet(
        sample_index=np.zeros(len(vectors), dtype=np.intp),
        spatial_index=np.arange(len(vectors), dtype=np.intp),
        vectors=vectors,
        prob_threshold=threshold,
    )


class TestLossConfig:
    def test_validation(self):
        LossConfig(0.1, 1.0, 1.0)
        with pytest.raises(ValueError):
            LossConfig(prob_threshold=1.5)
        with pytest.raises(ValueError):
            LossConfig(norm_margin=-1.0)
        with pytest.raises(ValueError):
            LossConfig(loss_weight=-0.5)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((4, 10)))
        loss = cross_entropy(logits, np.zeros(4, dtype=np.int64))
        assert loss.item() == pytest.approx(np.log(10.0), rel=1e-6)

    def test_saturated_case(self):
        logits = np.zeros((1, 5), dtype=np.float32)
        logits[0, 2] = 50.0
        loss = cross_entropy(Tensor(logits), [2])
        assert loss.item() <= 1e-9

    def test_matches_naive_oracle(self, rng):
        logits = rng.standard_normal((8, 6)).astype(np.float32) * 3
        labels = rng.integers(0, 6, size=8)
        loss = cross_entropy(Tensor(logits), labels)
        assert loss.item() == pytest.approx(
            oracles.cross_entropy_naive(logits, labels), abs=1e-5
        )

    def test_non_finite_rejected(self):
        logits = np.zeros((2, 3), dtype=np.float32)
        logits[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            cross_entropy(Tensor(logits), [0, 1])

    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.standard_normal((4, 5)).astype(np.float32)
        labels = rng.integers(0, 5, size=4)
        t = Tensor(logits, requires_grad=True)
        cross_entropy(t, labels).backward()
        fd = oracles.finite_difference_grad(
            lambda arrays: oracles.cross_entropy_naive(arrays[0], labels), [logits], 0, FD_EPS
        )
        np.testing.assert_allclose(t.grad, fd, atol=1e-5)


class TestHingeLoss:
    def test_inside_margin_zero(self):
        vec = np.zeros((1, 4), dtype=np.float32)
        vec[0, 0] = 0.5
        assert lff_loss(_bg(vec), 1.0) == 0.0

    def test_outside_margin_analytic(self):
        vec = np.zeros((1, 4), dtype=np.float32)
        vec[0, 0] = 3.0
        assert lff_loss(_bg(vec), 1.0) == pytest.approx(2.0, rel=1e-6)

    def test_mixed_norms_mean(self):
        vecs = np.zeros((2, 4), dtype=np.float32)
        vecs[0, 0] = 0.5
        vecs[1, 0] = 3.0
        assert lff_loss(_bg(vecs), 1.0) == pytest.approx(1.0, rel=1e-6)

    def test_empty_set_zero(self):
        assert lff_loss(_bg(np.zeros((0, 4))), 1.0) == 0.0

    def test_nonnegative_and_zero_iff_inside(self, rng):
        vecs = rng.standard_normal((20, 6)).astype(np.float32)
        margin = 2.0
        value = lff_loss(_bg(vecs), margin)
        assert value >= 0.0
        norms = np.linalg.norm(vecs, axis=1)
        if (norms <= margin).all():
            assert value == 0.0
        else:
            assert value > 0.0

    def test_matches_naive_oracle(self, rng):
        vecs = rng.standard_normal((15, 8)).astype(np.float32) * 2
        assert lff_loss(_bg(vecs), 1.5) == pytest.approx(
            oracles.hinge_norm_naive(vecs, 1.5), abs=1e-5
        )


class TestHingeGradient:
    def _grad_of(self, fmap_data, sample_idx, spatial_idx, margin):
        fmap = Tensor(fmap_data, requires_grad=True)
        loss = background_norm_hinge(fmap, sample_idx, spatial_idx, margin)
        if loss._prev:
            loss.backward()
            return fmap.grad
        return np.zeros_like(fmap_data)

    def test_above_margin_unit_direction(self):
        fmap = np.zeros((1, 3, 1, 1), dtype=np.float32)
        fmap[0, :, 0, 0] = [3.0, 0.0, 4.0]  # norm 5
        grad = self._grad_of(fmap, [0], [0], 1.0)
        np.testing.assert_allclose(grad[0, :, 0, 0], [0.6, 0.0, 0.8], atol=1e-6)

    def test_below_margin_zero(self):
        fmap = np.zeros((1, 3, 1, 1), dtype=np.float32)
        fmap[0, 0, 0, 0] = 0.5
        grad = self._grad_of(fmap, [0], [0], 1.0)
        assert not grad.any()

    def test_zero_vector_zero_gradient(self):
        fmap = np.zeros((1, 3, 2, 2), dtype=np.float32)
        grad = self._grad_of(fmap, [0], [1], 0.0)
        assert not grad.any()

    def test_matches_finite_differences_away_from_kink(self, rng):
        margin = 1.0
        for _ in range(10):
            fmap = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
            si = np.asarray([0, 0, 1, 1])
            ji = np.asarray([0, 4, 2, 8])
            norms = np.linalg.norm(
                fmap[si, :, ji // 3, ji % 3], axis=1
            )
            if np.abs(norms - margin).min() < 20 * FD_EPS:
                continue  # resample; the kink itself uses the zero branch
            grad = self._grad_of(fmap, si, ji, margin)
            fd = oracles.finite_difference_grad(
                lambda arrays: oracles.hinge_norm_naive(
                    arrays[0][si, :, ji // 3, ji % 3], margin
                ),
                [fmap],
                0,
                FD_EPS,
            )
            np.testing.assert_allclose(grad, fd, atol=2e-4)

    def test_descent_drives_norms_to_margin(self):
        """Plain gradient descent on frozen vectors shrinks each selected norm
        monotonically toward the margin and then stops."""
        margin = 1.0
        fmap = Tensor(
            np.asarray([[[[5.0]], [[0.0]], [[0.0]], [[2.0]]]], dtype=np.float32),
            requires_grad=True,
        )
        opt = SGD([fmap], lr=0.2, momentum=0.0, weight_decay=0.0)
        previous = np.inf
        for _ in range(40):
            loss = background_norm_hinge(fmap, [0], [0], margin)
            loss.backward()
            opt.step()
            norm = float(np.linalg.norm(fmap.data[0, :, 0, 0]))
            assert norm <= previous + 1e-6
            previous = norm
        assert previous <= margin + 0.25


class TestJointLoss:
    def test_zero_weight_is_plain_ce(self):
        assert joint_loss(1.25, 7.0, 0.0) == 1.25

    def test_weighted_sum(self):
        assert joint_loss(1.0, 2.0, 1.0) == 3.0

    def test_tensor_gradients_are_additive(self, rng):
        """grad(ce + w*lff) equals grad(ce) + w*grad(lff) from separate passes."""
        weight = 0.7
        fmap_data = rng.standard_normal((2, 4, 2, 2)).astype(np.float32) * 2
        head_w = rng.standard_normal((3, 4)).astype(np.float32)
        labels = np.asarray([0, 2])
        si, ji = np.asarray([0, 1]), np.asarray([1, 3])

        from oodkit.autodiff import global_average_pool, linear

        def forward(fmap):
            logits = linear(global_average_pool(fmap), Tensor(head_w), Tensor(np.zeros(3)))
            ce = cross_entropy(logits, labels)
            lff = background_norm_hinge(fmap, si, ji, 0.5)
            return ce, lff

        joint_t = Tensor(fmap_data, requires_grad=True)
        ce, lff = forward(joint_t)
        joint_loss(ce, lff, weight).backward()

        ce_t = Tensor(fmap_data, requires_grad=True)
        ce_only, _ = forward(ce_t)
        ce_only.backward()

        lff_t = Tensor(fmap_data, requires_grad=True)
        _, lff_only = forward(lff_t)
        lff_only.backward()

        np.testing.assert_allclose(
            joint_t.grad, ce_t.grad + weight * lff_t.grad, atol=1e-6
        )
