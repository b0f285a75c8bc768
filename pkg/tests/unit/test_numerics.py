"""
Unit tests for numerics module.
"""

import numpy as np
import pytest

from dtskit.errors import ArgumentError, DimensionError, TrainingDivergedError
from dtskit.numerics import (
    Mlp,
    Rng,
    SgdMomentum,
    annealed_lr,
    as_matrix,
    binary_cross_entropy_with_logits,
    log_softmax,
    mlp_backward,
    softmax,
)
from tests.oracles import numeric_gradient, relative_error


class TestRng:
    """Test named random streams."""

    def test_same_seed_and_stream_repeat(self):
        """Test that equal (seed, stream) pairs draw equal values."""
        a = Rng(7, "x").normal(3, 2)
        b = Rng(7, "x").normal(3, 2)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        """Test that different stream names draw different values."""
        a = Rng(7, "x").normal(3, 2)
        b = Rng(7, "y").normal(3, 2)
        assert not np.array_equal(a, b)

    def test_spawn_does_not_advance_parent(self):
        """Test that spawning a child leaves the parent stream untouched."""
        parent = Rng(3)
        expected = Rng(3).normal(1, 4)
        parent.spawn("child").normal(10, 10)
        assert np.array_equal(parent.normal(1, 4), expected)

    def test_spawn_matches_explicit_stream(self):
        """Test that spawn is the same as naming the joined stream."""
        assert np.array_equal(
            Rng(5, "a").spawn("b").normal(2, 2), Rng(5, "a/b").normal(2, 2)
        )

    def test_negative_seed_rejected(self):
        """Test that a negative seed is an argument error."""
        with pytest.raises(ArgumentError):
            Rng(-1)


class TestActivationsAndLosses:
    """Test softmax family and binary cross-entropy."""

    def test_softmax_rows_sum_to_one(self):
        """Test that softmax rows are distributions even for large logits."""
        logits = np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]])
        probs = softmax(logits)
        assert np.allclose(probs.sum(axis=1), 1.0)
        assert np.all(np.isfinite(log_softmax(logits)))

    def test_bce_at_zero_logit(self):
        """Test that BCE of a zero logit is ln 2 whatever the target."""
        loss, grad = binary_cross_entropy_with_logits(
            np.zeros((4, 1)), np.array([0, 1, 0, 1])
        )
        assert loss == pytest.approx(np.log(2.0))
        assert np.allclose(grad[:, 0], [0.125, -0.125, 0.125, -0.125])

    def test_bce_shape_errors(self):
        """Test that BCE rejects multi-column logits and empty batches."""
        with pytest.raises(DimensionError):
            binary_cross_entropy_with_logits(np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ArgumentError):
            binary_cross_entropy_with_logits(np.zeros((0, 1)), np.zeros(0))

    def test_as_matrix(self):
        """Test that vectors become one-row matrices and NaN is refused."""
        assert as_matrix([1.0, 2.0]).shape == (1, 2)
        with pytest.raises(ArgumentError):
            as_matrix([[np.nan]])


class TestMlp:
    """Test the feed-forward network."""

    def test_create_shapes(self, rng):
        """Test that created layers follow the requested widths."""
        net = Mlp.create([3, 5, 2], "relu", rng)
        assert [w.shape for w in net.weights] == [(3, 5), (5, 2)]
        assert net.parameter_count() == 4 * 5 + 6 * 2
        assert net.hidden_widths == (5,)

    def test_bad_activation(self):
        """Test that an unknown activation is rejected."""
        with pytest.raises(ArgumentError):
            Mlp.zeros([2, 1], activation="gelu")

    def test_input_width_checked(self, rng):
        """Test that a batch of the wrong width is a dimension error."""
        net = Mlp.create([3, 2], "tanh", rng)
        with pytest.raises(DimensionError):
            net.forward(np.zeros((4, 2)))

    def test_backward_matches_finite_differences(self, rng):
        """Test that reverse-mode gradients agree with central differences."""
        net = Mlp.create([3, 4, 4, 2], "tanh", rng.spawn("net"))
        batch = rng.spawn("batch").normal(5, 3)
        upstream = rng.spawn("upstream").normal(5, 2)
        shifts = [rng.spawn("s0").normal(5, 4), rng.spawn("s1").normal(5, 4)]

        def objective() -> float:
            return float(np.sum(upstream * net.forward(batch, shifts)))

        grads = net.backward(net.forward_cached(batch, shifts), upstream)
        for param, grad in zip(net.parameters(), grads.flat()):
            assert relative_error(grad, numeric_gradient(objective, param)) < 1e-5
        assert relative_error(grads.input, numeric_gradient(objective, batch)) < 1e-5
        for shift, grad in zip(shifts, grads.hidden_shifts):
            assert relative_error(grad, numeric_gradient(objective, shift)) < 1e-5

    def test_mlp_backward_helper(self, rng):
        """Test that mlp_backward runs a fresh forward pass."""
        net = Mlp.create([2, 3, 1], "relu", rng)
        grads = mlp_backward(net, np.ones((2, 2)), np.ones((2, 1)))
        assert grads.weights[0].shape == (2, 3)

    def test_copy_is_independent(self, rng):
        """Test that copies do not share parameter storage."""
        net = Mlp.create([2, 2], "tanh", rng)
        clone = net.copy()
        clone.weights[0] += 1.0
        assert not np.array_equal(net.weights[0], clone.weights[0])


class TestSgdMomentum:
    """Test the momentum optimizer."""

    def test_two_steps(self):
        """Test v <- m v + g, p <- p - lr v on a scalar."""
        p = np.array([1.0])
        opt = SgdMomentum(0.1, momentum=0.9)
        opt.step([p], [np.array([2.0])])
        assert p[0] == pytest.approx(0.8)
        opt.step([p], [np.array([2.0])])
        assert p[0] == pytest.approx(0.8 - 0.1 * (0.9 * 2.0 + 2.0))

    def test_clipping_scales_gradient(self):
        """Test that the global gradient norm is clipped."""
        p = np.zeros(2)
        opt = SgdMomentum(1.0, momentum=0.0, clip_norm=1.0)
        opt.step([p], [np.array([3.0, 4.0])])
        assert np.allclose(p, [-0.6, -0.8])

    def test_non_finite_gradient(self):
        """Test that a NaN gradient reports divergence with its step."""
        opt = SgdMomentum(0.1)
        with pytest.raises(TrainingDivergedError) as info:
            opt.step([np.zeros(1)], [np.array([np.nan])], step_index=12)
        assert info.value.step == 12
        assert "step 12" in str(info.value)

    def test_invalid_hyperparameters(self):
        """Test that non-positive rates and momentum >= 1 are refused."""
        with pytest.raises(ArgumentError):
            SgdMomentum(0.0)
        with pytest.raises(ArgumentError):
            SgdMomentum(0.1, momentum=1.0)


def test_annealed_lr():
    """Test the annealing schedule endpoints."""
    assert annealed_lr(0.01, 0.0) == pytest.approx(0.01)
    assert annealed_lr(0.01, 1.0) == pytest.approx(0.01 / 11.0**0.75)
