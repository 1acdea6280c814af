"""Unit tests for model module."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.model import (
    Arch,
    LayoutMismatchError,
    ModelError,
    ModelSpec,
    ParamVector,
    add,
    forward,
    init_params,
    predict,
    predict_batch,
    scale,
    subtract,
    weighted_mean,
    zeros,
)

LINEAR_2x2 = ModelSpec(Arch.SOFTMAX_LINEAR, input_dim=2, num_classes=2)
MLP = ModelSpec(Arch.MLP1, input_dim=4, num_classes=3, hidden_dim=8)


def vec(values):
    """Four-entry ParamVector (1 input, 2 classes)."""
    spec = ModelSpec(Arch.SOFTMAX_LINEAR, input_dim=1, num_classes=2)
    return ParamVector(np.asarray(values, dtype=np.float64), spec)


class TestModelSpec:
    """Test model layouts."""

    def test_linear_param_count(self):
        """Test 2*2 + 2 parameters for a 2-input, 2-class linear model."""
        assert LINEAR_2x2.num_params == 6

    def test_mlp_param_count(self):
        """Test 4*8 + 8 + 8*3 + 3 parameters for Mlp1."""
        assert MLP.num_params == 67

    def test_mlp_requires_hidden_dim(self):
        """Test that Mlp1 without a hidden width is rejected."""
        with pytest.raises(ModelError):
            ModelSpec(Arch.MLP1, input_dim=4, num_classes=3)

    def test_needs_two_classes(self):
        """Test that a single-class model is rejected."""
        with pytest.raises(ModelError):
            ModelSpec(Arch.SOFTMAX_LINEAR, input_dim=4, num_classes=1)


class TestParamVector:
    """Test parameter vector invariants."""

    def test_rejects_non_finite(self):
        """Test that NaN and inf entries are rejected."""
        with pytest.raises(ModelError):
            ParamVector(np.array([0.0, np.nan, 0.0, 0.0, 0.0, 0.0]), LINEAR_2x2)
        with pytest.raises(ModelError):
            ParamVector(np.array([0.0, np.inf, 0.0, 0.0, 0.0, 0.0]), LINEAR_2x2)

    def test_rejects_wrong_length(self):
        """Test that the length must match the layout."""
        with pytest.raises(LayoutMismatchError):
            ParamVector(np.zeros(5), LINEAR_2x2)

    def test_is_read_only(self):
        """Test that the stored array cannot be mutated."""
        p = zeros(LINEAR_2x2)
        with pytest.raises(ValueError):
            p.values[0] = 1.0

    def test_construction_copies(self):
        """Test that later changes to the source array do not leak in."""
        source = np.zeros(6)
        p = ParamVector(source, LINEAR_2x2)
        source[0] = 5.0
        assert p.values[0] == 0.0

    def test_segments(self):
        """Test named segment views."""
        p = ParamVector(np.arange(6.0), LINEAR_2x2)
        np.testing.assert_array_equal(p.segment("W"), [[0.0, 1.0], [2.0, 3.0]])
        np.testing.assert_array_equal(p.segment("b"), [4.0, 5.0])

    def test_wrap_takes_ownership(self):
        """Test that wrap shares the array, freezes it and matches the copying constructor."""
        source = np.arange(6.0)
        p = ParamVector.wrap(source, LINEAR_2x2)
        assert np.shares_memory(p.values, source)
        assert not source.flags.writeable
        assert p == ParamVector(np.arange(6.0), LINEAR_2x2)
        np.testing.assert_array_equal(p.segment("b"), [4.0, 5.0])

    def test_wrap_checks_layout(self):
        """Test that wrap still rejects a wrong size or dtype."""
        with pytest.raises(LayoutMismatchError):
            ParamVector.wrap(np.zeros(5), LINEAR_2x2)
        with pytest.raises(LayoutMismatchError):
            ParamVector.wrap(np.zeros(6, dtype=np.float32), LINEAR_2x2)


class TestInitParams:
    """Test random initialization."""

    def test_linear_length_and_zero_bias(self):
        """Test vector length and exactly zero biases."""
        p = init_params(LINEAR_2x2, seed=1)
        assert len(p) == 6
        assert np.all(p.segment("b") == 0.0)

    def test_deterministic(self):
        """Test that the same seed yields identical vectors."""
        assert init_params(MLP, seed=5) == init_params(MLP, seed=5)
        assert init_params(MLP, seed=5) != init_params(MLP, seed=6)

    def test_mlp_bounds(self):
        """Test fan-based uniform bounds and zero biases for Mlp1."""
        p = init_params(MLP, seed=5)
        assert len(p) == 67
        assert np.all(np.abs(p.segment("W1")) <= np.sqrt(6.0 / (4 + 8)))
        assert np.all(np.abs(p.segment("W2")) <= np.sqrt(6.0 / (8 + 3)))
        assert np.all(p.segment("b1") == 0.0)
        assert np.all(p.segment("b2") == 0.0)


class TestForward:
    """Test forward passes."""

    def test_linear_zero_params(self):
        """Test that zero parameters give zero logits."""
        logits, rep = forward(LINEAR_2x2, zeros(LINEAR_2x2), [0.3, -1.2])
        np.testing.assert_array_equal(logits, [0.0, 0.0])
        np.testing.assert_array_equal(rep, [0.3, -1.2])

    def test_mlp_zero_params(self):
        """Test that zero Mlp1 parameters give zero representation and logits."""
        logits, rep = forward(MLP, zeros(MLP), [1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(rep, np.zeros(8))
        np.testing.assert_array_equal(logits, np.zeros(3))

    def test_identity_weights(self):
        """Test W = I, b = 0 on x = [2, 3]."""
        p = ParamVector(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), LINEAR_2x2)
        logits, _ = forward(LINEAR_2x2, p, [2.0, 3.0])
        np.testing.assert_array_equal(logits, [2.0, 3.0])

    def test_mlp_relu(self):
        """Test the hidden ReLU on a hand-set network."""
        spec = ModelSpec(Arch.MLP1, input_dim=1, num_classes=2, hidden_dim=2)
        # W1 = [[1], [-1]], b1 = [0, 0], W2 = [[1, 0], [0, 1]], b2 = [0.5, 0]
        p = ParamVector(np.array([1.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5, 0.0]), spec)
        logits, rep = forward(spec, p, [2.0])
        np.testing.assert_array_equal(rep, [2.0, 0.0])
        np.testing.assert_array_equal(logits, [2.5, 0.0])

    def test_dimension_mismatch(self):
        """Test that a wrong input length is rejected."""
        with pytest.raises(ModelError):
            forward(LINEAR_2x2, zeros(LINEAR_2x2), [1.0, 2.0, 3.0])

    def test_layout_mismatch(self):
        """Test that parameters of another layout are rejected."""
        with pytest.raises(LayoutMismatchError):
            forward(LINEAR_2x2, zeros(MLP), [1.0, 2.0])


class TestPredict:
    """Test class prediction."""

    def test_tie_breaks_to_lowest(self):
        """Test that all-equal logits predict class 0."""
        spec = ModelSpec(Arch.SOFTMAX_LINEAR, input_dim=1, num_classes=3)
        assert predict(spec, zeros(spec), [1.0]) == 0

    def test_argmax(self):
        """Test logits [1, 3, 2] predict class 1."""
        spec = ModelSpec(Arch.SOFTMAX_LINEAR, input_dim=1, num_classes=3)
        p = ParamVector(np.array([0.0, 0.0, 0.0, 1.0, 3.0, 2.0]), spec)
        assert predict(spec, p, [1.0]) == 1

    def test_identity_prediction(self):
        """Test identity weights on x = [0, 9] predict class 1."""
        p = ParamVector(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), LINEAR_2x2)
        assert predict(LINEAR_2x2, p, [0.0, 9.0]) == 1

    @settings(max_examples=100, deadline=None)
    @given(
        logits=st.lists(st.floats(-50, 50), min_size=3, max_size=3),
        shift=st.floats(-100, 100),
    )
    def test_shift_invariance(self, logits, shift):
        """Test that adding a constant to every logit keeps the prediction."""
        spec = ModelSpec(Arch.SOFTMAX_LINEAR, input_dim=1, num_classes=3)
        base = ParamVector(np.array([0.0, 0.0, 0.0] + logits), spec)
        shifted = ParamVector(np.array([0.0, 0.0, 0.0] + [v + shift for v in logits]), spec)
        if len({v + shift for v in logits}) == len(set(logits)):
            assert predict(spec, base, [1.0]) == predict(spec, shifted, [1.0])

    def test_predict_batch_matches_single(self):
        """Test batched prediction against per-row prediction."""
        p = init_params(MLP, seed=9)
        x = np.random.default_rng(0).normal(size=(12, 4))
        batch = predict_batch(MLP, p, x)
        assert batch.tolist() == [predict(MLP, p, row) for row in x]


class TestArithmetic:
    """Test parameter vector arithmetic."""

    def test_weighted_mean_example(self):
        """Test weighted_mean([([1,3],1), ([3,5],3)]) = [2.5, 4.5]."""
        result = weighted_mean([(vec([1.0, 3.0, 0.0, 0.0]), 1.0), (vec([3.0, 5.0, 0.0, 0.0]), 3.0)])
        np.testing.assert_array_equal(result.values, [2.5, 4.5, 0.0, 0.0])

    def test_scale(self):
        """Test scale([2, -4], 0.5) = [1, -2]."""
        np.testing.assert_array_equal(scale(vec([2.0, -4.0, 0.0, 1.0]), 0.5).values, [1.0, -2.0, 0.0, 0.5])

    def test_single_element_mean_is_exact(self):
        """Test that the mean of one vector is that vector exactly."""
        p = init_params(MLP, seed=3)
        assert weighted_mean([(p, 7.3)]) == p

    def test_idempotence(self):
        """Test that the mean of n copies of p equals p."""
        p = init_params(MLP, seed=4)
        for n in (2, 3, 7, 10):
            result = weighted_mean([(p, 1.0)] * n)
            np.testing.assert_allclose(result.values, p.values, rtol=0, atol=1e-12)

    def test_add_and_subtract(self):
        """Test elementwise sum and difference."""
        p, q = vec([1.0, 2.0, 0.0, 4.0]), vec([0.5, -1.0, 0.0, 1.0])
        np.testing.assert_array_equal(add(p, q).values, [1.5, 1.0, 0.0, 5.0])
        np.testing.assert_array_equal(subtract(p, q).values, [0.5, 3.0, 0.0, 3.0])

    def test_layout_mismatch(self):
        """Test that vectors of different layouts cannot be combined."""
        with pytest.raises(LayoutMismatchError):
            add(zeros(LINEAR_2x2), zeros(MLP))
        with pytest.raises(LayoutMismatchError):
            weighted_mean([(zeros(LINEAR_2x2), 1.0), (zeros(MLP), 1.0)])

    def test_zero_weights(self):
        """Test that all-zero weights are rejected."""
        with pytest.raises(ModelError):
            weighted_mean([(vec([1.0, 2.0, 0.0, 0.0]), 0.0), (vec([3.0, 4.0, 0.0, 0.0]), 0.0)])

    def test_negative_weight_and_empty(self):
        """Test that negative weights and empty input are rejected."""
        with pytest.raises(ModelError):
            weighted_mean([(vec([1.0, 2.0, 0.0, 0.0]), -1.0), (vec([3.0, 4.0, 0.0, 0.0]), 2.0)])
        with pytest.raises(ModelError):
            weighted_mean([])
