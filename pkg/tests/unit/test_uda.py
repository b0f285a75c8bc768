"""
Unit tests for uda module.
"""

import numpy as np
import pytest

from dtskit.config import ShiftSpec, UdaConfig
from dtskit.data import Domain, LabeledDataset, generate_pair
from dtskit.errors import (
    ArgumentError,
    ConfigurationError,
    DimensionError,
    EstimatorError,
    LabelError,
    TrainingDivergedError,
)
from dtskit.numerics import Mlp, Rng
from dtskit.uda import (
    UDAModel,
    accuracy,
    adversarial_reg,
    cross_entropy,
    median_heuristic,
    mmd,
    pseudo_label,
    trade_off_schedule,
    train_source_only,
    train_uda,
)
from tests.oracles import numeric_gradient, relative_error

SMALL = {
    "transform_hidden": [8],
    "feature_dim": 4,
    "discriminator_hidden": [8],
    "steps": 40,
    "batch_size": 16,
    "log_every": 10,
}


def _mixture(n: int, shift: float, rng: Rng) -> LabeledDataset:
    labels = np.arange(n) % 2
    centers = np.array([[-1.5, 0.0], [1.5, 0.0]])[labels] + np.array([shift, 0.0])
    return LabeledDataset(centers + 0.4 * rng.normal(n, 2), labels, Domain.SOURCE)


class TestCrossEntropy:
    """Test the softmax cross-entropy loss."""

    def test_uniform_logits(self):
        """Test that equal logits over 4 classes give ln 4."""
        loss, grad = cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
        assert loss == pytest.approx(np.log(4.0))
        assert np.allclose(grad.sum(axis=1), 0.0)

    def test_gradient_matches_finite_differences(self, rng):
        """Test the analytic gradient against central differences."""
        logits = rng.normal(5, 3)
        labels = np.array([0, 2, 1, 1, 0])
        _, grad = cross_entropy(logits, labels)
        numeric = numeric_gradient(lambda: cross_entropy(logits, labels)[0], logits)
        assert relative_error(grad, numeric) < 1e-6

    def test_errors(self):
        """Test empty batches, label shapes and label ranges."""
        with pytest.raises(ArgumentError):
            cross_entropy(np.zeros((0, 2)), np.zeros(0))
        with pytest.raises(DimensionError):
            cross_entropy(np.zeros((2, 2)), np.zeros(3))
        with pytest.raises(LabelError):
            cross_entropy(np.zeros((2, 2)), np.array([0, 2]))


class TestMmd:
    """Test the multi-kernel MMD estimator."""

    def test_identical_samples_biased(self, rng):
        """Test that the biased estimate of a sample against itself is 0."""
        a = rng.normal(10, 3)
        result = mmd(a, a, [0.5, 1.0, 2.0], unbiased=False)
        assert result.raw == pytest.approx(0.0, abs=1e-12)

    def test_two_points(self):
        """Test the closed form for two point masses at distance delta."""
        delta, gamma = 1.5, 0.8
        a, b = np.zeros((1, 2)), np.array([[delta, 0.0]])
        result = mmd(a, b, [gamma], unbiased=False)
        expected = 2.0 * (1.0 - np.exp(-(delta**2) / (2.0 * gamma**2)))
        assert result.value == pytest.approx(expected)

    def test_unbiased_needs_two_rows(self):
        """Test that one row per side cannot feed the unbiased estimate."""
        with pytest.raises(EstimatorError):
            mmd(np.zeros((1, 2)), np.ones((3, 2)), [1.0])

    def test_empty_and_shape_errors(self):
        """Test empty samples, mismatched widths and missing bandwidths."""
        with pytest.raises(EstimatorError):
            mmd(np.zeros((0, 2)), np.ones((3, 2)), [1.0], unbiased=False)
        with pytest.raises(DimensionError):
            mmd(np.zeros((3, 2)), np.ones((3, 3)), [1.0])
        with pytest.raises(ArgumentError):
            mmd(np.zeros((3, 2)), np.ones((3, 2)), [])

    def test_value_is_clipped(self, rng):
        """Test that the reported value is never negative."""
        a = rng.spawn("a").normal(6, 2)
        b = rng.spawn("b").normal(6, 2)
        result = mmd(a, b, [1.0])
        assert result.value == max(result.raw, 0.0)

    @pytest.mark.parametrize("unbiased", [True, False])
    def test_gradient_matches_finite_differences(self, rng, unbiased):
        """Test both sample gradients with the bandwidths held fixed."""
        a = rng.spawn("a").normal(5, 2)
        b = rng.spawn("b").normal(4, 2) + 0.5
        widths = [0.5, 1.0, 2.0]

        def objective() -> float:
            return mmd(a, b, widths, unbiased).raw

        result = mmd(a, b, widths, unbiased)
        assert relative_error(result.grad_a, numeric_gradient(objective, a)) < 1e-6
        assert relative_error(result.grad_b, numeric_gradient(objective, b)) < 1e-6

    def test_median_heuristic(self):
        """Test the bandwidth of two points at distance 2."""
        assert median_heuristic(
            np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]])
        ) == pytest.approx(2.0)

    def test_median_heuristic_degenerate(self):
        """Test that coincident points fall back to bandwidth 1."""
        assert median_heuristic(np.zeros((3, 2)), np.zeros((2, 2))) == 1.0


class TestAdversarialReg:
    """Test the domain discriminator term."""

    def _model(self, rng, discriminator=True):
        cfg = UdaConfig(regularizer="adversarial", **SMALL)
        model = UDAModel.create(2, 2, cfg, rng)
        if not discriminator:
            model.discriminator = None
        return model

    def test_zero_discriminator(self, rng):
        """Test that an all-zero discriminator scores ln 2 at chance."""
        model = self._model(rng)
        model.discriminator = Mlp.zeros([4, 8, 1])
        result = adversarial_reg(model, np.ones((3, 4)), np.zeros((5, 4)))
        assert result.loss == pytest.approx(np.log(2.0))

    def test_feature_gradients_are_reversed(self, rng):
        """Test that feature gradients are the negated BCE gradients."""
        model = self._model(rng)
        fs = rng.spawn("fs").normal(3, 4)
        ft = rng.spawn("ft").normal(4, 4)
        result = adversarial_reg(model, fs, ft)

        def objective() -> float:
            return adversarial_reg(model, fs, ft).loss

        numeric_fs = numeric_gradient(objective, fs)
        numeric_ft = numeric_gradient(objective, ft)
        assert relative_error(-result.grad_source, numeric_fs) < 1e-6
        assert relative_error(-result.grad_target, numeric_ft) < 1e-6

    def test_discriminator_gradients_descend(self, rng):
        """Test discriminator gradients against central differences."""
        model = self._model(rng)
        fs = rng.spawn("fs").normal(3, 4)
        ft = rng.spawn("ft").normal(4, 4)
        result = adversarial_reg(model, fs, ft)

        def objective() -> float:
            return adversarial_reg(model, fs, ft).loss

        assert model.discriminator is not None
        for param, grad in zip(
            model.discriminator.parameters(), result.discriminator_grads
        ):
            assert relative_error(grad, numeric_gradient(objective, param)) < 1e-6

    def test_needs_discriminator(self, rng):
        """Test that a model without a discriminator is a configuration error."""
        model = self._model(rng, discriminator=False)
        with pytest.raises(ConfigurationError):
            adversarial_reg(model, np.zeros((2, 4)), np.zeros((2, 4)))


class TestUDAModel:
    """Test model construction and prediction."""

    def test_create_mmd_has_no_discriminator(self, rng):
        """Test that the MMD regularizer builds no discriminator."""
        model = UDAModel.create(2, 3, UdaConfig(**SMALL), rng)
        assert model.discriminator is None
        assert model.num_classes == 3
        assert model.input_dim == 2

    def test_invalid_regularizer(self, rng):
        """Test that unknown regularizers and negative weights are refused."""
        model = UDAModel.create(2, 2, UdaConfig(**SMALL), rng)
        with pytest.raises(ConfigurationError):
            UDAModel(model.transform, model.head, None, "coral")
        with pytest.raises(ConfigurationError):
            UDAModel(model.transform, model.head, None, "mmd", -1.0)

    def test_head_must_match_transform(self, rng):
        """Test that a head of the wrong input width is refused."""
        with pytest.raises(DimensionError):
            UDAModel(Mlp.zeros([2, 4]), Mlp.zeros([3, 2]), None)

    def test_probabilities(self, rng):
        """Test that class probabilities sum to one per row."""
        model = UDAModel.create(2, 3, UdaConfig(**SMALL), rng)
        probs = model.probabilities(rng.normal(5, 2))
        assert np.allclose(probs.sum(axis=1), 1.0)


class TestPseudoLabelAndAccuracy:
    """Test pseudo-labeling and accuracy."""

    def _constant_model(self, scale: float) -> UDAModel:
        head = Mlp.zeros([2, 3])
        head.biases[0][:] = np.array([0.0, 1.0, 2.0]) * scale
        return UDAModel(Mlp.zeros([2, 2]), head, None)

    def test_argmax_class(self):
        """Test that a constant bias labels every row with its argmax."""
        target = LabeledDataset(np.ones((4, 2)), None, Domain.TARGET)
        labeled = pseudo_label(self._constant_model(1.0), target)
        assert labeled.labels is not None
        assert labeled.labels.tolist() == [2, 2, 2, 2]
        assert labeled.domain == Domain.TARGET

    def test_invariant_to_logit_scale(self, rng):
        """Test that positive logit scaling leaves pseudo-labels unchanged."""
        target = LabeledDataset(rng.normal(6, 2), None, Domain.TARGET)
        a = pseudo_label(self._constant_model(1.0), target)
        b = pseudo_label(self._constant_model(10.0), target)
        assert a.equals(b)

    def test_accuracy(self):
        """Test accuracy on a half-correct dataset."""
        ds = LabeledDataset(np.zeros((4, 2)), np.array([2, 2, 0, 1]), Domain.SOURCE)
        assert accuracy(self._constant_model(1.0), ds) == 0.5

    def test_accuracy_errors(self):
        """Test that empty or unlabeled datasets cannot be scored."""
        model = self._constant_model(1.0)
        with pytest.raises(ArgumentError):
            accuracy(model, LabeledDataset(np.zeros((0, 2)), None, Domain.SOURCE))
        with pytest.raises(ArgumentError):
            accuracy(model, LabeledDataset(np.zeros((2, 2)), None, Domain.TARGET))


class TestTraining:
    """Test source-only and regularized training."""

    def test_zero_trade_off_equals_source_only(self, rng):
        """Test that lambda = 0 reduces train_uda to plain source training."""
        cfg = UdaConfig(trade_off=0.0, **SMALL)
        source = _mixture(60, 0.0, rng.spawn("source"))
        target = _mixture(30, 1.0, rng.spawn("target")).unlabeled()
        model = UDAModel.create(2, 2, cfg, rng.spawn("init"))
        a = train_uda(source, target, model, cfg, Rng(1, "train"))
        b = train_source_only(source, model, cfg, Rng(1, "train"))
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert np.array_equal(pa, pb)

    def test_learns_separable_mixture(self, rng):
        """Test that source-only training separates two clusters."""
        cfg = UdaConfig(**{**SMALL, "steps": 300})
        source = _mixture(200, 0.0, rng.spawn("source"))
        model = UDAModel.create(2, 2, cfg, rng.spawn("init"))
        result = train_source_only(source, model, cfg, rng.spawn("train"))
        assert accuracy(result.model, source) > 0.95

    @pytest.mark.parametrize("regularizer", ["mmd", "adversarial"])
    def test_regularized_training_runs(self, rng, regularizer):
        """Test that both regularizers train and trace finite losses."""
        cfg = UdaConfig(regularizer=regularizer, **SMALL)
        source = _mixture(60, 0.0, rng.spawn("source"))
        target = _mixture(30, 1.0, rng.spawn("target"))
        model = UDAModel.create(2, 2, cfg, rng.spawn("init"))
        result = train_uda(source, target, model, cfg, rng.spawn("train"))
        assert [p.step for p in result.trace] == [0, 10, 20, 30, 39]
        assert all(np.isfinite(p.task_loss + p.reg_loss) for p in result.trace)
        assert result.trace[0].lambda_effective == 0.0
        if regularizer == "adversarial":
            assert len(result.discriminator_accuracy) == 40

    def test_identical_domains_confuse_discriminator(self):
        """Test that the discriminator stays near chance on identical domains."""
        cfg = UdaConfig(regularizer="adversarial", **{**SMALL, "steps": 200})
        rng = Rng(12, "same")
        source = _mixture(400, 0.0, rng.spawn("data"))
        target = LabeledDataset(source.features, None, Domain.TARGET)
        model = UDAModel.create(2, 2, cfg, rng.spawn("init"))
        result = train_uda(source, target, model, cfg, rng.spawn("train"))
        late = result.discriminator_accuracy[-100:]
        assert abs(float(np.mean(late)) - 0.5) < 0.1

    def test_non_finite_features(self, rng):
        """Test that NaN source rows report divergence at step 0."""
        cfg = UdaConfig(**SMALL)
        source = LabeledDataset(np.full((8, 2), np.nan), np.zeros(8), Domain.SOURCE)
        model = UDAModel.create(2, 2, cfg, rng)
        with pytest.raises(TrainingDivergedError) as info:
            train_source_only(source, model, cfg, rng)
        assert info.value.step == 0

    def test_input_dim_checked(self, rng):
        """Test that the source width must match the model input."""
        cfg = UdaConfig(**SMALL)
        source = LabeledDataset(np.zeros((8, 3)), np.zeros(8), Domain.SOURCE)
        with pytest.raises(DimensionError):
            train_source_only(source, UDAModel.create(2, 2, cfg, rng), cfg, rng)

    def test_target_labels_ignored(self, rng):
        """Test that target labels have no effect on training."""
        cfg = UdaConfig(**SMALL)
        source = _mixture(60, 0.0, rng.spawn("source"))
        target = _mixture(30, 1.0, rng.spawn("target"))
        model = UDAModel.create(2, 2, cfg, rng.spawn("init"))
        a = train_uda(source, target, model, cfg, Rng(2, "train"))
        b = train_uda(source, target.unlabeled(), model, cfg, Rng(2, "train"))
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert np.array_equal(pa, pb)


def test_trade_off_schedule():
    """Test the warm-up ramp endpoints."""
    assert trade_off_schedule(0.0) == 0.0
    assert trade_off_schedule(1.0) == pytest.approx(2.0 / (1.0 + np.exp(-10.0)) - 1.0)


def _target_accuracy(pair, cfg: UdaConfig, seed: int) -> float:
    model = UDAModel.create(2, 2, cfg, Rng(seed, "init"))
    result = train_uda(pair.source, pair.target, model, cfg, Rng(seed, "train"))
    return accuracy(result.model, pair.evaluation_target())


@pytest.mark.slow
class TestDomainShift:
    """Test trained classifiers on the two-moons tasks."""

    def test_no_shift_control(self):
        """Test that held-out target accuracy tracks source accuracy without shift."""
        spec = ShiftSpec(seed=0, rotation_deg=0.0)
        pair = generate_pair(spec)
        cfg = UdaConfig()
        model = UDAModel.create(2, 2, cfg, Rng(0, "init"))
        trained = train_uda(pair.source, pair.target, model, cfg, Rng(0, "train"))
        held_out = generate_pair(
            spec.model_copy(update={"seed": 1, "n_source": 5000, "n_target": 5000})
        )
        source_acc = accuracy(trained.model, held_out.source)
        target_acc = accuracy(trained.model, held_out.evaluation_target())
        assert abs(source_acc - target_acc) < 0.02

    @pytest.mark.parametrize("regularizer", ["mmd", "adversarial"])
    def test_adaptation_beats_source_only(self, regularizer):
        """Test mean rotated-target accuracy above the lambda = 0 baseline."""
        adapted, baseline = [], []
        for seed in range(10):
            pair = generate_pair(ShiftSpec(seed=seed))
            cfg = UdaConfig(regularizer=regularizer)
            adapted.append(_target_accuracy(pair, cfg, seed))
            source_only = cfg.model_copy(update={"trade_off": 0.0})
            baseline.append(_target_accuracy(pair, source_only, seed))
        assert np.mean(adapted) > np.mean(baseline)
