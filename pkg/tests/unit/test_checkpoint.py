"""
Unit tests for checkpoint module.
"""

import json

import numpy as np
import pytest

from dtskit.cdpm import ConditionalDenoiser
from dtskit.checkpoint import (
    CHECKPOINT_FORMAT_VERSION,
    DenoiserBundle,
    load_classifier,
    load_denoiser,
    save_classifier,
    save_denoiser,
)
from dtskit.config import ScheduleConfig, UdaConfig
from dtskit.data import Standardizer
from dtskit.errors import CheckpointError, CheckpointVersionError, MissingInputError
from dtskit.schedule import schedule_from_config
from dtskit.uda import UDAModel


@pytest.fixture
def bundle(rng):
    cfg = ScheduleConfig(steps=30)
    model = ConditionalDenoiser.create(2, 3, [8, 8], 4, "relu", rng.spawn("denoiser"))
    scaler = Standardizer(np.array([0.5, -1.0]), np.array([2.0, 0.25]))
    return DenoiserBundle(model, schedule_from_config(cfg), cfg, scaler)


@pytest.fixture
def classifier(rng):
    cfg = UdaConfig(regularizer="adversarial", transform_hidden=[5], feature_dim=3)
    return UDAModel.create(2, 2, cfg, rng.spawn("classifier"))


class TestDenoiserCheckpoint:
    """Test denoiser save and load."""

    def test_round_trip_is_exact(self, bundle, rng, tmp_path):
        """Test that every parameter and prediction survives bit for bit."""
        path = tmp_path / "denoiser.json"
        save_denoiser(path, bundle)
        loaded = load_denoiser(path)
        for a, b in zip(bundle.model.parameters(), loaded.model.parameters()):
            assert np.array_equal(a, b)
        assert loaded.schedule_config == bundle.schedule_config
        assert np.array_equal(loaded.schedule.betas, bundle.schedule.betas)
        assert np.array_equal(loaded.standardizer.scale, bundle.standardizer.scale)
        x = rng.normal(4, 2)
        labels = np.array([0, 1, 2, 0])
        assert np.array_equal(
            loaded.model.predict_noise(x, labels, 7),
            bundle.model.predict_noise(x, labels, 7),
        )

    def test_wrong_kind(self, classifier, tmp_path):
        """Test that a classifier file is not accepted as a denoiser."""
        path = tmp_path / "classifier.json"
        save_classifier(path, classifier)
        with pytest.raises(CheckpointError):
            load_denoiser(path)


class TestClassifierCheckpoint:
    """Test classifier save and load."""

    def test_round_trip_is_exact(self, classifier, rng, tmp_path):
        """Test that predictions and the discriminator survive."""
        path = tmp_path / "classifier.json"
        save_classifier(path, classifier)
        loaded = load_classifier(path)
        assert loaded.regularizer == "adversarial"
        assert loaded.discriminator is not None
        for a, b in zip(classifier.parameters(), loaded.parameters()):
            assert np.array_equal(a, b)
        x = rng.normal(6, 2)
        assert np.array_equal(loaded.logits(x), classifier.logits(x))

    def test_version_mismatch(self, classifier, tmp_path):
        """Test that a file from another format version is refused."""
        path = tmp_path / "classifier.json"
        save_classifier(path, classifier)
        document = json.loads(path.read_text())
        document["format_version"] = CHECKPOINT_FORMAT_VERSION + 1
        path.write_text(json.dumps(document))
        with pytest.raises(CheckpointVersionError):
            load_classifier(path)

    def test_garbage(self, tmp_path):
        """Test that non-JSON and non-object files are checkpoint errors."""
        path = tmp_path / "garbage.json"
        path.write_text("not json")
        with pytest.raises(CheckpointError):
            load_classifier(path)
        path.write_text("[1, 2]")
        with pytest.raises(CheckpointError):
            load_classifier(path)

    def test_inconsistent_tensors(self, classifier, tmp_path):
        """Test that mismatched layer shapes are checkpoint errors."""
        path = tmp_path / "classifier.json"
        save_classifier(path, classifier)
        document = json.loads(path.read_text())
        document["head"]["weights"][0] = [[0.0]]
        path.write_text(json.dumps(document))
        with pytest.raises(CheckpointError):
            load_classifier(path)

    def test_missing(self, tmp_path):
        """Test that a missing checkpoint is a missing-input error."""
        with pytest.raises(MissingInputError):
            load_classifier(tmp_path / "absent.json")
