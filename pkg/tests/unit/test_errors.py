"""
Unit tests for errors, log and schemas modules.
"""

import io
import json
import sys

import pytest
import structlog

from dtskit.errors import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_FAILURE,
    EXIT_MISSING_INPUT,
    EXIT_PARSE,
    CheckpointVersionError,
    ConfigurationError,
    DatasetParseError,
    DimensionError,
    DtsError,
    MissingInputError,
    PlanError,
    SamplingDivergedError,
    StepIndexError,
    TrainingDivergedError,
    stage,
)
from dtskit.log import configure_logging, timed_stage
from dtskit.schemas import BoundReport, LossPoint


class TestErrors:
    """Test the exception hierarchy."""

    @pytest.mark.parametrize(
        "error, code",
        [
            (DimensionError("x"), EXIT_FAILURE),
            (ConfigurationError("x"), EXIT_CONFIG),
            (PlanError("x"), EXIT_CONFIG),
            (MissingInputError("x"), EXIT_MISSING_INPUT),
            (TrainingDivergedError("x", 3), EXIT_DIVERGED),
            (SamplingDivergedError("x", 3), EXIT_DIVERGED),
            (DatasetParseError("x", 2), EXIT_PARSE),
            (CheckpointVersionError("x"), EXIT_CHECKPOINT),
        ],
    )
    def test_exit_codes(self, error, code):
        """Test the exit code carried by each error class."""
        assert error.exit_code == code

    def test_builtin_bases(self):
        """Test that shape and step errors are also builtin errors."""
        assert isinstance(DimensionError("x"), ValueError)
        assert isinstance(StepIndexError("x"), IndexError)

    def test_stage_tags_untagged_errors(self):
        """Test that the stage context names errors raised inside it."""
        with pytest.raises(DtsError) as info:
            with stage("train-cdpm"):
                raise TrainingDivergedError("non-finite loss", 5)
        assert info.value.stage == "train-cdpm"
        assert str(info.value) == "[train-cdpm] non-finite loss at step 5"

    def test_inner_stage_wins(self):
        """Test that nested stages keep the innermost name."""
        with pytest.raises(DtsError) as info:
            with stage("outer"):
                with stage("inner"):
                    raise ConfigurationError("bad")
        assert info.value.stage == "inner"


class TestTimedStage:
    """Test stage timing and logging."""

    def test_json_events_go_to_stderr(self, monkeypatch):
        """Test that configured events are JSON lines on stderr."""
        stream = io.StringIO()
        monkeypatch.setattr(sys, "stderr", stream)
        try:
            configure_logging("INFO", "json")
            structlog.get_logger("probe").info("Probe event", rows=3)
        finally:
            monkeypatch.undo()
            configure_logging("WARNING", "console")
        events = [json.loads(line) for line in stream.getvalue().splitlines()]
        assert events[-1]["event"] == "Probe event"
        assert events[-1]["rows"] == 3
        assert events[-1]["level"] == "info"

    def test_body_runs_once(self):
        """Test that the stage body runs exactly once."""
        seen = []
        with timed_stage("augment", rows=3):
            seen.append(1)
        assert seen == [1]

    def test_failure_is_tagged_and_reraised(self):
        """Test that errors leave the stage tagged with its name."""
        with pytest.raises(PlanError) as info:
            with timed_stage("generate"):
                raise PlanError("too few points")
        assert info.value.stage == "generate"


class TestSchemas:
    """Test report serialisation."""

    def test_six_significant_digits(self):
        """Test that report floats are rounded only in JSON."""
        point = LossPoint(
            step=1, task_loss=1.0 / 3.0, reg_loss=0.0, lambda_effective=2.0 / 3.0
        )
        document = json.loads(point.model_dump_json())
        assert document["task_loss"] == 0.333333
        assert document["lambda_effective"] == 0.666667
        assert point.task_loss == 1.0 / 3.0

    def test_bound_report_defaults(self):
        """Test the labels attached to every bound report."""
        report = BoundReport(
            source_risk=0.1,
            augmented_risk=0.2,
            d_source_target=1.0,
            d_augmented_target=0.5,
            mixing_fraction=0.5,
        )
        assert report.premise_holds is None
        assert report.distance_kind == "proxy A-distance"
        assert report.constant_c == "not estimated"
