"""
Configuration management: process settings and the experiment RunConfig.

RunConfig values are resolved from (highest precedence first) explicit
overrides, DTSKIT_<SECTION>__<KEY> environment variables, a key-value config
file with dotted keys, and field defaults.
"""

import json
from contextvars import ContextVar
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic.fields import FieldInfo
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)

from dtskit.errors import ConfigurationError, MissingInputError

ENV_PREFIX = "DTSKIT_"


class AppSettings(BaseSettings):
    """Process-level settings with environment variable support."""

    app_name: str = Field(default="dtskit")

    # Logging settings
    log_level: str = Field(default="INFO")
    log_format: Literal["json", "console"] = Field(default="console")

    # Sweep worker pool
    workers: int = Field(default=1, ge=1)

    output_dir: str = Field(default="runs")

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX, env_file=".env", case_sensitive=False, extra="ignore"
    )


# Global settings instance
settings = AppSettings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    """Synthetic domain-shift family and its parameters."""

    family: Literal["two_moons_rotation", "gaussian_mixture_affine"] = Field(
        default="two_moons_rotation"
    )
    rotation_deg: float = Field(default=30.0, ge=0.0, le=90.0)
    noise: float = Field(default=0.1, ge=0.0)
    n_source: int = Field(default=2000, ge=2)
    n_target: int = Field(default=100, ge=2)
    class_means: List[List[float]] = Field(default=[[-2.0, 0.0], [2.0, 0.0]])
    class_scales: List[float] = Field(default=[0.5, 0.5])
    affine_matrix: List[List[float]] = Field(default=[[1.0, 0.0], [0.0, 1.0]])
    affine_shift: List[float] = Field(default=[2.0, 0.0])

    @model_validator(mode="after")
    def check_mixture(self) -> "DataConfig":
        if len(self.class_means) < 2:
            raise ValueError("class_means needs at least two classes")
        dim = len(self.class_means[0])
        if dim < 1 or any(len(m) != dim for m in self.class_means):
            raise ValueError("class_means rows must share one positive dimension")
        if len(self.class_scales) != len(self.class_means):
            raise ValueError("class_scales needs one scale per class")
        if any(s <= 0.0 for s in self.class_scales):
            raise ValueError("class_scales must be positive")
        if len(self.affine_matrix) != dim or any(
            len(row) != dim for row in self.affine_matrix
        ):
            raise ValueError(f"affine_matrix must be {dim}x{dim}")
        if len(self.affine_shift) != dim:
            raise ValueError(f"affine_shift must have length {dim}")
        return self


class ShiftSpec(DataConfig):
    """A DataConfig bound to the seed that makes it reproducible."""

    seed: int = Field(ge=0)


class ScheduleConfig(_Section):
    steps: int = Field(default=200, ge=2)
    beta_start: float = Field(default=1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(default=0.05, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_range(self) -> "ScheduleConfig":
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class DenoiserConfig(_Section):
    hidden: List[int] = Field(default=[128, 128], min_length=1)
    time_dim: int = Field(default=32, ge=2)
    activation: Literal["tanh", "relu"] = Field(default="relu")

    @model_validator(mode="after")
    def check_shapes(self) -> "DenoiserConfig":
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even (sin/cos pairs)")
        return self


class CdpmConfig(_Section):
    """Denoiser training; these defaults are desk-scale choices."""

    steps: int = Field(default=4000, ge=0)
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    clip_norm: Optional[float] = Field(default=1.0, gt=0.0)
    average_window: int = Field(default=100, ge=1)
    patience: int = Field(default=500, ge=1)
    min_improvement: float = Field(default=0.001, ge=0.0)
    standardize: bool = Field(default=True)
    log_every: int = Field(default=500, ge=1)


class UdaConfig(_Section):
    transform_hidden: List[int] = Field(default=[32])
    feature_dim: int = Field(default=16, ge=1)
    head_hidden: List[int] = Field(default=[])
    discriminator_hidden: List[int] = Field(default=[32])
    activation: Literal["tanh", "relu"] = Field(default="tanh")
    regularizer: Literal["mmd", "adversarial"] = Field(default="mmd")
    trade_off: float = Field(default=1.0, ge=0.0)
    warmup: bool = Field(default=True)
    lr: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    steps: int = Field(default=1500, ge=0)
    batch_size: int = Field(default=64, ge=2)
    bandwidth_multipliers: List[float] = Field(default=[0.25, 0.5, 1.0, 2.0, 4.0])
    log_every: int = Field(default=250, ge=1)

    @model_validator(mode="after")
    def check_widths(self) -> "UdaConfig":
        widths = self.transform_hidden + self.head_hidden + self.discriminator_hidden
        if any(w < 1 for w in widths):
            raise ValueError("hidden widths must be positive")
        if not self.bandwidth_multipliers or any(
            m <= 0.0 for m in self.bandwidth_multipliers
        ):
            raise ValueError("bandwidth_multipliers must be non-empty and positive")
        return self


class SolverConfig(_Section):
    steps: int = Field(default=20, ge=2)
    model_form: Literal["data_prediction", "as_printed"] = Field(
        default="data_prediction"
    )


class DtsConfig(_Section):
    n_generated_per_class: int = Field(default=1000, ge=0)
    sampler: Literal["ancestral", "dpm_solver_pp"] = Field(default="dpm_solver_pp")
    retrain_mode: Literal["from_scratch", "finetune_pretrained"] = Field(
        default="finetune_pretrained"
    )
    ablation: Literal["full", "no_generation", "no_original_source"] = Field(
        default="full"
    )


class MetricsConfig(_Section):
    adist_steps: int = Field(default=500, ge=1)
    adist_lr: float = Field(default=0.1, gt=0.0)
    sw_projections: int = Field(default=50, ge=1)
    adist_space: Literal["features", "input"] = "features"


class SweepConfig(_Section):
    counts: List[int] = Field(default=[0, 10, 25, 50, 100], min_length=1)
    seeds: List[int] = Field(default=list(range(10)), min_length=1)

    @model_validator(mode="after")
    def check_values(self) -> "SweepConfig":
        if any(c < 0 for c in self.counts) or any(s < 0 for s in self.seeds):
            raise ValueError("sweep counts and seeds must be non-negative")
        return self


_file_values: ContextVar[Dict[str, Any]] = ContextVar("dtskit_file_values", default={})


class KeyValueFileSource(PydanticBaseSettingsSource):
    """Settings source serving values parsed from a dotted key-value file."""

    def __init__(self, settings_cls: Type[BaseSettings], values: Dict[str, Any]):
        super().__init__(settings_cls)
        self.values = values

    def get_field_value(
        self, field: FieldInfo, field_name: str
    ) -> Tuple[Any, str, bool]:
        return self.values.get(field_name), field_name, False

    def __call__(self) -> Dict[str, Any]:
        return dict(self.values)


class RunConfig(BaseSettings):
    """Every knob of one experiment. The seed is mandatory."""

    seed: int = Field(ge=0)
    data: DataConfig = Field(default_factory=DataConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    cdpm: CdpmConfig = Field(default_factory=CdpmConfig)
    uda: UdaConfig = Field(default_factory=UdaConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    dts: DtsConfig = Field(default_factory=DtsConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX,
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return (
            init_settings,
            env_settings,
            KeyValueFileSource(settings_cls, _file_values.get()),
        )

    def shift_spec(self, seed: Optional[int] = None) -> ShiftSpec:
        return ShiftSpec(
            seed=self.seed if seed is None else seed, **self.data.model_dump()
        )


def parse_value(raw: str) -> Any:
    """JSON literal when it parses as one, the bare string otherwise."""
    text = raw.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(target: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    if any(not p for p in parts):
        raise ConfigurationError(f"malformed config key {key!r}")
    node = target
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"config key {key!r} conflicts with a value")
        node = child
    node[parts[-1]] = value


def parse_config_text(text: str) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"config line {number}: expected key = value")
        key, raw = stripped.split("=", 1)
        set_dotted(values, key.strip(), parse_value(raw))
    return values


def read_config_file(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        raise MissingInputError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        message = f"config file {path} is not UTF-8: {exc.reason}"
        raise ConfigurationError(message) from exc
    return parse_config_text(text)


def parse_overrides(pairs: Sequence[str]) -> Dict[str, Any]:
    """Turn ["schedule.steps=100", ...] into a nested dict."""
    values: Dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        set_dotted(values, key.strip(), parse_value(raw))
    return values


def load_config(
    path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Resolve a RunConfig from file, environment and explicit overrides."""
    file_values = read_config_file(path) if path is not None else {}
    token = _file_values.set(file_values)
    try:
        return RunConfig(**dict(overrides or {}))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc
    finally:
        _file_values.reset(token)


def flatten(values: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def dump_config(cfg: RunConfig) -> str:
    """Key-value text that load_config parses back to an equal RunConfig."""
    flat = flatten(cfg.model_dump())
    lines = [f"{key} = {json.dumps(flat[key])}" for key in sorted(flat)]
    return "\n".join(lines) + "\n"
