from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


def _env_str(name: str, default: str) -> str:
    value = os.environ.get(name)
    return value.strip() if value and value.strip() else default


def _env_int(name: str, default: int) -> int:
    try:
        return int(os.environ.get(name, str(default)))
    except ValueError:
        return default


LOG_LEVEL = _env_str("STACKNMN_LOG_LEVEL", "INFO").upper()
DEFAULT_OUT_DIR = _env_str("STACKNMN_OUT_DIR", "runs")
DEFAULT_SEED = _env_int("STACKNMN_SEED", 0)

TaskMix = Literal["vqa", "ref", "both"]
ExecMode = Literal["soft", "discretized"]


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Frozen):
    """Network sizes and execution knobs.

    Defaults are sized for the 5x5 grid world.  ``stack_depth`` left unset
    means ``steps + 1``, the smallest depth at which no well-formed layout of
    ``steps`` modules can push past the top row.  ``sharpen_temperature``
    divides the mixed pointer before its softmax; at 1.0 a one-hot pointer
    over seven rows keeps only about 0.31 of its mass.
    """

    hidden: int = Field(64, ge=2)
    embed_dim: Optional[int] = Field(None, ge=1)
    steps: int = Field(6, ge=1)
    stack_depth: Optional[int] = Field(None, ge=2)
    feature_dim: int = Field(11, ge=1)
    conv_kernel: int = Field(1, ge=1)
    forget_bias: float = 1.0
    sharpen_temperature: float = Field(0.2, gt=0.0)
    strict_bounds: bool = False
    cell_size: float = Field(32.0, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.hidden % 2:
            raise ValueError("hidden must be even (split across the two LSTM directions)")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.stack_depth is not None and self.stack_depth < self.steps + 1:
            raise ValueError(f"stack_depth ({self.stack_depth}) must be >= steps + 1 ({self.steps + 1})")
        return self

    @property
    def depth(self) -> int:
        return self.stack_depth if self.stack_depth is not None else self.steps + 1

    @property
    def embedding_size(self) -> int:
        return self.embed_dim if self.embed_dim is not None else self.hidden


class DataConfig(_Frozen):
    grid: int = Field(5, ge=1)
    min_objects: int = Field(3, ge=0)
    max_objects: int = Field(8, ge=0)
    train_size: int = Field(2000, ge=0)
    val_size: int = Field(500, ge=0)
    test_size: int = Field(500, ge=0)
    cell_size: float = Field(32.0, gt=0.0)
    majority_cap: float = Field(0.6, gt=0.0, le=1.0)
    max_attempts: int = Field(200, ge=1)
    seed: int = DEFAULT_SEED

    @model_validator(mode="after")
    def _check(self) -> "DataConfig":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must be <= max_objects")
        if self.max_objects > self.grid * self.grid:
            raise ValueError("max_objects cannot exceed grid * grid cells")
        return self


class TrainConfig(_Frozen):
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    layout_supervision: bool = False
    layout_loss_weight: float = Field(1.0, ge=0.0)
    bbox_loss_weight: float = Field(0.1, ge=0.0)
    grad_clip: float = Field(10.0, gt=0.0)
    task_mix: TaskMix = "both"
    eval_mode: ExecMode = "soft"
    probe_size: int = Field(256, ge=1)
    seed: int = DEFAULT_SEED


class ExecutionConfig(_Frozen):
    """Per-call execution settings derived from :class:`ModelConfig`.

    ``sharpen`` left unset follows the mode: soft execution sharpens the
    stack pointer after every step, discretized execution does not.
    """

    steps: int = Field(6, ge=1)
    stack_depth: int = Field(7, ge=2)
    mode: ExecMode = "soft"
    task: TaskMix = "both"
    sharpen: Optional[bool] = None
    sharpen_temperature: float = Field(1.0, gt=0.0)
    strict_bounds: bool = False
    conv_kernel: int = 1
    cell_size: float = 32.0

    @model_validator(mode="after")
    def _check(self) -> "ExecutionConfig":
        if self.stack_depth < self.steps + 1:
            raise ValueError(f"stack_depth ({self.stack_depth}) must be >= steps + 1 ({self.steps + 1})")
        return self

    @property
    def sharpens(self) -> bool:
        return self.mode == "soft" if self.sharpen is None else self.sharpen

    @classmethod
    def from_model(cls, model: ModelConfig, **overrides: Any) -> "ExecutionConfig":
        values: Dict[str, Any] = {
            "steps": model.steps,
            "stack_depth": model.depth,
            "sharpen_temperature": model.sharpen_temperature,
            "strict_bounds": model.strict_bounds,
            "conv_kernel": model.conv_kernel,
            "cell_size": model.cell_size,
        }
        values.update(overrides)
        return cls(**values)


class RunConfig(_Frozen):
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


_SECTIONS: Tuple[str, ...] = ("model", "data", "train")
_SECTION_MODELS = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig}


def _resolve_key(key: str) -> Tuple[str, str]:
    """Map a dotted or bare key onto ``(section, field)``."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        return section, name
    owners = [s for s in _SECTIONS if key in _SECTION_MODELS[s].model_fields]
    if not owners:
        raise ConfigError(f"unknown config key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"ambiguous config key {key!r}; use one of {', '.join(f'{s}.{key}' for s in owners)}")
    return owners[0], key


def parse_config_text(text: str, *, source: str = "<config>") -> Dict[str, Dict[str, str]]:
    """Parse flat ``key = value`` lines (``#`` starts a comment)."""
    sections: Dict[str, Dict[str, str]] = {s: {} for s in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        section, name = _resolve_key(key)
        sections[section][name] = value
    return sections


def build_run_config(
    file_values: Optional[Mapping[str, Mapping[str, Any]]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge defaults, config-file values and CLI overrides; validate once.

    ``overrides`` uses the same dotted/bare keys as the config file and wins
    over it.  Validation failures surface as :class:`ConfigError`.
    """
    merged: Dict[str, Dict[str, Any]] = {s: {} for s in _SECTIONS}
    for section, values in (file_values or {}).items():
        merged[section].update(values)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, name = _resolve_key(key)
        merged[section][name] = value
    try:
        return RunConfig(**{s: v for s, v in merged.items() if v})
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        raise ConfigError(f"invalid config {where}: {first.get('msg')}") from exc


def load_run_config(path: Optional[Path], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    file_values = None
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"{path}: invalid UTF-8 at byte {exc.start}") from exc
        file_values = parse_config_text(text, source=str(path))
    return build_run_config(file_values, overrides)


def dump_config_text(config: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        for name, value in getattr(config, section).model_dump().items():
            if value is None:
                continue
            rendered = str(value).lower() if isinstance(value, bool) else str(value)
            lines.append(f"{section}.{name} = {rendered}")
    return "\n".join(lines) + "\n"
