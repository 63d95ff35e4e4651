"""
Run configuration: one object merging every section's settings.

Precedence is built-in defaults < JSON config file < command-line flags. All
randomness flows from the top-level seed; each component gets its own seed
derived by hashing, unless its section sets one explicitly.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, field_validator

from dataset import SynthConfig
from evaluation import EvaluationConfig
from model import ModelConfig
from postprocess import PostprocessConfig
from training import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "postprocess": PostprocessConfig,
    "evaluation": EvaluationConfig,
    "synth": SynthConfig,
}
SEED_COMPONENTS = ("model", "train", "synth", "split", "dropout")


def derive_seed(seed: int, component: str) -> int:
    """First 4 bytes (little-endian) of sha256("{seed}/{component}")."""
    digest = hashlib.sha256(f"{seed}/{component}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class RunConfig(BaseModel):
    """Merged model, training, postprocess, evaluation and synth settings."""
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    seed: int = 0
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    postprocess: PostprocessConfig = Field(default_factory=PostprocessConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @field_validator(*SECTIONS, mode="before")
    @classmethod
    def _build_section(cls, value, info):
        section = SECTIONS[info.field_name]
        if isinstance(value, section):
            return value
        if not isinstance(value, dict):
            raise ValueError(f"section '{info.field_name}' must be an object")
        known = set(section.__dataclass_fields__)
        unknown = sorted(set(value) - known)
        if unknown:
            raise ValueError(f"unknown {info.field_name} settings: {', '.join(unknown)}")
        return section(**value)

    def component_seed(self, component: str) -> int:
        """Seed for a component, preferring an explicit section seed."""
        if component not in SEED_COMPONENTS:
            raise ValueError(f"Unknown seed component {component!r}")
        section = getattr(self, component, None)
        explicit = getattr(section, "seed", None)
        if explicit is not None:
            return explicit
        return derive_seed(self.seed, component)

    def resolved(self) -> "RunConfig":
        """Copy with every section seed filled in, as echoed into output directories."""
        data = self.as_dict()
        for component in ("model", "train", "synth"):
            data[component]["seed"] = self.component_seed(component)
        return RunConfig.model_validate(data)

    def as_dict(self) -> dict[str, Any]:
        data = {"seed": self.seed}
        for name in SECTIONS:
            data[name] = asdict(getattr(self, name))
        return json.loads(json.dumps(data))

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


def _deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> tuple[str, Any]:
    """
    Parse "section.field=value". The value is read as JSON when it parses,
    otherwise kept as a string.
    """
    if "=" not in text:
        raise ValueError(f"Override {text!r} must look like section.field=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _apply_override(data: dict[str, Any], key: str, value: Any):
    parts = key.split(".")
    if len(parts) == 1:
        if parts[0] in SECTIONS:
            raise ValueError(f"Override {key!r} names a whole section; use section.field")
        data[parts[0]] = value
        return
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ValueError(f"Override {key!r}: expected one of {', '.join(SECTIONS)} followed by .field")
    data.setdefault(parts[0], {})[parts[1]] = value


def load_run_config(
    path: str | Path | None = None,
    overrides: dict[str, Any] | list[str] | None = None,
) -> RunConfig:
    """
    Build a RunConfig from defaults, an optional JSON file, then overrides.

    Overrides are a {"section.field": value} mapping or a list of
    "section.field=value" strings; unset (None) mapping values are skipped.

    Raises:
        ValueError: on unreadable files, unknown sections/fields or invalid values.
    """
    data = RunConfig().as_dict()
    if path is not None:
        path = Path(path)
        try:
            file_data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"Cannot read config file {path}: {e}") from None
        if not isinstance(file_data, dict):
            raise ValueError(f"Config file {path} must hold a JSON object")
        data = _deep_merge(data, file_data)
        logger.info(f"Loaded config file {path}")

    if isinstance(overrides, list):
        overrides = dict(parse_override(item) for item in overrides)
    for key, value in (overrides or {}).items():
        if value is not None:
            _apply_override(data, key, value)

    return RunConfig.model_validate(data)


def write_resolved(directory: str | Path, name: str, config: RunConfig) -> Path:
    """Echo the resolved config into an output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    tmp_path = path.with_name(name + ".tmp")
    tmp_path.write_text(config.resolved().to_json(), encoding="utf-8")
    os.replace(tmp_path, path)
    return path
