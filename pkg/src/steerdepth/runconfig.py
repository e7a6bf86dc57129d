"""Run configuration: a JSON document validated against ``SCHEMA``.

Values resolve in three layers (defaults, then the ``--config`` file, then
command-line flags) and every run writes the merged result to
``run_config.json`` in its output directory so it can be replayed exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .scenegen import SceneConfig
from .stereonet import ModelConfig

COMMANDS = ("generate", "train", "eval", "sweep", "gradcheck")
SNAPSHOT_NAME = "run_config.json"


class ConfigError(ValueError):
    pass


_SCENE_KEYS = {k: {"type": "number"} for k in SceneConfig().to_dict()}
_MODEL_KEYS = {k: {"type": ["number", "boolean"]} for k in ModelConfig().to_dict()}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "steerdepth run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "seed": {"type": "integer", "minimum": 0},
        "scene": {"type": "object", "properties": _SCENE_KEYS, "additionalProperties": False},
        "model": {"type": "object", "properties": _MODEL_KEYS, "additionalProperties": False},
        "dataset": {"type": ["string", "null"]},
        "checkpoint": {"type": ["string", "null"]},
        "out": {"type": ["string", "null"]},
        "n_samples": {"type": "integer", "minimum": 1},
        "split": {"enum": ["train", "val", "test"]},
        "steps": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "minimum": 0},
        "lr_final_ratio": {"type": "number", "minimum": 0, "maximum": 1},
        "checkpoint_every": {"type": "integer", "minimum": 1},
        "use_cmoe": {"type": ["boolean", "null"]},
        "use_dci": {"type": ["boolean", "null"]},
        "use_seg_head": {"type": ["boolean", "null"]},
        "use_masking": {"type": "boolean"},
        "rho": {"type": "number", "minimum": 0, "maximum": 1},
        "lambda_seg": {"type": "number", "minimum": 0},
        "c_values": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 1},
        "c_list": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 1},
        "c_grid_points": {"type": "integer", "minimum": 2},
        "sweep_samples": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "oracle": {"type": "boolean"},
        "force": {"type": "boolean"},
        "gradcheck_trials": {"type": "integer", "minimum": 1},
        "require_properties": {"type": "boolean"},
    },
}


@dataclass
class RunConfig:
    command: str = "train"
    seed: int = 0
    scene: dict[str, Any] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=dict)
    dataset: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    n_samples: int = 200
    split: str = "train"
    steps: int = 20000
    batch_size: int = 1
    lr: float = 1e-3
    lr_final_ratio: float = 0.05
    checkpoint_every: int = 1000
    use_cmoe: bool | None = None
    use_dci: bool | None = None
    use_seg_head: bool | None = None
    use_masking: bool = True
    rho: float = 0.5
    lambda_seg: float = 0.2
    c_values: list[float] = field(default_factory=lambda: [0.0, 1.0])
    c_list: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0])
    c_grid_points: int = 11
    sweep_samples: int = 4
    workers: int = 1
    oracle: bool = False
    force: bool = False
    gradcheck_trials: int = 100
    require_properties: bool = False

    @classmethod
    def resolve(cls, file_values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        merged = cls().to_dict()
        for layer in (file_values or {}, overrides or {}):
            for key, value in layer.items():
                if key in ("scene", "model") and isinstance(value, dict):
                    merged[key] = {**merged.get(key, {}), **value}
                else:
                    merged[key] = copy.deepcopy(value)
        try:
            jsonschema.validate(merged, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"run config {where}: {exc.message}") from None
        cfg = cls(**merged)
        cfg.scene_config()
        cfg.model_config()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        values = None
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            try:
                values = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: invalid JSON ({exc})") from None
            if not isinstance(values, dict):
                raise ConfigError(f"{p}: top level must be an object")
        return cls.resolve(values, overrides)

    def to_dict(self) -> dict[str, Any]:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def scene_config(self) -> SceneConfig:
        cfg = SceneConfig.from_dict({**self.scene})
        if "seed" not in self.scene:
            cfg.seed = self.seed
        return cfg.validate()

    def model_config(self) -> ModelConfig:
        values = {"seed": self.seed, **self.model}
        for toggle in ("use_cmoe", "use_dci", "use_seg_head"):
            if getattr(self, toggle) is not None:
                values[toggle] = getattr(self, toggle)
        if "d_max" not in values and "d_max" in self.scene:
            values["d_max"] = int(self.scene["d_max"])
        return ModelConfig.from_dict(values)

    def digest(self) -> str:
        doc = {k: v for k, v in self.to_dict().items() if k not in ("force", "workers")}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def snapshot(self, directory: str | Path) -> Path:
        path = Path(directory) / SNAPSHOT_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path
