"""Layered run configuration.

Precedence (lowest to highest): built-in defaults, a JSON config file,
``--set section.key=value`` command-line overrides, then environment
variables named ``CROSSFUSION_<SECTION>__<KEY>``. Unknown sections or
keys are rejected. The configuration fingerprint is a SHA-256 over the
canonical (sorted-keys) JSON form, so it is stable under key reordering;
it is embedded in every artifact this package writes.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .assignment import CostWeights
from .backbone import VoxelGridConfig
from .fusion import ModelConfig
from .scene_synth import SynthConfig
from .trainer import TrainConfig

ENV_PREFIX = "CROSSFUSION_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    voxel: VoxelGridConfig = field(default_factory=VoxelGridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cost: CostWeights = field(default_factory=CostWeights)

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "voxel": self.voxel.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "cost": {"cls": self.cost.cls, "reg": self.cost.reg, "iou": self.cost.iou},
        }

    def fingerprint(self) -> str:
        return fingerprint_of(self.to_dict())

    def section_fingerprint(self, *sections: str) -> str:
        d = self.to_dict()
        return fingerprint_of({s: d[s] for s in sections})


def fingerprint_of(obj) -> str:
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _deep_update(base: dict, upd: dict, path: str = ""):
    for k, v in upd.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _deep_update(base[k], v, path + k + ".")
        else:
            base[k] = v


def _env_overrides(environ) -> dict:
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        body = name[len(ENV_PREFIX) :]
        if "__" not in body:
            raise ConfigError(f"bad override variable {name!r}: expected SECTION__KEY")
        section, key = body.split("__", 1)
        out.setdefault(section.lower(), {})[key.lower()] = _parse_value(raw)
    return out


def load_run_config(
    config_file: str | None = None,
    overrides: list | None = None,
    environ=None,
) -> RunConfig:
    """Build a RunConfig from defaults, a JSON file, ``section.key=value``
    overrides, and environment variables (in that order of precedence)."""
    base = RunConfig().to_dict()

    if config_file:
        try:
            doc = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {config_file}: {e}")
        if not isinstance(doc, dict):
            raise ConfigError("config file must contain a JSON object")
        _deep_update(base, doc)

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"bad --set override {item!r}: expected section.key=value")
        dotted, value = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"bad --set override {item!r}: expected section.key=value")
        _deep_update(base, {parts[0]: {parts[1]: _parse_value(value)}})

    env = _env_overrides(environ if environ is not None else os.environ)
    _deep_update(base, env)

    try:
        return RunConfig(
            synth=SynthConfig.from_dict(base["synth"]),
            voxel=VoxelGridConfig.from_dict(base["voxel"]),
            model=ModelConfig.from_dict(base["model"]),
            train=TrainConfig.from_dict(base["train"]),
            cost=CostWeights(**base["cost"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))
