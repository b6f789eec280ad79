"""Run configuration: one JSON file driving every CLI command.

Precedence is flag > file > dataclass default. The exact config used is
serialized into the output directory for provenance.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .evolve import EvolveConfig, TrainConfig
from .losses import LossConfig
from .nets import NetConfig
from .scenes import SceneConfig


def _from_dict(cls, raw: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = dict(raw)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


@dataclass
class RunConfig:
    dataset_root: str = "dataset"
    output_dir: str = "out"
    hierarchy_spec: str = ""  # empty: the desk-scale reference taxonomy
    seed: int = 0
    num_samples: int = 60
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    scene: SceneConfig = field(default_factory=SceneConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evolve: EvolveConfig = field(default_factory=EvolveConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_dict(cls, raw: dict, seed_override: int | None = None) -> "RunConfig":
        raw = dict(raw)
        sub_classes = {
            "scene": SceneConfig, "net": NetConfig, "train": TrainConfig,
            "evolve": EvolveConfig, "loss": LossConfig,
        }
        sub_raw = {name: dict(raw.pop(name, {})) for name in sub_classes}
        global_seed = seed_override if seed_override is not None else raw.get("seed", 0)
        raw["seed"] = global_seed
        # the global seed flows into sub-configs unless they pin their own
        for name in ("scene", "train"):
            if seed_override is not None or "seed" not in sub_raw[name]:
                sub_raw[name]["seed"] = global_seed
        parts = {name: _from_dict(sub_cls, sub_raw[name]) for name, sub_cls in sub_classes.items()}
        return _from_dict(cls, {**raw, **parts})

    @classmethod
    def load(cls, path, seed_override: int | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no config file at {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(raw, seed_override=seed_override)
