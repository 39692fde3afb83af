"""Run configuration: flat dotted-key files, schema validation, overrides.

File syntax: one ``key = value`` per line, ``#`` comments. Flags given
on the command line override file values; defaults marked mode-dependent
resolve after the mode is known (image vs video).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .model import ModelConfig, StageSpec, default_stages

MODES = ("image", "video")

# key -> (type, default); None defaults resolve per mode
SCHEMA: dict = {
    "seed": (int, 0),
    "mode": (str, "video"),
    "data.train_ids": (int, 0),          # 0: train and evaluate on all identities
    "model.parts": (int, 4),
    "model.frames": (int, None),         # image: 1, video: 4
    "model.embedding_dim": (int, 64),
    "model.part_mode": (str, "attention"),
    "model.arrangement": (str, "ciau_stiau"),
    "model.block_kind": (str, "iau"),
    "model.relations": (str, "full"),
    "model.shared_projector": (bool, True),
    "model.include_self": (bool, True),
    "train.lr": (float, None),           # image: 0.00035, video: 0.0003
    "train.margin": (float, 0.3),
    "train.lambda1": (float, 1.0),
    "train.lambda2": (float, 0.5),
    "train.epochs": (int, 200),
    "train.decay": (float, 0.1),
    "train.decay_every": (int, None),    # image: 20, video: 40
    "train.batch.classes": (int, 4),
    "train.batch.per_class": (int, 4),
    "train.stride": (int, 8),
}
_STAGE_KEY = re.compile(r"^model\.stages\[(\d+)\]\.(channels|downsample|blocks|iau)$")
_STAGE_TYPES = {"channels": int, "downsample": int, "blocks": int, "iau": bool}

MODE_DEFAULTS = {
    "image": {"model.frames": 1, "train.lr": 0.00035, "train.decay_every": 20},
    "video": {"model.frames": 4, "train.lr": 0.0003, "train.decay_every": 40},
}


def _parse_value(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {typ.__name__}")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse and validate a dotted-key config; unknown keys are errors."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        if key in SCHEMA:
            values[key] = _parse_value(key, raw, SCHEMA[key][0])
            continue
        m = _STAGE_KEY.match(key)
        if m:
            values[key] = _parse_value(key, raw, _STAGE_TYPES[m.group(2)])
            continue
        raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
    return values


def apply_overrides(values: dict, overrides) -> dict:
    """Apply ``key=value`` strings (e.g. from repeated --set flags)."""
    out = dict(values)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        if key in SCHEMA:
            out[key] = _parse_value(key, raw, SCHEMA[key][0])
        elif _STAGE_KEY.match(key):
            out[key] = _parse_value(key, raw, _STAGE_TYPES[_STAGE_KEY.match(key).group(2)])
        else:
            raise ConfigurationError(f"--set: unknown key {key!r}")
    return out


@dataclass
class RunConfig:
    """Fully resolved configuration for one command invocation."""
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def mode(self) -> str:
        return self.values["mode"]

    def stages(self) -> list:
        """Stage specs from explicit keys, else mode defaults."""
        explicit = {k: v for k, v in self.values.items() if _STAGE_KEY.match(k)}
        if not explicit:
            return default_stages(self.mode)
        indices = sorted({int(_STAGE_KEY.match(k).group(1)) for k in explicit})
        if indices != list(range(len(indices))):
            raise ConfigurationError(f"stage indices must be dense from 0: {indices}")
        stages = []
        for i in indices:
            def get(fieldname, default):
                return explicit.get(f"model.stages[{i}].{fieldname}", default)
            stages.append(StageSpec(
                channels=get("channels", None),
                downsample=get("downsample", 1),
                blocks=get("blocks", 2),
                iau=get("iau", False)))
            if stages[-1].channels is None:
                raise ConfigurationError(f"model.stages[{i}].channels is required")
        return stages

    def model_config(self, num_ids: int) -> ModelConfig:
        v = self.values
        cfg = ModelConfig(
            stages=self.stages(),
            parts=v["model.parts"],
            frames=v["model.frames"],
            embedding_dim=v["model.embedding_dim"],
            num_ids=num_ids,
            part_mode=v["model.part_mode"],
            arrangement=v["model.arrangement"],
            block_kind=v["model.block_kind"],
            relations=v["model.relations"],
            shared_projector=v["model.shared_projector"],
            include_self=v["model.include_self"])
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        return "\n".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}"
                         for k, v in sorted(self.values.items())) + "\n"


def resolve(config_path=None, overrides=None, mode=None, seed=None) -> RunConfig:
    """Defaults <- file <- --set overrides <- dedicated flags, then
    mode-dependent fills. Every key is validated before any work starts."""
    values = {k: d for k, (_, d) in SCHEMA.items()}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    values = apply_overrides(values, overrides)
    if mode is not None:
        values["mode"] = mode
    if seed is not None:
        values["seed"] = seed
    if values["mode"] not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {values['mode']!r}")
    for key, default in MODE_DEFAULTS[values["mode"]].items():
        if values.get(key) is None:
            values[key] = default
    if values["mode"] == "image":
        values["model.frames"] = 1
    for key, (typ, _) in SCHEMA.items():
        if values[key] is None:
            raise ConfigurationError(f"{key} unresolved")
        if not isinstance(values[key], typ):
            raise ConfigurationError(f"{key}: expected {typ.__name__}")
    cfg = RunConfig(values)
    cfg.stages()
    return cfg
