"""JSON run configuration: sections `model`, `train`, `data`,
`retention`.

A document may name a preset at top level (`{"preset": "micro"}`) or
inside the model section (`{"model": {"preset": "micro", "top_k": 2}}`);
presets expand to full documents before validation, and section keys
override preset fields. Unknown keys anywhere are rejected. Parsing the
serialized form reproduces the config value-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .config import PRESET_NAMES, ModelConfig, preset
from .errors import ConfigError
from .retention import RetentionConfig
from .train import TrainConfig

TOP_KEYS = {"preset", "model", "train", "data", "retention"}


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    length: int = 8192
    seed: int = 0
    period: int = 97

    def validate(self) -> None:
        if self.kind != "synthetic":
            raise ConfigError(f"unknown data kind {self.kind!r}; only 'synthetic' is supported")
        if self.length < 4:
            raise ConfigError(f"data length must be >= 4, got {self.length}")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    retention: RetentionConfig = field(default_factory=RetentionConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "retention": self.retention.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def expand_document(doc: dict) -> dict:
    """Resolve preset references into a fully explicit document."""
    if not isinstance(doc, dict):
        raise ConfigError(f"run config must be a JSON object, got {type(doc).__name__}")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown run config sections: {sorted(unknown)}")
    doc = dict(doc)
    model_section = dict(doc.get("model", {}))
    preset_name = doc.pop("preset", None) or model_section.pop("preset", None)
    if preset_name is not None:
        if preset_name not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {preset_name!r}; expected one of {sorted(PRESET_NAMES)}")
        base = preset(preset_name).to_dict()
        overlap_unknown = set(model_section) - set(base)
        if overlap_unknown:
            raise ConfigError(f"unknown model config keys: {sorted(overlap_unknown)}")
        base.update(model_section)
        model_section = base
    if not model_section:
        raise ConfigError("run config needs a model section or a preset")
    doc["model"] = model_section
    return doc


def parse_runconfig(doc: dict | str) -> RunConfig:
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise ConfigError(f"run config is not valid JSON: {e}") from e
    doc = expand_document(doc)
    model = ModelConfig.from_dict(doc["model"])
    model.validate()
    train = TrainConfig.from_dict(doc.get("train", {}))
    data = DataConfig.from_dict(doc.get("data", {}))
    retention = RetentionConfig.from_dict(doc.get("retention", {}))
    return RunConfig(model=model, train=train, data=data, retention=retention)


def load_runconfig(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_runconfig(f.read())
