"""Run configuration: a strict JSON schema over the model/train/sampler/data dataclasses."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .datasets import DatasetSpec
from .network import ModelConfig
from .sampling import SamplerConfig
from .training import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sampler": SamplerConfig, "data": DatasetSpec}
TOP_LEVEL = set(SECTIONS) | {"seed", "out_dir"}


class ConfigError(ValueError):
    """Invalid run configuration; ``where`` names the offending field or byte offset."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    seed: int = 0
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "sampler": self.sampler.to_dict(),
            "data": self.data.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("top level must be a JSON object")
        unknown = set(d) - TOP_LEVEL
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)}", "<root>")
        kw: dict[str, Any] = {}
        for name, typ in SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError("section must be an object", name)
            fields = {f.name for f in dataclasses.fields(typ)}
            bad = set(sec) - fields
            if bad:
                raise ConfigError(f"unknown key(s) {sorted(bad)}; allowed: {sorted(fields)}", name)
            try:
                kw[name] = typ(**sec)
            except (TypeError, ValueError) as e:
                raise ConfigError(str(e), name) from e
        if "seed" in d:
            if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
                raise ConfigError("must be an integer", "seed")
            kw["seed"] = d["seed"]
        if "out_dir" in d:
            kw["out_dir"] = str(d["out_dir"])
        return cls(**kw)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        d = self.to_dict()
        for item in overrides:
            apply_override(d, item)
        return RunConfig.from_dict(d)


def parse_json(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise ConfigError(f"malformed JSON ({e.msg}) at byte offset {offset}", f"line {e.lineno}") from e


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return RunConfig.from_dict(parse_json(text))


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(d: dict, item: str) -> None:
    """Apply ``section.key=value`` (value parsed as JSON when possible) to a config dict."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in TOP_LEVEL:
        raise ConfigError(f"unknown key {key!r}", key)
    if len(parts) == 1:
        d[parts[0]] = _parse_value(raw)
        return
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"cannot override {key!r}", key)
    d.setdefault(parts[0], {})[parts[1]] = _parse_value(raw)
