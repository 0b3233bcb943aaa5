"""Run configuration: every knob of a training/synthesis run in one
serializable tree, with field-level validation errors."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .agent import Toggles, TrainConfig
from .env import EnvConfig
from .search import SearchConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    hidden: tuple[int, ...] = (512, 256, 128)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")


SECTIONS = {"env": EnvConfig, "train": TrainConfig, "net": NetConfig, "search": SearchConfig}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    workers: int | None = None
    kinds: list[str] | None = None
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    search: SearchConfig = field(default_factory=SearchConfig)

    def resolved_workers(self) -> int:
        return self.workers if self.workers else (os.cpu_count() or 1)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, workers=self.resolved_workers())

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "output_dir": self.output_dir, "workers": self.workers, "kinds": self.kinds}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            for k, v in d.items():
                if isinstance(v, tuple):
                    d[k] = list(v)
            out[name] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        top = {f.name for f in fields(cls)}
        for key in data:
            if key not in top:
                raise ConfigError(f"unknown field {key!r}")
        kw = {}
        for key in ("seed", "output_dir", "workers", "kinds"):
            if key in data:
                kw[key] = data[key]
        if "seed" in kw and (not isinstance(kw["seed"], int) or isinstance(kw["seed"], bool)):
            raise ConfigError("seed: must be an integer")
        if kw.get("workers") is not None and (not isinstance(kw["workers"], int) or kw["workers"] < 1):
            raise ConfigError("workers: must be a positive integer or null")
        if kw.get("kinds") is not None:
            from .gates import GateKind

            try:
                kw["kinds"] = [GateKind(k).value for k in kw["kinds"]]
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"kinds: {exc}") from None
        for name, klass in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{name}: must be an object")
            names = {f.name for f in fields(klass)}
            for key in section:
                if key not in names:
                    raise ConfigError(f"unknown field {name}.{key}")
            section = dict(section)
            if name == "train" and isinstance(section.get("toggles"), (dict, str)):
                try:
                    t = section["toggles"]
                    section["toggles"] = Toggles.parse(t) if isinstance(t, str) else Toggles(**t)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"train.toggles: {exc}") from None
            try:
                kw[name] = klass(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def apply_override(data: dict, dotted: str, raw: str) -> None:
    """Set ``a.b=value`` in a config dict; the value is parsed as JSON when possible."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out
