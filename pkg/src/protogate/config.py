"""Run configuration: one JSON document merging every knob, with dotted-key overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .dataset import DatasetError, SyntheticConfig
from .evaluation import GridSpec
from .inference import Thresholds
from .model import Hyperparams, ModelError
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "mode": "gzsl",
    "out": "run",
    "jobs": 1,
    "paths": {"manifest": None, "split": None, "checkpoint": None, "input": None, "predictions": None},
    "synthetic": asdict(SyntheticConfig()),
    "split": {"val_class_fraction": None, "holdout_fraction": 1 / 7, "test_fraction": 0.2},
    "attr_preprocess": "raw",
    "hyperparams": asdict(Hyperparams()),
    "train": {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
    "grid": {**asdict(GridSpec()), "objective": None},
    "thresholds": asdict(Thresholds()),
    "predict": {"semantic_for_all": False, "describe_unknown": True},
    "figures": True,
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_key(cfg: dict, dotted: str, raw_value: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as JSON, falling back to a plain string."""
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, overrides: dict | None = None, sets=()) -> "RunConfig":
        user = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"missing config file: {path}")
            try:
                with open(path, encoding="utf-8") as fh:
                    user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from None
            # provenance echo written by earlier commands is not configuration
            user.pop("result", None)
        cfg = _merge(DEFAULTS, user)
        for item in sets:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            set_key(cfg, k.strip(), v)
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg[k] = v
        rc = cls(cfg)
        rc.validate()
        return rc

    # typed views ---------------------------------------------------------

    def _build(self, kind, section: str, **extra):
        try:
            return kind(**self.raw[section], **extra)
        except TypeError as exc:
            raise ConfigError(f"[{section}] {exc}") from None
        except (ValueError, ModelError, DatasetError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    def synthetic(self) -> SyntheticConfig:
        sc = self._build(SyntheticConfig, "synthetic")
        try:
            sc.validate()
        except DatasetError as exc:
            raise ConfigError(f"[synthetic] {exc}") from None
        return sc

    def hyperparams(self) -> Hyperparams:
        return self._build(Hyperparams, "hyperparams")

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig, "train", seed=self.seed)

    def grid(self) -> GridSpec:
        g = dict(self.raw["grid"])
        g.pop("objective")
        try:
            return GridSpec(**g)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[grid] {exc}") from None

    def objective(self) -> str:
        obj = self.raw["grid"]["objective"]
        return obj or ("gzsl_h" if self.mode == "gzsl" else "gosr_h")

    def thresholds(self) -> Thresholds:
        t = {k: float(v) for k, v in self.raw["thresholds"].items()}
        try:
            return Thresholds(**t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[thresholds] {exc}") from None

    def path(self, key: str, default: str) -> Path:
        p = self.raw["paths"].get(key)
        return Path(p) if p else self.out / default

    def validate(self) -> None:
        if self.mode not in ("gzsl", "gosr"):
            raise ConfigError(f"mode must be 'gzsl' or 'gosr', got {self.mode!r}")
        if not isinstance(self.raw["seed"], int):
            raise ConfigError(f"seed must be an integer, got {self.raw['seed']!r}")
        if self.raw["attr_preprocess"] not in ("raw", "center", "l2", "standardize"):
            raise ConfigError(f"unknown attr_preprocess {self.raw['attr_preprocess']!r}")
        if self.raw["grid"]["objective"] not in (None, "gzsl_h", "gosr_h"):
            raise ConfigError(f"unknown grid objective {self.raw['grid']['objective']!r}")
        if int(self.raw["jobs"]) < 1:
            raise ConfigError("jobs must be >= 1")
        self.hyperparams()
        self.train_config()
        self.grid()
        self.thresholds()

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)
