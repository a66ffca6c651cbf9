"""Run configuration: dataclasses plus an INI reader (one section per module)."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .errors import ConfigError
from .models import TrainConfig
from .scoring import BASE_METHODS, Method, parse_method

DESK_TRAIN = dict(epochs=10, steps_per_epoch=100, batch_size=128, width_factor=0.25)
DESK_GROUPS = 10


def default_methods(ensemble_size: int = 10) -> tuple[str, ...]:
    extra = () if ensemble_size <= 1 else (f"PEPR-{ensemble_size}", f"CPEPR-{ensemble_size}")
    return BASE_METHODS + extra


@dataclass
class FileSource:
    train: str
    val: str | None = None
    test_in: str | None = None
    ood: tuple[str, ...] = ()
    format: str | None = None


@dataclass
class RunConfig:
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    files: FileSource | None = None
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN, n_groups=DESK_GROUPS))
    methods: tuple[str, ...] = field(default_factory=default_methods)
    ensemble_size: int = 10
    seeds: tuple[int, ...] = tuple(range(10))
    psi: float = 0.01
    augmentations: int = 1
    sigma_aug: float | None = None  # None: 0.05 x within-cluster sigma (synthetic) or mean feature std
    cache_seed: int = 0
    hist_bins: int = 100
    out: str = "runs/desk"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.methods = tuple(self.methods)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        parsed = [parse_method(m) for m in self.methods]
        names = [m.name for m in parsed]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate methods in {self.methods}")
        self.methods = tuple(names)
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be at least 1")
        if (self.synthetic is None) == (self.files is None):
            raise ConfigError("choose exactly one data source: synthetic or files")
        if self.hist_bins < 1:
            raise ConfigError("hist_bins must be positive")

    @property
    def parsed_methods(self) -> list[Method]:
        return [parse_method(m) for m in self.methods]

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- INI parsing


def _coerce(value: str, default, key: str):
    text = value.strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
        if default is None:
            if text.lower() in ("", "none"):
                return None
            for cast in (int, float):
                try:
                    return cast(text)
                except ValueError:
                    pass
            return text
        return text
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None


def _apply(obj, section: configparser.SectionProxy, name: str, aliases: dict | None = None):
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in section.items():
        attr = (aliases or {}).get(key, key.replace("-", "_"))
        if attr not in names:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        changes[attr] = _coerce(value, getattr(obj, attr), f"[{name}] {key}")
    return dataclasses.replace(obj, **changes)


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0,1,2"`` or ``"0-9"`` (inclusive range) or a mix of both; seeds are non-negative."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seeds from {text!r}") from None
    return tuple(seeds)


def load_config(path=None, **overrides) -> RunConfig:
    """Read an INI file (sections: run, data, cache, train) and apply overrides."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            read = parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not read:
            raise ConfigError(f"config file {path} not found")
        unknown = set(parser.sections()) - {"run", "data", "cache", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        run = {}
        if parser.has_section("run"):
            sec = parser["run"]
            for key, value in sec.items():
                if key == "seeds":
                    run["seeds"] = parse_seeds(value)
                elif key == "methods":
                    run["methods"] = tuple(m.strip() for m in value.split(",") if m.strip())
                elif key in ("ensemble_size", "hist_bins"):
                    run[key] = _coerce(value, 0, f"[run] {key}")
                elif key == "psi":
                    run[key] = _coerce(value, 0.0, "[run] psi")
                elif key == "out":
                    run[key] = value.strip()
                else:
                    raise ConfigError(f"unknown key {key!r} in [run]")
        if parser.has_section("cache"):
            sec = parser["cache"]
            for key, value in sec.items():
                if key == "augmentations":
                    run[key] = _coerce(value, 0, "[cache] augmentations")
                elif key == "sigma_aug":
                    run[key] = _coerce(value, None, "[cache] sigma_aug")
                elif key in ("seed", "cache_seed"):
                    run["cache_seed"] = _coerce(value, 0, "[cache] seed")
                else:
                    raise ConfigError(f"unknown key {key!r} in [cache]")
        if parser.has_section("data"):
            sec = dict(parser["data"])
            source = sec.pop("source", "synthetic").strip()
            if source == "synthetic":
                proxy = configparser.ConfigParser()
                proxy.read_dict({"data": sec})
                run["synthetic"] = _apply(SyntheticSpec(), proxy["data"], "data")
                run["files"] = None
            elif source == "files":
                if "train" not in sec:
                    raise ConfigError("[data] source = files needs a 'train' path")
                run["files"] = FileSource(
                    train=sec.pop("train"), val=sec.pop("val", None),
                    test_in=sec.pop("test_in", None),
                    ood=tuple(p.strip() for p in sec.pop("ood", "").split(",") if p.strip()),
                    format=sec.pop("format", None))
                if sec:
                    raise ConfigError(f"unknown keys {sorted(sec)} in [data]")
                run["synthetic"] = None
            else:
                raise ConfigError(f"[data] source must be 'synthetic' or 'files', got {source!r}")
        train = cfg.train
        if parser.has_section("train"):
            train = _apply(train, parser["train"], "train")
        if "ensemble_size" in run and "methods" not in run:
            run["methods"] = default_methods(run["ensemble_size"])
        cfg = dataclasses.replace(cfg, train=train, **run)
    return apply_overrides(cfg, **overrides)


def apply_overrides(cfg: RunConfig, seeds=None, methods=None, out=None, ensemble_size=None,
                    scale_factor=None) -> RunConfig:
    changes = {}
    if ensemble_size is not None:
        changes["ensemble_size"] = ensemble_size
        if methods is None:
            changes["methods"] = default_methods(ensemble_size)
    if seeds is not None:
        changes["seeds"] = tuple(seeds)
    if methods is not None:
        changes["methods"] = tuple(methods)
    if out is not None:
        changes["out"] = str(out)
    if scale_factor is not None:
        changes["train"] = cfg.train.replace(width_factor=scale_factor)
    return dataclasses.replace(cfg, **changes) if changes else cfg
