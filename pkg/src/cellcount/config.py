"""Experiment configuration: YAML files, dotted-key overrides, typed views."""

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from cellcount.counter import CounterConfig
from cellcount.data.synth import SynthConfig
from cellcount.errors import ConfigError
from cellcount.localizer import LocalizerConfig

STAGES = ("counter", "localizer")


@dataclass(frozen=True)
class RunConfig:
    stage: str = "counter"
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    batch_size: int = 8
    epochs: int = 30
    # steps; None means 10 epochs' worth
    restart_period_T0: int | None = None
    restart_mult: float = 2.0
    seed: int = 0
    augmentation: bool = True
    clip_norm: float = 10.0
    sigma: float = 3.0
    data_root: str | None = None
    checkpoint_dir: str = "checkpoints"
    counter_ckpt: str | None = None
    teacher_forcing: bool = False
    finetune_counter: bool = False
    counter: CounterConfig = field(default_factory=CounterConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.restart_period_T0 is not None and self.restart_period_T0 < 1:
            raise ConfigError("restart_period_T0 must be >= 1")
        if self.restart_mult < 1:
            raise ConfigError("restart_mult must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        self.counter.validate()
        self.localizer.validate()
        return self

    def t0(self, steps_per_epoch):
        return self.restart_period_T0 or 10 * max(1, steps_per_epoch)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["counter"] = self.counter.to_dict()
        d["localizer"] = self.localizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            if "counter" in d:
                c = dict(d["counter"])
                if "widths" in c:
                    c["widths"] = tuple(c["widths"])
                d["counter"] = CounterConfig(**c)
            if "localizer" in d:
                d["localizer"] = LocalizerConfig(**d["localizer"])
            return cls(**d).validate()
        except TypeError as e:
            raise ConfigError(str(e)) from None


def _defaults(dc):
    return {f.name: (list(v) if isinstance(v := getattr(dc, f.name), tuple) else v)
            for f in fields(dc)}


def default_config():
    """Every recognised key with its default; config files may set any subset."""
    run = RunConfig()
    train = {k: v for k, v in run.to_dict().items()
             if k not in ("stage", "counter", "localizer", "sigma", "data_root",
                          "checkpoint_dir")}
    return {
        "seed": 0,
        "output_root": "runs",
        "data": {
            "root": None,
            "split_seed": 0,
            "sigma": run.sigma,
            "images_dir": "images",
            "annotations_dir": "annotations",
            "preprocess": "tile",
            "out_dir": None,
        },
        "synth": {**_defaults(SynthConfig()), "out_dir": None},
        "counter": _defaults(CounterConfig()),
        "localizer": _defaults(LocalizerConfig()),
        "train": train,
        "eval": {"counter_ckpt": None, "localizer_ckpt": None, "split": "test"},
        "ablate": {"seeds": [0, 1, 2], "heads": None},
        "viz": {"counter_ckpt": None, "localizer_ckpt": None, "sample_id": None,
                "split": "test", "limit": 4},
    }


def _merge(base, upd, prefix=""):
    for k, v in upd.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            _merge(base[k], v, key + ".")
        else:
            base[k] = v


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form dotted.key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    nested = value
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return nested


def resolve(path=None, overrides=()):
    """Defaults <- config file <- overrides, applied in that order."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping at top level")
        _merge(cfg, loaded)
    for o in overrides:
        _merge(cfg, parse_override(o))
    return cfg


def dump(cfg):
    """Canonical text form; byte-identical for equal configs."""
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def synth_config(cfg):
    s = {k: v for k, v in cfg["synth"].items() if k != "out_dir"}
    return SynthConfig.from_dict(s)


def run_config(cfg, stage):
    t = copy.deepcopy(cfg["train"])
    return RunConfig.from_dict({
        **t,
        "stage": stage,
        "sigma": cfg["data"]["sigma"],
        "data_root": cfg["data"]["root"],
        "counter": cfg["counter"],
        "localizer": cfg["localizer"],
    })
