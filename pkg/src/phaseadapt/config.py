"""Run configuration: dataclasses, INI file parsing, and overrides.

A config file is sectioned key/value text (configparser syntax). Every key
must match a dataclass field of its section; unknown sections or keys fail
with the list of valid names. ``--set section.key=value`` overrides win over
the file, which wins over defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .cpn import CpnTrainCfg
from .losses import LossWeights
from .models import CpnCfg, DiscriminatorCfg, SegCfg, TranslatorCfg
from .synthdata import DatasetCfg, ShiftCfg


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    seeds: tuple = (0, 1, 2)      # ablation harness seeds
    out_dir: str = "runs/default"


@dataclass
class TranslatorTrainCfg:
    width: int = 8
    n_res: int = 2
    disc_width: int = 16
    steps: int = 2000
    lr: float = 2e-4
    lr_decay_every: int = 30000
    checkpoint_every: int = 1000


@dataclass
class SegTrainCfg:
    width: int = 12
    steps: int = 2000
    lr: float = 1e-4
    lr_decay_every: int = 30000


@dataclass
class SelfTrainCfg:
    threshold: float = 0.9
    steps: int = 800

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0) and self.threshold != 1.0:
            # threshold 1.0 is a legal boundary: every pixel gets ignored
            raise ConfigError(f"threshold must lie in (0, 1], got {self.threshold}")


@dataclass
class RefNetCfg:
    width: int = 12
    steps: int = 1200
    lr: float = 5e-4


@dataclass
class CpnSection:
    width_mult: float = 0.25
    bottleneck_channels: int = 4
    seg_branch_width: int = 8
    steps: int = 600
    batch_size: int = 4
    lr: float = 1e-4
    lr_decay_every: int = 30000


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DatasetCfg = field(default_factory=DatasetCfg)
    shift: ShiftCfg = field(default_factory=ShiftCfg)
    loss: LossWeights = field(default_factory=LossWeights)
    gan_variant: str = "least-squares"
    translator: TranslatorTrainCfg = field(default_factory=TranslatorTrainCfg)
    segnet: SegTrainCfg = field(default_factory=SegTrainCfg)
    cpn: CpnSection = field(default_factory=CpnSection)
    selftrain: SelfTrainCfg = field(default_factory=SelfTrainCfg)
    refnet: RefNetCfg = field(default_factory=RefNetCfg)

    def __post_init__(self):
        self.data.shift = self.shift

    # -- derived model/training configs ------------------------------------

    def translator_cfg(self, seed) -> TranslatorCfg:
        return TranslatorCfg(width=self.translator.width, n_res=self.translator.n_res,
                             image_size=self.data.h, seed=seed)

    def discriminator_cfg(self, seed) -> DiscriminatorCfg:
        return DiscriminatorCfg(width=self.translator.disc_width, seed=seed)

    def seg_cfg(self, seed) -> SegCfg:
        return SegCfg(width=self.segnet.width, n_classes=self.data.k,
                      image_size=self.data.h, seed=seed)

    def cpn_cfg(self, seed) -> CpnCfg:
        return CpnCfg(n_classes=self.data.k, width_mult=self.cpn.width_mult,
                      bottleneck_channels=self.cpn.bottleneck_channels,
                      seg_branch_width=self.cpn.seg_branch_width,
                      image_size=self.data.h, seed=seed)

    def cpn_train_cfg(self, seed) -> CpnTrainCfg:
        return CpnTrainCfg(steps=self.cpn.steps, batch_size=self.cpn.batch_size,
                           lr=self.cpn.lr, lr_decay_every=self.cpn.lr_decay_every,
                           seed=seed)


_SECTION_TYPES = {
    "run": ("run", RunSection),
    "data": ("data", DatasetCfg),
    "shift": ("shift", ShiftCfg),
    "loss": ("loss", LossWeights),
    "translator": ("translator", TranslatorTrainCfg),
    "segnet": ("segnet", SegTrainCfg),
    "cpn": ("cpn", CpnSection),
    "selftrain": ("selftrain", SelfTrainCfg),
    "refnet": ("refnet", RefNetCfg),
}

_TOP_LEVEL_KEYS = {"gan_variant"}  # live in [loss] for convenience


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = current[0] if current else 0.0
        conv = int if isinstance(elem, int) else float
        return tuple(conv(p) for p in parts)
    return raw


def _apply_kv(cfg: RunConfig, section: str, key: str, raw: str):
    if section == "loss" and key in _TOP_LEVEL_KEYS:
        cfg.gan_variant = raw.strip()
        return
    if section not in _SECTION_TYPES:
        raise ConfigError(f"unknown section [{section}]; valid: {sorted(_SECTION_TYPES)}")
    attr, cls = _SECTION_TYPES[section]
    target = getattr(cfg, attr)
    names = {f.name for f in fields(cls)}
    if key not in names:
        extra = sorted(_TOP_LEVEL_KEYS) if section == "loss" else []
        raise ConfigError(f"unknown key {key!r} in [{section}]; valid: {sorted(names) + extra}")
    setattr(target, key, _parse_value(raw, getattr(target, key)))


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, optionally merged with an INI file and key=value overrides."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply_kv(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply_kv(cfg, section, key, raw)
    cfg.data.shift = cfg.shift
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.gan_variant not in ("least-squares", "log"):
        raise ConfigError(f"gan_variant must be least-squares or log, got {cfg.gan_variant!r}")
    if not (0.0 < cfg.selftrain.threshold <= 1.0):
        raise ConfigError(f"pseudo-label threshold must lie in (0, 1], got {cfg.selftrain.threshold}")
    for name in ("translator", "segnet", "cpn"):
        if getattr(cfg, name).steps <= 0:
            raise ConfigError(f"{name}.steps must be positive")


def dump_config(cfg: RunConfig, path):
    """Write the fully resolved configuration as INI."""
    parser = configparser.ConfigParser()
    for section, (attr, _) in _SECTION_TYPES.items():
        obj = getattr(cfg, attr)
        d = asdict(obj)
        d.pop("shift", None)  # lives in its own section
        parser[section] = {}
        for k, v in d.items():
            if isinstance(v, tuple) or isinstance(v, list):
                parser[section][k] = ", ".join(str(x) for x in v)
            else:
                parser[section][k] = str(v)
    parser["loss"]["gan_variant"] = cfg.gan_variant
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        parser.write(f)
