"""Declarative run configuration read from an INI-style file.

Every section maps onto one dataclass; keys left out take the dataclass
default, unknown keys are rejected. The only environment input is
``OTPEL_SEED``, which replaces ``[run] seed``.

The run seed feeds backbone initialization, pretraining batches, corpus
splits, bank sampling, PEL initialization and the adaptation streams. Corpus
content is fixed by the ``seed`` keys of ``[source]`` and ``[target]``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError
from .ot import DistanceMetric
from .pel import PELConfig
from .synth import CorpusSpec, source_spec, target_spec
from .train import TrainConfig

SEED_ENV = "OTPEL_SEED"
SECTIONS = ("run", "backbone", "source", "target", "pretrain", "bank", "pel", "metric", "train")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 8
    peak_lr: float = 2e-3
    warmup_steps: int = 200
    train_fraction: float = 0.9


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.5


@dataclass(frozen=True)
class BankConfig:
    max_frames: int = 512


@dataclass(frozen=True)
class RunConfig:
    out_dir: Path = Path("otpel-out")
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    source: CorpusSpec = field(default_factory=source_spec)
    target: CorpusSpec = field(default_factory=target_spec)
    target_split: SplitConfig = field(default_factory=SplitConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    pel: PELConfig = field(default_factory=PELConfig)
    metric: DistanceMetric = field(default_factory=DistanceMetric)
    train: TrainConfig = field(default_factory=TrainConfig)

    def seeded(self) -> "RunConfig":
        """Push the run seed into every component that draws random numbers."""
        s = self.seed
        return replace(
            self,
            backbone=replace(self.backbone, init_seed=s),
            pel=replace(self.pel, init_seed=s),
            metric=replace(self.metric, seed=s),
            train=replace(self.train, seed=s, metric=replace(self.metric, seed=s)),
        )

    def train_config(self, metric: str | None) -> TrainConfig:
        """Training settings for one grid cell; ``metric=None`` turns the OT term off."""
        m = self.metric if metric is None else replace(self.metric, kind=metric)
        return replace(self.train, metric=m, use_ot=metric is not None)

    def to_dict(self) -> dict:
        out = {"run": {"out_dir": str(self.out_dir), "seed": self.seed}}
        for section, attr in _SECTION_ATTRS.items():
            out[section] = _plain(dataclasses.asdict(getattr(self, attr)))
        out["train"].pop("metric", None)
        return out

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


_SECTION_ATTRS = {
    "backbone": "backbone",
    "source": "source",
    "target": "target",
    "split": "target_split",
    "pretrain": "pretrain",
    "bank": "bank",
    "pel": "pel",
    "metric": "metric",
    "train": "train",
}


def _plain(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def _convert(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "yes", "true", "on"):
                return True
            if lowered in ("0", "no", "false", "off"):
                return False
            raise ValueError(raw)
        if default is None or isinstance(default, tuple):
            # optional fields: blank means "use the built-in rule"
            if raw == "":
                return None
            if key.endswith("taps"):
                return tuple(int(t) for t in raw.split(",") if t.strip())
            return float(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return raw


def _build(cls, base, section: str, items: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw in items.items():
        if key not in names or key == "metric":
            raise ConfigError(f"[{section}] unknown key {key!r}; valid: {', '.join(sorted(names - {'metric'}))}")
        updates[key] = _convert(section, key, raw, getattr(base, key))
    return replace(base, **updates)


def parse(text: str, base_dir: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config does not parse: {exc}") from None
    known = set(_SECTION_ATTRS) | {"run"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]; valid: {', '.join(sorted(known))}")
    rc = RunConfig()
    run = dict(parser["run"]) if parser.has_section("run") else {}
    extra = set(run) - {"out_dir", "seed"}
    if extra:
        raise ConfigError(f"[run] unknown keys {sorted(extra)}")
    out_dir = Path(run.get("out_dir", str(rc.out_dir)))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    seed = _convert("run", "seed", run.get("seed", "0"), 0)
    if os.environ.get(SEED_ENV, "").strip():
        seed = _convert("env", SEED_ENV, os.environ[SEED_ENV], 0)
    updates = {"out_dir": out_dir, "seed": seed}
    for section, attr in _SECTION_ATTRS.items():
        if parser.has_section(section):
            base = getattr(rc, attr)
            updates[attr] = _build(type(base), base, section, dict(parser[section]))
    return replace(rc, **updates).seeded()


def load(path) -> RunConfig:
    """Read a config file; a relative ``out_dir`` is taken relative to the file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist (write one with `otpel init {path}`)")
    return parse(path.read_text(), base_dir=path.parent)
