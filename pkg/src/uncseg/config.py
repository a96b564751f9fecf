"""Experiment configuration in a flat ``key = value`` text format.

Keys are grouped by dotted prefixes::

    method = bayes_weighted          # deterministic | bayes | bayes_weighted
    seed = 1
    data.root = corpus
    data.splits = test-C6-SIN,test-C6-SEQ,test-C1-5-SEQ
    data.val_fraction = 0.2
    output = runs/bayes_weighted-1
    arch.widths = 8,16,16,8
    sampler.epochs_per_cycle = 30
    loss.kappa = 3.0
    corpus.train = 300

Blank lines and ``#`` comments are ignored.  Unknown keys are errors.
Sections: ``arch.*`` (ArchConfig), ``sampler.*`` (SamplerConfig), ``loss.*``
(LossConfig), ``corpus.*`` (CorpusSpec, used by ``synth``), ``data.*``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .losses import LossConfig
from .model import ArchConfig
from .sampler import SamplerConfig, sgd_config
from .synth import SPLITS, CorpusSpec

METHODS = ("deterministic", "bayes", "bayes_weighted")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "bayes_weighted"
    seed: int = 0
    output: str = "runs/default"
    data_root: str = "corpus"
    splits: tuple = SPLITS[1:]
    val_fraction: float = 0.2
    arch: ArchConfig = field(default_factory=ArchConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("data.val_fraction must lie in (0, 1)")

    # the three methods differ only through these effective settings
    def effective_sampler(self) -> SamplerConfig:
        if self.method == "deterministic":
            return sgd_config(self.sampler)
        return self.sampler

    @property
    def weighted(self) -> bool:
        return self.method == "bayes_weighted"

    def effective_clip(self) -> float | None:
        if self.weighted or self.loss.clip_unweighted:
            return self.loss.grad_clip
        return None

    def effective_settings(self) -> dict:
        out = {f"sampler.{k}": v for k, v in dataclasses.asdict(self.effective_sampler()).items()}
        out["loss.weighted"] = self.weighted
        out["loss.kappa"] = self.loss.kappa if self.weighted else None
        out["loss.grad_clip"] = self.effective_clip()
        for k, v in dataclasses.asdict(self.loss).items():
            out.setdefault(f"loss.{k}", v)
        out["arch"] = self.arch
        out["seed"] = self.seed
        return out


_TOP = {"method": "method", "seed": "seed", "output": "output",
        "data.root": "data_root", "data.splits": "splits",
        "data.val_fraction": "val_fraction"}
_SECTIONS = {"arch": ArchConfig, "sampler": SamplerConfig, "loss": LossConfig,
             "corpus": CorpusSpec}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and not isinstance(default[0], str):
                return tuple(_coerce(s, default[0], key) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def emit(config: ExperimentConfig) -> str:
    lines = []
    for key, attr in _TOP.items():
        lines.append(f"{key} = {_fmt(getattr(config, attr))}")
    for section in _SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    top, sections = {}, {s: {} for s in _SECTIONS}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _TOP:
            attr = _TOP[key]
            top[attr] = _coerce(raw, getattr(base, attr), key)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or name not in {f.name for f in dataclasses.fields(_SECTIONS[section])}:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        sections[section][name] = _coerce(raw, getattr(getattr(base, section), name), key)
    try:
        built = {s: replace(getattr(base, s), **vals) for s, vals in sections.items()}
        return replace(base, **top, **built)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text)
