"""INI-style experiment configuration.

A config has up to five sections::

    [dataset]
    kind = mnist            # or synthetic
    subset = 6000           # training samples drawn from MNIST (0: all)

    [partition]
    kind = label_shard      # or iid
    clients = 5
    classes_per_client = 2

    [scheme]
    name = fedtan
    local_steps = 5
    iterations = 400

    [model]
    hidden = 30

    [run]
    seed = 0
    output = results.csv

Only ``[dataset]`` and ``[scheme]`` are required; everything else has a
default.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import Scheme, SchemeConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "mnist"
    path: str = ""  # MNIST directory; empty means the environment default
    subset: int = 6000
    test_subset: int = 0  # 0 keeps the full test set
    subset_seed: int = 0
    classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    input_dim: int = 20
    separation: float = 3.0
    noise: float = 1.0


@dataclass(frozen=True)
class PartitionConfig:
    kind: str = "iid"
    clients: int = 5
    classes_per_client: int = 2
    seed: int = 0


@dataclass(frozen=True)
class SchemeSection:
    name: str = ""
    local_steps: int = 5
    iterations: int = 400
    lr: float = 0.5
    lr_after_switch: float | None = None
    switch_iteration: int | None = None
    batch_size: int | None = 128  # "full" in the file means None
    momentum: float = 0.1
    epsilon: float = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (30,)
    batch_norm: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output: str = "results.csv"
    workers: int = 1
    eval_every: int = 1
    timing: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    scheme: SchemeSection = field(default_factory=SchemeSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def scheme_config(self) -> SchemeConfig:
        s = self.scheme
        return SchemeConfig(
            scheme=Scheme(s.name), local_steps=s.local_steps, iterations=s.iterations,
            lr=s.lr, lr_after_switch=s.lr_after_switch,
            switch_iteration=s.switch_iteration, batch_size=s.batch_size,
            momentum=s.momentum, seed=self.run.seed, workers=self.run.workers,
            eval_every=self.run.eval_every, timing=self.run.timing)


SECTIONS = {"dataset": DatasetConfig, "partition": PartitionConfig,
            "scheme": SchemeSection, "model": ModelConfig, "run": RunConfig}
REQUIRED = ("dataset", "scheme")


def _parse_bool(key, text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {text!r}")


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if key == "scheme.batch_size":
            return None if text.lower() == "full" else int(text)
        if key in ("scheme.lr_after_switch", "scheme.switch_iteration"):
            if text.lower() in ("", "none"):
                return None
            return float(text) if key.endswith("lr_after_switch") else int(text)
        if key == "model.hidden":
            if not text:
                return ()
            return tuple(int(t) for t in text.replace(",", " ").split())
        if isinstance(default, bool):
            return _parse_bool(key, text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(key, f"cannot parse {text!r}") from None


def _validate(cfg: ExperimentConfig) -> None:
    d, p, s, r = cfg.dataset, cfg.partition, cfg.scheme, cfg.run
    checks = [
        ("dataset.kind", d.kind in ("mnist", "synthetic"), "must be mnist or synthetic"),
        ("dataset.subset", d.subset >= 0, "must be >= 0"),
        ("dataset.test_subset", d.test_subset >= 0, "must be >= 0"),
        ("dataset.classes", d.classes >= 2, "must be >= 2"),
        ("dataset.per_class", d.per_class >= 1, "must be >= 1"),
        ("dataset.test_per_class", d.test_per_class >= 1, "must be >= 1"),
        ("dataset.input_dim", d.input_dim >= 1, "must be >= 1"),
        ("partition.kind", p.kind in ("iid", "label_shard"), "must be iid or label_shard"),
        ("partition.clients", p.clients >= 1, "must be >= 1"),
        ("partition.classes_per_client", p.classes_per_client >= 1, "must be >= 1"),
        ("scheme.local_steps", s.local_steps >= 1, "must be >= 1"),
        ("scheme.iterations", s.iterations >= 0, "must be >= 0"),
        ("scheme.lr", s.lr >= 0, "must be >= 0"),
        ("scheme.batch_size", s.batch_size is None or s.batch_size >= 1,
         "must be >= 1 or 'full'"),
        ("scheme.momentum", 0 < s.momentum <= 1, "must lie in (0, 1]"),
        ("scheme.epsilon", s.epsilon > 0, "must be > 0"),
        ("model.hidden", all(h >= 1 for h in cfg.model.hidden), "widths must be >= 1"),
        ("run.workers", r.workers >= 1, "must be >= 1"),
        ("run.eval_every", r.eval_every >= 1, "must be >= 1"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(key, msg)
    if not s.name:
        raise ConfigError("scheme", "scheme name is empty")
    try:
        Scheme(s.name)
    except ValueError:
        names = ", ".join(m.value for m in Scheme)
        raise ConfigError("scheme.name", f"unknown scheme {s.name!r} (one of {names})") from None
    if s.name == Scheme.FEDTAN_II.value:
        if s.switch_iteration is None:
            raise ConfigError("scheme.switch_iteration", "required for fedtan2")
        if s.iterations and s.switch_iteration >= s.iterations:
            raise ConfigError("scheme.switch_iteration", "must be < iterations")
    if d.kind == "mnist" and d.path and not Path(d.path).is_dir():
        raise ConfigError("dataset.path", f"directory {d.path!r} does not exist")


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                       interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("syntax", str(exc).splitlines()[0]) from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
    for section in REQUIRED:
        if section not in parser:
            raise ConfigError(section, "missing section")
    parts = {}
    for section, cls in SECTIONS.items():
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        values = {}
        if section in parser:
            for key, raw in parser[section].items():
                if key not in names:
                    raise ConfigError(f"{section}.{key}", "unknown key")
                values[key] = _parse_value(f"{section}.{key}", raw,
                                           getattr(defaults, key))
        parts[section] = cls(**values)
    cfg = ExperimentConfig(**parts)
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in SECTIONS:
        part = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(part):
            value = getattr(part, f.name)
            if section == "scheme" and f.name == "batch_size" and value is None:
                text = "full"
            else:
                text = _format_value(value)
            lines.append(f"{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)


def build_experiment(cfg: ExperimentConfig):
    """Materialize data, partition and network for ``cfg``.

    Returns ``(spec, client_data, test)``.
    """
    from .datasets import (load_mnist, partition_by_label,
                           partition_iid, random_subset, synth_gaussian)
    from .nn import mlp_spec

    d = cfg.dataset
    if d.kind == "mnist":
        train = load_mnist("train", d.path or None)
        test = load_mnist("test", d.path or None)
        if d.subset:
            train = random_subset(train, d.subset, d.subset_seed)
        if d.test_subset:
            test = random_subset(test, d.test_subset, d.subset_seed + 1)
    else:
        full = synth_gaussian(d.classes, d.per_class + d.test_per_class, d.input_dim,
                              d.subset_seed, d.separation, d.noise)
        per = d.per_class + d.test_per_class
        position = np.arange(len(full)) % per
        train = full.subset(np.flatnonzero(position < d.per_class))
        test = full.subset(np.flatnonzero(position >= d.per_class))
    p = cfg.partition
    try:
        if p.kind == "iid":
            part = partition_iid(train, p.clients, p.seed)
        else:
            part = partition_by_label(train, p.clients, p.classes_per_client, p.seed)
    except ValueError as exc:
        raise ConfigError("partition", str(exc)) from None
    spec = mlp_spec(train.input_dim, cfg.model.hidden, train.class_count,
                    batch_norm=cfg.model.batch_norm)
    return spec, part.split(train), test
