"""Experiment configuration: typed sections, TOML files, ``section.key=value`` overrides.

A config file has four tables, all optional, and every key is checked against
the dataclass below (unknown keys are errors)::

    [dataset]
    name = "cmnist"            # cmnist | rmnist | twobit
    n_images = 10000
    train_envs = [0.1, 0.2]    # cmnist: P(green | class 0); rmnist: angles; twobit: spurious corr
    test_envs = [0.9]

    [method]
    name = "IRMv1"
    lam = 10000.0

    [optimizer]
    lr = 0.001
    batch_size = 256

    [harness]
    max_steps = 2000
    seeds = [0, 1, 2]
"""
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import tomli_w

from .nn import ConfigError
from .objectives import MethodConfig, canonical_method

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

RNG_NAME = "numpy.random.PCG64 seeded by SeedSequence(seed, spawn_key=(stream,))"
RNG_STREAMS = {"data": 0, "split": 1, "init": 2, "order": 3, "birm": 4}
DATASET_NAMES = ("cmnist", "rmnist", "twobit")
SELECTION_RULES = ("oracle_test_acc", "val_acc")

_DATASET_DEFAULTS = {
    "cmnist": {"train_envs": [0.1, 0.2], "test_envs": [0.9], "batch_size": 256},
    "rmnist": {"train_envs": [15.0, 30.0, 45.0, 60.0, 75.0], "test_envs": [0.0], "batch_size": 128},
    "twobit": {"train_envs": [0.9, 0.8], "test_envs": [0.1], "batch_size": 256},
}


@dataclass
class DatasetConfig:
    name: str = "cmnist"
    n_images: int = 10000
    mnist_dir: str = ""
    train_envs: list = None
    test_envs: list = None
    label_noise: float = 0.25
    downsample: bool = True
    n_per_env: int = 2500
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"dataset.name must be one of {DATASET_NAMES}, got {self.name!r}")
        defaults = _DATASET_DEFAULTS[self.name]
        if self.train_envs is None:
            self.train_envs = list(defaults["train_envs"])
        if self.test_envs is None:
            self.test_envs = list(defaults["test_envs"])
        self.train_envs = [float(v) for v in self.train_envs]
        self.test_envs = [float(v) for v in self.test_envs]
        if not self.train_envs:
            raise ConfigError("dataset.train_envs must not be empty")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("dataset.train_fraction must lie in (0, 1)")
        if self.n_images < 1 or self.n_per_env < 2:
            raise ConfigError("dataset sizes must be positive")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    batch_size: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("optimizer.lr must be positive")
        if self.batch_size < 0:
            raise ConfigError("optimizer.batch_size must be positive")
        if self.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay must be non-negative")


@dataclass
class HarnessConfig:
    hidden: list = None
    max_steps: int = 2000
    eval_interval: int = 50
    early_stop: float = 0.0
    early_stop_rule: str = "mean"
    penalty_anneal_steps: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    selection: str = ""
    n_bins: int = 15
    variance_includes_test: bool = True

    def __post_init__(self):
        if self.hidden is not None:
            self.hidden = [int(h) for h in self.hidden]
        if self.hidden is not None and any(h <= 0 for h in self.hidden):
            raise ConfigError("harness.hidden widths must be positive")
        if self.max_steps < 0 or self.eval_interval < 1:
            raise ConfigError("harness.max_steps must be >= 0 and eval_interval >= 1")
        if not 0.0 <= self.early_stop <= 100.0:
            raise ConfigError("harness.early_stop must lie in (0, 100], or 0 to disable")
        if self.early_stop_rule not in ("mean", "min"):
            raise ConfigError("harness.early_stop_rule must be 'mean' or 'min'")
        if self.selection and self.selection not in SELECTION_RULES:
            raise ConfigError(f"harness.selection must be one of {SELECTION_RULES}")
        self.seeds = [int(s) for s in self.seeds]


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    @property
    def batch_size(self):
        return self.optimizer.batch_size or _DATASET_DEFAULTS[self.dataset.name]["batch_size"]

    @property
    def selection(self):
        if self.harness.selection:
            return self.harness.selection
        return "oracle_test_acc" if self.dataset.name in ("cmnist", "twobit") else "val_acc"

    @property
    def hidden(self):
        if self.harness.hidden is not None:
            return self.harness.hidden
        return [16] if self.dataset.name == "twobit" else [256, 256]

    def to_dict(self):
        d = asdict(self)
        d["method"]["name"] = d["method"].pop("method")
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_updates(self, **sections):
        """Copy with per-section field updates, e.g. ``with_updates(method={"lam": 10.0})``."""
        d = self.to_dict()
        for section, updates in sections.items():
            if section not in d:
                raise ConfigError(f"unknown config section {section!r}")
            d[section].update(updates)
        return from_dict(d)


_SECTIONS = {"dataset": DatasetConfig, "method": MethodConfig, "optimizer": OptimizerConfig,
             "harness": HarnessConfig}


def _field_names(cls, section):
    names = {f.name for f in fields(cls)}
    if section == "method":
        names = (names - {"method"}) | {"name"}
    return names


def _coerce(cls, section, key, value):
    types = {f.name: f.type for f in fields(cls)}
    typ = types.get("method" if (section, key) == ("method", "name") else key)
    if typ in (float, "float") and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ in (int, "int") and isinstance(value, float) and value.is_integer():
        return int(value)
    expected = {float: (float,), int: (int,), bool: (bool,), str: (str,), list: (list,)}.get(typ)
    if expected and (not isinstance(value, expected) or (typ is int and isinstance(value, bool))):
        raise ConfigError(f"{section}.{key} expects {typ.__name__}, got {value!r}")
    return value


def from_dict(d):
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    built = {}
    for section, cls in _SECTIONS.items():
        raw = dict(d.get(section) or {})
        bad = set(raw) - _field_names(cls, section)
        if bad:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(bad))}")
        kwargs = {k: _coerce(cls, section, k, v) for k, v in raw.items() if v is not None}
        if section == "method" and "name" in kwargs:
            kwargs["method"] = canonical_method(kwargs.pop("name"))
        try:
            built[section] = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    return ExperimentConfig(**built)


def parse_value(text):
    """Parse an override value as a TOML value, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d, overrides):
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, text = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = key.strip().split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if name not in _field_names(_SECTIONS[section], section):
            raise ConfigError(f"unknown key {name!r} in [{section}]")
        d.setdefault(section, {})[name] = parse_value(text.strip())
    return d


def load_config(path=None, overrides=()):
    d = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                d = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
    return from_dict(apply_overrides(d, overrides))


def dumps_config(config):
    d = config.to_dict()
    return tomli_w.dumps({k: {kk: vv for kk, vv in v.items() if vv is not None} for k, v in d.items()})


def rng_stream(seed, stream):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(RNG_STREAMS[stream],)))


def replace_method(config, **kw):
    return replace(config, method=replace(config.method, **kw))
