"""Run configuration documents (JSON) and the shipped profiles."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources

from .data import AugmentConfig, Dataset, read_cifar, synthetic_dataset
from .errors import ConfigError, DataError
from .model import SparseSwinConfig
from .serde import from_dict, to_plain
from .train import TrainConfig

PROFILES = ("imagenet100", "cifar", "tiny")
SEED_ENV = "SPARSESWIN_SEED"


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: tuple = ()
    test_path: tuple = ()
    n_train: int = 0
    n_test: int = 0
    classes: int = 4
    size: int = 32
    synthetic_train: int = 256
    synthetic_test: int = 128
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        for name in ("path", "test_path"):
            val = getattr(self, name)
            object.__setattr__(self, name, (val,) if isinstance(val, str) else tuple(val))
        if self.source not in ("synthetic", "cifar10", "cifar100"):
            raise ConfigError(f"data.source must be synthetic, cifar10 or cifar100, got {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ConfigError(f"data.path is required for source {self.source!r}")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("data.n_train / data.n_test must be >= 0 (0 = all records)")


@dataclass(frozen=True)
class RunConfig:
    model: SparseSwinConfig = field(default_factory=SparseSwinConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.data.augment.target_size != self.model.input_size:
            raise ConfigError(
                f"data.augment.target_size ({self.data.augment.target_size}) must equal "
                f"model.input_size ({self.model.input_size})"
            )
        if self.data.source == "synthetic" and self.data.classes != self.model.num_classes:
            raise ConfigError(f"data.classes ({self.data.classes}) != model.num_classes ({self.model.num_classes})")

    def to_dict(self) -> dict:
        return to_plain(self)


def parse_run_config(doc: dict, origin: str = "<config>") -> RunConfig:
    """Strict parse; a missing ``data.augment.target_size`` follows ``model.input_size``."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{origin}: top level must be a JSON object")
    doc = json.loads(json.dumps(doc))
    model_doc = doc.get("model", {})
    size = model_doc.get("input_size", SparseSwinConfig.input_size) if isinstance(model_doc, dict) else None
    data_doc = doc.setdefault("data", {})
    if isinstance(data_doc, dict) and isinstance(size, int):
        aug = data_doc.setdefault("augment", {})
        if isinstance(aug, dict):
            aug.setdefault("target_size", size)
    try:
        return from_dict(RunConfig, doc)
    except ConfigError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc


def profile_path(name: str):
    return resources.files("sparseswin").joinpath("profiles").joinpath(f"{name}.json")


def load_run_config(source: str, env: dict | None = None) -> RunConfig:
    """Load a config file, or a shipped profile by name; applies the seed override."""
    env = os.environ if env is None else env
    if os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
        origin = source
    elif source in PROFILES:
        text = profile_path(source).read_text(encoding="utf-8")
        origin = f"profile:{source}"
    else:
        raise ConfigError(f"{source}: no such file or profile (profiles: {', '.join(PROFILES)})")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    cfg = parse_run_config(doc, origin)
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from exc
        cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    return cfg


def load_datasets(cfg: DataConfig, seed: int) -> tuple[Dataset, Dataset]:
    """(train, test) datasets; test falls back to the training set when absent."""
    if cfg.source == "synthetic":
        train = synthetic_dataset(cfg.classes, cfg.synthetic_train, cfg.size, seed)
        test = synthetic_dataset(cfg.classes, cfg.synthetic_test, cfg.size, seed + 1)
    else:
        train = read_cifar(cfg.path, cfg.source)
        test = read_cifar(cfg.test_path, cfg.source) if cfg.test_path else train
    if cfg.n_train:
        train = train.subset(range(min(cfg.n_train, len(train))))
    if cfg.n_test:
        test = test.subset(range(min(cfg.n_test, len(test))))
    if len(train) == 0:
        raise DataError("training set is empty")
    return train, test
