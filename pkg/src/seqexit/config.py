"""Run configuration: one JSON document, schema-checked before any compute."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .data import Dataset, load_csv, synth_blobs
from .evaluator import DEFAULT_BUDGETS, DEFAULT_TAUS
from .model import ModelSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _schema() -> dict:
    return json.loads(resources.files("seqexit").joinpath("run_config.schema.json").read_text())


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    n_per_class: int = 200
    n_test_per_class: int = 100
    spread: float = 1.0
    coarse_groups: int = 4
    fine_offset: float = 1.5
    center_scale: float = 1.0
    train_path: str | None = None
    test_path: str | None = None


@dataclass(frozen=True)
class EvalConfig:
    taus: tuple[float, ...] = DEFAULT_TAUS
    budgets: tuple[float, ...] = DEFAULT_BUDGETS
    confidence: str = "max_prob"


@dataclass(frozen=True)
class GridConfig:
    lam: tuple[float, ...] = ()
    rho: tuple[float, ...] = ()
    warm_up: tuple[bool, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: ModelSpec
    data: DataConfig
    train: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    out_dir: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        try:
            jsonschema.validate(doc, _schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        try:
            seed = int(doc["seed"])
            model = ModelSpec(**doc["model"])
            data = DataConfig(**doc["data"])
            train = TrainConfig(**doc["train"], seed=seed)
            ev = doc.get("eval", {})
            evc = EvalConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in ev.items()})
            grid = GridConfig(**{k: tuple(v) for k, v in doc.get("grid", {}).items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if data.source == "synthetic" and data.coarse_groups > model.num_classes:
            raise ConfigError("data.coarse_groups exceeds model.num_classes")
        return cls(seed, model, data, train, evc, grid, doc.get("out_dir"))

    def to_dict(self) -> dict:
        train = asdict(self.train)
        del train["seed"]
        ev = asdict(self.eval)
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "train": train,
            "grid": {k: list(v) for k, v in asdict(self.grid).items() if v},
            "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in ev.items()},
        }

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def expand_grid(self) -> list[TrainConfig]:
        """Cartesian product of the grid lists over ``train``; one entry without a grid."""
        g = self.grid
        lams = g.lam or (self.train.lam,)
        rhos = g.rho or (self.train.rho,)
        wus = g.warm_up or (self.train.warm_up,)
        return [replace(self.train, lam=float(a), rho=float(b), warm_up=bool(c))
                for a, b, c in itertools.product(lams, rhos, wus)]


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(doc)
    # csv paths are relative to the config file
    d = cfg.data
    if d.source == "csv":
        base = path.parent
        fix = lambda p: None if p is None else str((base / p).resolve())  # noqa: E731
        cfg = replace(cfg, data=replace(d, train_path=fix(d.train_path), test_path=fix(d.test_path)))
    return cfg


def build_dataset(cfg: RunConfig) -> Dataset:
    d, m = cfg.data, cfg.model
    if d.source == "synthetic":
        ds = synth_blobs(cfg.seed, m.num_classes, m.input_dim, d.n_per_class, d.spread,
                         coarse_groups=d.coarse_groups, fine_offset=d.fine_offset,
                         n_test_per_class=d.n_test_per_class, center_scale=d.center_scale)
    else:
        train = load_csv(d.train_path, m.num_classes, "train")
        if d.test_path:
            test = load_csv(d.test_path, m.num_classes, "test")
            ds = Dataset(
                np.concatenate([train.features, test.features]),
                np.concatenate([train.labels, test.labels]),
                np.concatenate([train.split, test.split]),
                m.num_classes,
            )
        else:
            ds = train
    if ds.input_dim != m.input_dim:
        raise ConfigError(f"dataset has {ds.input_dim} features, model expects {m.input_dim}")
    ds.check_train_classes()
    return ds.with_validation(cfg.train.val_fraction, cfg.seed)


# The desk-scale benchmark used by the acceptance suite and shipped as
# configs/benchmark.json: 8 classes in 4 coarse groups, 32 features,
# 200 training + 100 test samples per class, four exits.
BENCHMARK = RunConfig(
    seed=0,
    model=ModelSpec(input_dim=32, num_classes=8, widths=(12, 12, 12, 32), layers_per_segment=2),
    data=DataConfig(),
    train=TrainConfig(regime="lwf", rho=0.5, lr=0.02, max_epochs=80, patience=10),
)

BENCHMARK_LAMBDAS = (3.0, 10.0)
BENCHMARK_RHOS = (0.2, 0.5, 0.7)

