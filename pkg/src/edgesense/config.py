"""Experiment configuration: nested dataclasses read from YAML or JSON."""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .channel import LinkConfig
from .data import task_kinds_for
from .losses import LossWeights
from .models import DESK_CAP_TABLE, FULLSCALE_CAP_TABLE, ArchConfig, default_task
from .training import EvalConfig, TrainConfig


@dataclass
class DataConfig:
    n_train: int = 512
    n_test: int = 128
    seed: int = 0


@dataclass
class ArchSection:
    n_views: int = 4
    m_users: int = 3
    feat_channels: int = 32
    feat_grid: int = 6
    hidden: int = 64
    edge_hidden: int = 64
    dec_hidden: int = 64
    edge_grid: int = 4
    cap_table: typing.Any = "desk"        # "desk", "fullscale" or a list of [snr_db, l_p]
    sigma_bias_init: float = -2.0

    def build(self) -> ArchConfig:
        table = {"desk": DESK_CAP_TABLE, "fullscale": FULLSCALE_CAP_TABLE}.get(self.cap_table, self.cap_table)
        if isinstance(table, str):
            raise ValueError(f"unknown CAP table {table!r}")
        return ArchConfig(n_views=self.n_views, feat_channels=self.feat_channels, feat_grid=self.feat_grid,
                          hidden=self.hidden, edge_hidden=self.edge_hidden, dec_hidden=self.dec_hidden,
                          edge_grid=self.edge_grid,
                          tasks=[default_task(k) for k in task_kinds_for(self.m_users)],
                          cap_table=tuple(tuple(e) for e in table), sigma_bias_init=self.sigma_bias_init)


@dataclass
class LossSection:
    alpha: typing.Optional[tuple] = None   # None: per-kind defaults
    gamma: typing.Optional[tuple] = None
    beta: float = 1e-7
    eta: float = 1e-7

    def build(self, kinds) -> LossWeights:
        base = LossWeights.for_tasks(kinds, self.beta, self.eta)
        return LossWeights(tuple(self.alpha) if self.alpha is not None else base.alpha,
                           tuple(self.gamma) if self.gamma is not None else base.gamma, self.beta, self.eta)


def _sweep_train() -> TrainConfig:
    return TrainConfig(epochs=20, lr=1e-3)


@dataclass
class BenchSection:
    snr_grid_up: tuple = (0.0,)
    snr_grid_down: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0)
    realizations: int = 20
    lp_list: tuple = (2, 3, 4, 5, 6)
    cap_snr_grid: tuple = (0.0,)
    m_list: tuple = (3, 12)
    scale_uplink_snr_db: float = 0.0
    scale_downlink_snr_db: float = 10.0
    sweep_train: TrainConfig = field(default_factory=_sweep_train)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchSection = field(default_factory=ArchSection)
    links: LinkConfig = field(default_factory=LinkConfig)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchSection = field(default_factory=BenchSection)
    topology: typing.Optional[dict] = None

    def arch_config(self) -> ArchConfig:
        return self.arch.build()

    def weights(self) -> LossWeights:
        return self.loss.build([t.kind for t in self.arch_config().tasks])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with every seed derived from ``seed``."""
        cfg = from_dict(to_dict(self))
        cfg.data.seed = seed
        cfg.train.seed = seed
        cfg.bench.sweep_train.seed = seed
        cfg.eval.seed = seed + 1000
        return cfg


def _convert(tp, value, default=None):
    if value is None:
        return None
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _convert(args[0], value) if args else value
    if is_dataclass(tp) and isinstance(value, dict):
        return _build(tp, value, default)
    if tp is tuple or origin is tuple:
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if tp is float and isinstance(value, int):
        return float(value)
    return value


def _build(cls, data: dict, base=None):
    """Typed construction; keys missing from ``data`` keep ``base``'s values (or the defaults)."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    base = cls() if base is None else base
    return replace(base, **{k: _convert(hints[k], v, getattr(base, k)) for k, v in data.items()})


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {})


def to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v
    return plain(asdict(cfg))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return from_dict(data or {})


def save_config(cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    data = to_dict(cfg)
    if path.suffix == ".json":
        path.write_text(json.dumps(data, indent=2, sort_keys=True))
    else:
        path.write_text(yaml.safe_dump(data, sort_keys=True))
