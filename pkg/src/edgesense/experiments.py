"""End-to-end experiment drivers shared by the command line and scripts/."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .bench import (BaselineKind, BandwidthBudget, MetricRow, ModelEntry, run_cap_tradeoff, run_scalability,
                    run_snr_sweep, train_deepjscc_baseline, train_unicast_baseline, write_manifest, write_rows)
from .checkpoints import Bundle
from .config import ExperimentConfig
from .data import ArrayView, Dataset, load_dataset, make_dataset, to_arrays
from .models import Downstream, Upstream
from .training import TrainConfig, TrainReport, train_downstream, train_upstream

BENCH_KINDS = ("snr-sweep", "cap", "scale", "baselines")


@dataclass
class Data:
    train: ArrayView
    test: ArrayView


def dataset_for(cfg: ExperimentConfig, path=None) -> Dataset:
    if path is not None:
        return load_dataset(path)
    return make_dataset(cfg.data.n_train, cfg.data.n_test, cfg.data.seed)


def load_data(cfg: ExperimentConfig, path=None) -> Data:
    ds = dataset_for(cfg, path)
    return Data(to_arrays(ds.train), to_arrays(ds.test))


def fit_upstream(cfg: ExperimentConfig, data: Data, train_cfg: TrainConfig | None = None,
                 l_p: int | None = None) -> tuple[Upstream, TrainReport]:
    return train_upstream(data.train, cfg.arch_config(), cfg.links, cfg.weights(), train_cfg or cfg.train, l_p)


def fit_downstream(cfg: ExperimentConfig, data: Data, up: Upstream,
                   train_cfg: TrainConfig | None = None) -> tuple[Downstream, TrainReport]:
    return train_downstream(data.train, up, cfg.arch_config(), cfg.links, cfg.weights(), train_cfg or cfg.train)


def _shared_upstream(cfg: ExperimentConfig, data: Data, bundle: Bundle | None) -> Upstream:
    if bundle is not None and bundle.up is not None:
        return bundle.up
    return fit_upstream(cfg, data, cfg.bench.sweep_train)[0]


def _proposed(cfg: ExperimentConfig, data: Data, up: Upstream, bundle: Bundle | None) -> Downstream:
    if bundle is not None and bundle.down is not None and bundle.down.broadcast:
        return bundle.down
    return fit_downstream(cfg, data, up, cfg.bench.sweep_train)[0]


def bench_rows(kind: str, cfg: ExperimentConfig, data: Data, bundle: Bundle | None = None) -> list[MetricRow]:
    """Train whatever the chosen benchmark needs (reusing ``bundle``) and return its table."""
    b = cfg.bench
    arch, links, weights, tc = cfg.arch_config(), cfg.links, cfg.weights(), b.sweep_train
    if kind == "cap":
        models = {}
        for l_p in b.lp_list:
            up, _ = fit_upstream(cfg, data, tc, l_p)
            models[l_p] = (up, fit_downstream(cfg, data, up, tc)[0])
        return run_cap_tradeoff(models, data.test, links, b.cap_snr_grid, b.realizations, cfg.eval,
                                b.scale_downlink_snr_db)
    up = _shared_upstream(cfg, data, bundle)
    if kind == "scale":
        return run_scalability(b.m_list, up, data.train, data.test, links, weights, tc, BandwidthBudget.for_users,
                               b.realizations, cfg.eval, b.scale_uplink_snr_db, b.scale_downlink_snr_db)
    down = _proposed(cfg, data, up, bundle)
    entries = [ModelEntry(BaselineKind.PROPOSED, up, down), ModelEntry(BaselineKind.IDEAL, up, down)]
    if kind == "baselines":
        uni, _ = train_unicast_baseline(data.train, up, arch, links, weights, tc)
        rec_up, _ = train_deepjscc_baseline(data.train, arch, links, tc, cfg.loss.beta)
        rec_down, _ = train_downstream(data.train, rec_up, arch, links, weights, tc)
        entries += [ModelEntry(BaselineKind.UNICAST, up, uni), ModelEntry(BaselineKind.DEEPJSCC, rec_up, rec_down)]
    elif kind != "snr-sweep":
        raise ValueError(f"unknown benchmark {kind!r}; choose from {BENCH_KINDS}")
    return run_snr_sweep(entries, data.test, links, b.snr_grid_up, b.snr_grid_down, b.realizations, cfg.eval)


def run_bench(kind: str, cfg: ExperimentConfig, seed: int, out_dir, data: Data | None = None,
              bundle: Bundle | None = None) -> list[MetricRow]:
    """Write ``<kind>.csv``, ``<kind>_timing.csv`` and ``<kind>_manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = bench_rows(kind, cfg, data or load_data(cfg), bundle)
    stem = kind.replace("-", "_")
    table, timing = out / f"{stem}.csv", out / f"{stem}_timing.csv"
    write_rows(table, rows, timing)
    write_manifest(out / f"{stem}_manifest.json", cfg, seed, [table.name, timing.name])
    return rows


def with_bench_train(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with the sweep training preset modified."""
    out = replace(cfg)
    out.bench = replace(cfg.bench, sweep_train=replace(cfg.bench.sweep_train, **changes))
    return out
