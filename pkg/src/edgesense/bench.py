"""Baselines and experiment runners: SNR sweeps, CAP trade-off, user scalability."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .channel import LinkConfig
from .data import ArrayView, task_kinds_for
from .losses import LossWeights
from .metrics import miou  # noqa: F401  (re-exported)
from .models import ArchConfig, Downstream, Upstream, compression_ratio, default_task, reduced_fraction
from .numerics import count_ops, no_grad
from .pipeline import (edge_forward, encode_device, keyed_downstream_noise, keyed_upstream_noise,
                       upstream_forward, users_forward)
from .training import (EvalConfig, EvalRow, TrainConfig, TrainReport, evaluate, train_downstream,
                       train_reconstruction)

log = logging.getLogger(__name__)

BUDGET_TOLERANCE = 1.07


class BaselineKind(str, Enum):
    PROPOSED = "proposed_broadcast"
    IDEAL = "ideal_downlink"
    DEEPJSCC = "deepjscc_upstream"
    UNICAST = "unicast_downlink"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- bandwidth

# (segmentation share, share of every other task) of the unicast budget per user count
_UNICAST_SHARES = {3: (36, 16), 6: (16, 9), 8: (16, 4), 12: (9, 4)}


@dataclass(frozen=True)
class BandwidthBudget:
    broadcast_dim: int
    unicast_dims: tuple[int, ...]
    tolerance: float = BUDGET_TOLERANCE

    def __post_init__(self):
        if self.broadcast_dim <= 0 or not self.unicast_dims:
            raise ConfigError("budget needs a positive broadcast size and at least one user")
        if min(self.unicast_dims) <= 0:
            raise ConfigError(f"every user needs a positive share: {self.unicast_dims}")
        if self.ratio > self.tolerance + 1e-12:
            raise ConfigError(f"unicast total {sum(self.unicast_dims)} exceeds "
                              f"{self.tolerance} x broadcast {self.broadcast_dim}")

    @property
    def ratio(self) -> float:
        return sum(self.unicast_dims) / self.broadcast_dim

    @classmethod
    def fullscale_three_users(cls) -> "BandwidthBudget":
        return cls(512 * 64, (512 * 36, 512 * 16, 512 * 16))

    @classmethod
    def for_users(cls, arch: ArchConfig) -> "BandwidthBudget":
        """Desk split of 68/64 x the broadcast channels, weighted by task kind."""
        cells = arch.edge_grid ** 2
        kinds = [t.kind for t in arch.tasks]
        m = len(kinds)
        if m == 1:
            return cls(arch.k_s, (arch.k_s,))
        total = (arch.stream_channels(arch.k_s) * 68) // 64
        seg_w, other_w = _UNICAST_SHARES.get(m, (1, 1))
        w = np.array([seg_w if k == "segmentation" else other_w for k in kinds], dtype=float)
        ch = np.floor(total * w / w.sum()).astype(int)
        order = sorted(range(m), key=lambda i: (kinds[i] != "segmentation", kinds[i] != "saliency", i))
        for i in order[:total - int(ch.sum())]:
            ch[i] += 1
        return cls(arch.k_s, tuple(int(c) * cells for c in ch))


def arch_for_users(arch: ArchConfig, m_users: int) -> ArchConfig:
    return replace(arch, tasks=[default_task(k) for k in task_kinds_for(m_users)])


# ---------------------------------------------------------------- baselines

def train_deepjscc_baseline(train: ArrayView, arch: ArchConfig, links: LinkConfig, cfg: TrainConfig,
                            beta: float = 1e-7, l_p: int | None = None) -> tuple[Upstream, TrainReport]:
    """Device encoders fitted for source reconstruction; plug into train_downstream afterwards."""
    return train_reconstruction(train, arch, links, beta, cfg, l_p)


def train_unicast_baseline(train: ArrayView, up: Upstream, arch: ArchConfig, links: LinkConfig,
                           weights: LossWeights, cfg: TrainConfig,
                           budget: BandwidthBudget | None = None) -> tuple[Downstream, TrainReport]:
    """One edge encoder per user, each stream sized by the budget."""
    budget = BandwidthBudget.for_users(arch) if budget is None else budget
    if len(budget.unicast_dims) != arch.m_users:
        raise ConfigError(f"budget has {len(budget.unicast_dims)} shares for {arch.m_users} users")
    if budget.broadcast_dim != arch.k_s:
        raise ConfigError("budget broadcast size does not match the edge encoder output")
    for d in budget.unicast_dims:
        try:
            arch.stream_channels(d)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return train_downstream(train, up, arch, links, weights, cfg, stream_dims=budget.unicast_dims)


# ---------------------------------------------------------------- rows

@dataclass
class MetricRow:
    baseline: str
    m_users: int
    uplink_snr_db: float
    downlink_snr_db: float
    metrics: dict[str, float]
    stderr: dict[str, float] = field(default_factory=dict)
    edge_encode_ms: float = float("nan")
    sd_encode_ms: float = float("nan")
    user_decode_ms: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {k}={v} outside [0, 1]")

    def record(self) -> dict:
        out = {"baseline": self.baseline, "M": self.m_users, "uplink_snr_db": self.uplink_snr_db,
               "downlink_snr_db": self.downlink_snr_db}
        out.update(self.extra)
        for k in sorted(self.metrics):
            out[k] = self.metrics[k]
            if k in self.stderr:
                out[f"{k}_se"] = self.stderr[k]
        return out

    def timing_record(self) -> dict:
        return {"baseline": self.baseline, "M": self.m_users, "uplink_snr_db": self.uplink_snr_db,
                "downlink_snr_db": self.downlink_snr_db, "sd_encode_ms": self.sd_encode_ms,
                "edge_encode_ms": self.edge_encode_ms, "user_decode_ms": self.user_decode_ms}


def _by_task(rows: Sequence[EvalRow]) -> tuple[dict, dict]:
    """Average users that share a task kind; standard errors combine as independent."""
    kinds = list(dict.fromkeys(r.kind for r in rows))
    met, se = {}, {}
    for k in kinds:
        sub = [r for r in rows if r.kind == k]
        met[k] = float(np.mean([r.metric for r in sub]))
        se[k] = float(np.sqrt(sum(r.stderr ** 2 for r in sub)) / len(sub))
    return met, se


def rows_from_eval(baseline: str, m_users: int, eval_rows: Sequence[EvalRow], extra: dict | None = None,
                   timings: dict | None = None) -> list[MetricRow]:
    keys = sorted({(r.uplink_snr_db, r.downlink_snr_db) for r in eval_rows})
    out = []
    for up_snr, down_snr in keys:
        sub = [r for r in eval_rows if (r.uplink_snr_db, r.downlink_snr_db) == (up_snr, down_snr)]
        met, se = _by_task(sub)
        row = MetricRow(baseline, m_users, up_snr, down_snr, met, se, extra=dict(extra or {}))
        if timings:
            row.sd_encode_ms = timings["sd_encode_ms"]
            row.edge_encode_ms = timings["edge_encode_ms"]
            row.user_decode_ms = timings["user_decode_ms"]
            row.extra.setdefault("edge_encode_ops", timings["edge_encode_ops"])
        out.append(row)
    return out


def write_rows(path, rows: Sequence[MetricRow], timing_path=None) -> None:
    """Deterministic columns go to ``path``; wall-clock columns to ``timing_path``."""
    recs = [r.record() for r in rows]
    fields = list(dict.fromkeys(k for r in recs for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(recs)
    if timing_path is not None:
        trs = [r.timing_record() for r in rows]
        with open(timing_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(trs[0]))
            w.writeheader()
            w.writerows(trs)


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(config) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def describe_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, check=True)
        return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def write_manifest(path, config, seed: int, outputs: Sequence[str] = ()) -> dict:
    manifest = {"config_hash": config_hash(config), "seed": int(seed), "version": describe_version(),
                "outputs": list(outputs)}
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


# ---------------------------------------------------------------- cost probes

def stage_costs(up: Upstream, down: Downstream, views: np.ndarray, links: LinkConfig, seed: int = 0,
                reps: int = 5) -> dict:
    """Per-sample flop counts and median wall-clock of each inference stage."""
    lk = links if links.downlink_snr_db is not None else replace(links, downlink_snr_db=(10.0,))
    views = views[:1]
    ids = [0]
    un = keyed_upstream_noise(seed, 0, ids, up, lk)
    dn = keyed_downstream_noise(seed, 0, ids, down, lk)
    with no_grad():
        w, _, _ = upstream_forward(up, views, un)
        streams, _, _ = edge_forward(down, w, up.l_p, dn.eps_s)

    def sd():
        for n in range(up.arch.n_views):
            encode_device(up, n, views[:, n], un.eps_z[n])

    def edge():
        edge_forward(down, w, up.l_p, dn.eps_s)

    def users():
        users_forward(down, streams, dn)

    out = {}
    for name, fn, per in (("sd_encode", sd, up.arch.n_views), ("edge_encode", edge, 1),
                          ("user_decode", users, len(down.decoders))):
        with no_grad(), count_ops() as ctr:
            fn()
        out[f"{name}_ops"] = ctr.flops // per
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            with no_grad():
                fn()
            times.append((time.perf_counter() - t0) * 1e3 / per)
        out[f"{name}_ms"] = float(np.median(times))
    return out


# ---------------------------------------------------------------- runners

@dataclass
class ModelEntry:
    baseline: BaselineKind
    up: Upstream
    down: Downstream


def _eval_cfg(base: EvalConfig, up_grid, down_grid, realizations, ideal=False) -> EvalConfig:
    return replace(base, uplink_snr_db=tuple(up_grid), downlink_snr_db=tuple(down_grid),
                   realizations=int(realizations), ideal_downlink=ideal)


def run_snr_sweep(models: Sequence[ModelEntry], test: ArrayView, links: LinkConfig,
                  snr_grid_up: Sequence[float], snr_grid_down: Sequence[float], realizations: int = 20,
                  eval_cfg: EvalConfig | None = None) -> list[MetricRow]:
    """Evaluate every baseline over the SNR grid; the ideal baseline forces a noiseless downlink."""
    base = eval_cfg or EvalConfig()
    rows = []
    for entry in models:
        ideal = BaselineKind(entry.baseline) is BaselineKind.IDEAL
        cfg = _eval_cfg(base, snr_grid_up, snr_grid_down, realizations, ideal)
        ev = evaluate(test, entry.up, entry.down, links, cfg)
        costs = stage_costs(entry.up, entry.down, test.views, links, cfg.seed)
        rows += rows_from_eval(BaselineKind(entry.baseline).value, entry.down.arch.m_users, ev,
                               {"l_p": entry.up.l_p}, costs)
    return rows


def cap_columns(l_p: int, channels: int, input_shape: Sequence[int], l_max: int) -> dict:
    return {"l_p": int(l_p), "cr": compression_ratio(l_p, channels, tuple(input_shape)),
            "reduced": reduced_fraction(l_p, l_max)}


def run_cap_tradeoff(models_per_lp: dict[int, tuple[Upstream, Downstream]], test: ArrayView,
                     links: LinkConfig, snr_grid: Sequence[float], realizations: int = 20,
                     eval_cfg: EvalConfig | None = None, downlink_snr_db: float = 10.0) -> list[MetricRow]:
    """Metric against pool size and uplink SNR, with analytic CR and reduced-data columns."""
    base = eval_cfg or EvalConfig()
    rows = []
    for l_p in sorted(models_per_lp):
        up, down = models_per_lp[l_p]
        arch = up.arch
        cols = cap_columns(l_p, arch.feat_channels, arch.view_shape, arch.feat_grid)
        ev = evaluate(test, up, down, links, _eval_cfg(base, snr_grid, [downlink_snr_db], realizations))
        rows += rows_from_eval(BaselineKind.PROPOSED.value, arch.m_users, ev, cols)
    return rows


def run_scalability(m_list: Sequence[int], up: Upstream, train: ArrayView, test: ArrayView,
                    links: LinkConfig, weights: LossWeights, cfg: TrainConfig,
                    budget_rule: Callable[[ArchConfig], BandwidthBudget] = BandwidthBudget.for_users,
                    realizations: int = 20, eval_cfg: EvalConfig | None = None,
                    uplink_snr_db: float = 0.0, downlink_snr_db: float = 10.0,
                    trained: dict | None = None) -> list[MetricRow]:
    """Proposed vs unicast for each user count, sharing the same device encoders.

    ``trained`` maps ``(baseline, M)`` to an already fitted Downstream; missing
    entries are trained here and added to it.
    """
    trained = {} if trained is None else trained
    base = eval_cfg or EvalConfig()
    rows = []
    for m in m_list:
        arch = arch_for_users(up.arch, m)
        budget = budget_rule(arch)
        for kind in (BaselineKind.PROPOSED, BaselineKind.UNICAST):
            key = (kind.value, m)
            if key not in trained:
                if kind is BaselineKind.PROPOSED:
                    trained[key], _ = train_downstream(train, up, arch, links, weights, cfg)
                else:
                    trained[key], _ = train_unicast_baseline(train, up, arch, links, weights, cfg, budget)
            down = trained[key]
            ev = evaluate(test, up, down, links, _eval_cfg(base, [uplink_snr_db], [downlink_snr_db], realizations))
            costs = stage_costs(up, down, test.views, links, base.seed)
            extra = {"downlink_entries": int(sum(down.stream_dims))}
            rows += rows_from_eval(kind.value, m, ev, extra, costs)
    return rows


# ---------------------------------------------------------------- summaries

def trend_rho(rows: Sequence[MetricRow], baseline: str, task: str, axis: str = "downlink_snr_db") -> float:
    """Spearman correlation between the chosen axis and a task metric for one baseline."""
    sub = [r for r in rows if r.baseline == baseline and task in r.metrics]
    x = [getattr(r, axis) if hasattr(r, axis) else r.extra[axis] for r in sub]
    y = [r.metrics[task] for r in sub]
    if len(set(x)) < 2:
        raise ValueError("need at least two distinct grid values")
    if len(set(y)) < 2:
        return 0.0
    return float(spearmanr(x, y).statistic)
