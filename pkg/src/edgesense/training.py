"""Two-step training (devices + auxiliary net, then edge + users) and evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .channel import LinkConfig
from .data import ArrayView
from .losses import (LossBreakdown, LossWeights, make_batch, reconstruction_loss, vmib_downstream,
                     vmib_upstream)
from .metrics import predict_labels, task_metric
from .models import (ArchConfig, AuxiliaryNetwork, Downstream, Upstream, ViewDecoder, cap_select,
                     param_checksum)
from .numerics import Adam, ContractError, no_grad
from .pipeline import (edge_forward, keyed_downstream_noise, keyed_upstream_noise, upstream_forward,
                       users_forward)

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 60
    lr: float = 2e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    plateau_window: int = 10
    plateau_tol: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class TrainReport:
    phase: str
    history: list[LossBreakdown] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    initial: LossBreakdown | None = None
    checksums: dict = field(default_factory=dict)
    extra_state: dict = field(default_factory=dict)   # e.g. the auxiliary network
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.history)

    def rows(self) -> list[dict]:
        out = []
        for ep, (bd, ms) in enumerate(zip(self.history, self.wall_ms), start=1):
            row = {"phase": self.phase, "epoch": ep, "total_loss": bd.total}
            for m, t in enumerate(bd.per_task):
                row[f"task{m}_loss"] = t
            row["kl_term"] = bd.kl_term
            row["wall_ms"] = ms
            out.append(row)
        return out


def write_metrics_csv(path, reports: Sequence[TrainReport]) -> None:
    rows = [r for rep in reports for r in rep.rows()]
    if not rows:
        return
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def _mean_breakdown(bds: list[LossBreakdown]) -> LossBreakdown:
    return LossBreakdown(float(np.mean([b.total for b in bds])),
                         [float(np.mean(v)) for v in zip(*[b.per_task for b in bds])],
                         float(np.mean([b.kl_term for b in bds])), bds[0].task_weights, bds[0].tradeoff)


def _plateaued(history: list[LossBreakdown], window: int, tol: float) -> bool:
    if window <= 0 or len(history) <= window:
        return False
    totals = [h.total for h in history]
    before = min(totals[:-window])
    recent = min(totals[-window:])
    return recent > before * (1.0 - tol) if before > 0 else recent >= before


def _run(phase: str, params, loss_fn, n_samples: int, cfg: TrainConfig, rng: np.random.Generator,
         report: TrainReport) -> None:
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n_samples)
        bds = []
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            total, bd = loss_fn(idx)
            if not np.isfinite(bd.total):
                raise TrainingDivergedError(f"{phase}: non-finite loss at epoch {epoch + 1}: {bd}")
            if report.initial is None:
                report.initial = bd
            total.backward()
            opt.step()
            bds.append(bd)
        report.history.append(_mean_breakdown(bds))
        report.wall_ms.append((time.perf_counter() - t0) * 1e3)
        log.info("%s epoch %d loss %.5f", phase, epoch + 1, report.history[-1].total)
        if _plateaued(report.history, cfg.plateau_window, cfg.plateau_tol):
            report.stopped_early = True
            break
    opt.zero_grad()


def _streams(seed: int):
    init_rng = np.random.default_rng([seed, 0])
    train_rng = np.random.default_rng([seed, 1])
    return init_rng, train_rng


def train_upstream(train: ArrayView, arch: ArchConfig, links: LinkConfig, weights: LossWeights,
                   cfg: TrainConfig, l_p: int | None = None) -> tuple[Upstream, TrainReport]:
    """Jointly fit the device encoders and the auxiliary network; keep only the encoders."""
    if len(train) == 0:
        raise ValueError("empty training set")
    if l_p is None:
        l_p = cap_select(arch.cap_table, links.mean_uplink_snr_db)
    init_rng, rng = _streams(cfg.seed)
    up = Upstream(arch, init_rng, l_p)
    aux = AuxiliaryNetwork(arch, init_rng)
    kinds = [t.kind for t in arch.tasks]
    weights = weights.resized(arch.m_users)
    report = TrainReport("upstream")

    def loss_fn(idx):
        return vmib_upstream(make_batch(train, idx, kinds), up, aux, weights, links, rng)

    _run("upstream", up.parameters() + aux.parameters(), loss_fn, len(train), cfg, rng, report)
    up.trained = True
    report.checksums = {"theta": param_checksum(up), "lambda": param_checksum(aux)}
    report.extra_state = {"aux": aux.state_dict("aux.")}
    return up, report


def train_downstream(train: ArrayView, up: Upstream | None, arch: ArchConfig, links: LinkConfig,
                     weights: LossWeights, cfg: TrainConfig, stream_dims: Sequence[int] | None = None,
                     allow_untrained: bool = False) -> tuple[Downstream, TrainReport]:
    """Fit the edge encoder(s) and user decoders on top of frozen device encoders.

    ``stream_dims`` with one entry per user builds the unicast variant.
    """
    if up is None or not up.encoders:
        raise ContractError("downstream training needs trained device encoders")
    if not up.trained and not allow_untrained:
        raise ContractError("device encoders have not been trained")
    if len(train) == 0:
        raise ValueError("empty training set")
    init_rng, rng = _streams(cfg.seed + 7919)
    if stream_dims is None:
        down = Downstream(arch, init_rng)
    else:
        down = Downstream.unicast(arch, init_rng, stream_dims)
    kinds = [t.kind for t in arch.tasks]
    weights = weights.resized(arch.m_users)
    theta_before = param_checksum(up)
    report = TrainReport("downstream")

    def loss_fn(idx):
        return vmib_downstream(make_batch(train, idx, kinds), up, down, weights, links, rng)

    _run("downstream", down.parameters(), loss_fn, len(train), cfg, rng, report)
    if param_checksum(up) != theta_before:
        raise ContractError("device encoders changed during downstream training")
    report.checksums = {"theta": theta_before, "phi_psi": param_checksum(down)}
    return down, report


def train_reconstruction(train: ArrayView, arch: ArchConfig, links: LinkConfig, beta: float,
                         cfg: TrainConfig, l_p: int | None = None) -> tuple[Upstream, TrainReport]:
    """Device encoders fitted to reconstruct their own views at the edge (no task labels)."""
    if l_p is None:
        l_p = cap_select(arch.cap_table, links.mean_uplink_snr_db)
    init_rng, rng = _streams(cfg.seed + 104729)
    up = Upstream(arch, init_rng, l_p)
    decs = [ViewDecoder(arch, init_rng, f"rec{n}") for n in range(arch.n_views)]
    report = TrainReport("reconstruction")

    def loss_fn(idx):
        return reconstruction_loss(make_batch(train, idx, []), up, decs, beta, links, rng)

    params = up.parameters() + [p for d in decs for p in d.parameters()]
    _run("reconstruction", params, loss_fn, len(train), cfg, rng, report)
    up.trained = True
    report.checksums = {"theta": param_checksum(up)}
    report.extra_state = {f"rec{n}": d.state_dict() for n, d in enumerate(decs)}
    report.extra_state["decoders"] = decs
    return up, report


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalConfig:
    uplink_snr_db: tuple = (0.0,)
    downlink_snr_db: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0)
    realizations: int = 20
    seed: int = 2024
    stochastic: bool = True
    ideal_downlink: bool = False


@dataclass
class EvalRow:
    uplink_snr_db: float
    downlink_snr_db: float
    user: int
    kind: str
    metric: float
    stderr: float
    values: list[float] = field(default_factory=list)


def predict(views: np.ndarray, sample_ids: Sequence[int], up: Upstream, down: Downstream,
            links: LinkConfig, seed: int, realization: int = 0, stochastic: bool = True) -> list[np.ndarray]:
    """Per-user logits for a set of samples, with every random draw keyed by sample id."""
    with no_grad():
        un = keyed_upstream_noise(seed, realization, sample_ids, up, links, stochastic)
        w, _, _ = upstream_forward(up, views, un, wire=True)
        dn = keyed_downstream_noise(seed, realization, sample_ids, down, links, stochastic)
        streams, _, _ = edge_forward(down, w, up.l_p, dn.eps_s)
        preds = users_forward(down, streams, dn, wire=True)
    return [p.data for p in preds]


def evaluate(test: ArrayView, up: Upstream, down: Downstream, links: LinkConfig,
             eval_cfg: EvalConfig) -> list[EvalRow]:
    """Average each user's metric over independent channel realizations at every grid point."""
    tasks = down.arch.tasks
    ids = np.arange(len(test))
    rows = []
    for up_snr in eval_cfg.uplink_snr_db:
        for down_snr in eval_cfg.downlink_snr_db:
            lk = replace(links, uplink_snr_db=tuple([float(up_snr)] * up.arch.n_views),
                         downlink_snr_db=(float(down_snr),), downlink_snr_range=links.downlink_snr_range,
                         noiseless_downlink=eval_cfg.ideal_downlink or links.noiseless_downlink)
            per_user = [[] for _ in tasks]
            for r in range(eval_cfg.realizations):
                logits = predict(test.views, ids, up, down, lk, eval_cfg.seed, r, eval_cfg.stochastic)
                for m, (lg, t) in enumerate(zip(logits, tasks)):
                    pred = predict_labels(lg, t.kind)
                    per_user[m].append(task_metric(pred, test.labels(t.kind), t.kind, t.num_classes))
            for m, t in enumerate(tasks):
                vals = np.asarray(per_user[m])
                se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
                rows.append(EvalRow(float(up_snr), float(down_snr), m, t.kind, float(vals.mean()), se,
                                    vals.tolist()))
    return rows
