import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from edgesense.bench import (BandwidthBudget, BaselineKind, ConfigError, MetricRow, ModelEntry, arch_for_users,
                             cap_columns, config_hash, rows_from_eval, run_snr_sweep, stage_costs,
                             train_deepjscc_baseline, train_unicast_baseline, trend_rho, write_manifest,
                             write_rows)
from edgesense.channel import LinkConfig
from edgesense.data import make_dataset, to_arrays
from edgesense.losses import LossWeights
from edgesense.metrics import miou
from edgesense.models import ArchConfig, Downstream, Upstream, param_checksum
from edgesense.numerics import no_grad
from edgesense.training import EvalRow, TrainConfig, train_downstream, train_upstream

from .conftest import tiny_arch

LINKS = LinkConfig()
QUICK = TrainConfig(batch_size=4, epochs=1, lr=1e-3, plateau_window=0)


@pytest.fixture(scope="module")
def data():
    ds = make_dataset(8, 4, seed=21)
    return to_arrays(ds.train), to_arrays(ds.test)


@pytest.fixture(scope="module")
def tiny_up(data):
    up, _ = train_upstream(data[0], tiny_arch(), LINKS, LossWeights(), QUICK)
    return up


# ---------------------------------------------------------------- metric examples

def test_miou_disjoint_masks():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[0, 0] = 1
    b[3, 3] = 1
    from edgesense.metrics import class_iou
    assert class_iou(a, b, 1) == 0.0


def test_miou_half_square():
    gt = np.zeros((4, 4), int)
    gt[1:3, 1:3] = 1
    pred = np.zeros((4, 4), int)
    pred[1, 1:3] = 1
    from edgesense.metrics import class_iou
    assert class_iou(pred, gt, 1) == 0.5
    assert miou(gt, gt, 2) == 1.0


# ---------------------------------------------------------------- budgets

def test_fullscale_budget_ratio():
    b = BandwidthBudget.fullscale_three_users()
    assert b.ratio == pytest.approx(68 / 64)
    assert b.ratio <= 1.07


def test_budget_violation_rejected():
    with pytest.raises(ConfigError):
        BandwidthBudget(100, (60, 60))
    with pytest.raises(ConfigError):
        BandwidthBudget(100, (0, 50))


@pytest.mark.parametrize("m", [1, 2, 3, 6, 12])
def test_desk_budgets_stay_in_tolerance(m):
    arch = arch_for_users(ArchConfig(), m)
    b = BandwidthBudget.for_users(arch)
    assert len(b.unicast_dims) == m and b.ratio <= 1.07
    cells = arch.edge_grid ** 2
    assert all(d % cells == 0 for d in b.unicast_dims)


def test_default_three_user_split():
    b = BandwidthBudget.for_users(ArchConfig())
    assert b.broadcast_dim == 512 and sum(b.unicast_dims) == 544
    seg, sal, cls = b.unicast_dims
    assert seg > sal >= cls


def test_unicast_rejects_mismatched_budget(tiny_up, data):
    arch = tiny_arch()
    with pytest.raises(ConfigError):
        train_unicast_baseline(data[0], tiny_up, arch, LINKS, LossWeights(), QUICK,
                               BandwidthBudget(arch.k_s, (arch.k_s // 2,)))


# ---------------------------------------------------------------- unicast

def test_single_user_unicast_equals_proposed(data):
    arch = tiny_arch(m_users=1)
    up, _ = train_upstream(data[0], arch, LINKS, LossWeights(), QUICK)
    lk = replace(LINKS, downlink_snr_db=(0.0,))
    a, ra = train_downstream(data[0], up, arch, lk, LossWeights(), QUICK)
    b, rb = train_unicast_baseline(data[0], up, arch, lk, LossWeights(), QUICK)
    assert [h.total for h in ra.history] == [h.total for h in rb.history]
    assert ra.initial == rb.initial
    assert param_checksum(a) == param_checksum(b)


def test_unicast_stream_dims_follow_budget(data):
    arch = tiny_arch(feat_channels=8)
    up, _ = train_upstream(data[0], arch, LINKS, LossWeights(), QUICK)
    budget = BandwidthBudget.for_users(arch)
    assert budget.unicast_dims == (80, 32, 16)   # 8 channels split 36:16:16, remainder to seg then sal
    down, _ = train_unicast_baseline(data[0], up, arch, LINKS, LossWeights(), QUICK, budget)
    assert tuple(down.stream_dims) == budget.unicast_dims
    assert down.user_stream == [0, 1, 2]


def test_edge_cost_scaling_with_users(data):
    base = ArchConfig()
    up = Upstream(base, np.random.default_rng(0), 4)
    ops = {}
    for m in (3, 12):
        arch = arch_for_users(base, m)
        rng = np.random.default_rng(1)
        uni = Downstream.unicast(arch, rng, BandwidthBudget.for_users(arch).unicast_dims)
        ops["uni", m] = stage_costs(up, uni, data[1].views, LINKS, reps=1)["edge_encode_ops"]
        ops["pro", m] = stage_costs(up, Downstream(arch, rng), data[1].views, LINKS, reps=1)["edge_encode_ops"]
    assert ops["pro", 12] == ops["pro", 3] == 1_811_456
    assert (ops["uni", 3], ops["uni", 12]) == (5_172_480, 20_259_072)
    assert 3.5 <= ops["uni", 12] / ops["uni", 3] <= 4.5


# ---------------------------------------------------------------- deepjscc

def test_reconstruction_theta_plugs_into_downstream(data):
    arch = tiny_arch()
    up, rep = train_deepjscc_baseline(data[0], arch, LINKS, QUICK)
    assert up.trained and rep.phase == "reconstruction"
    down, _ = train_downstream(data[0], up, arch, LINKS, LossWeights(), QUICK)
    assert len(down.decoders) == 3


@pytest.mark.slow
def test_reconstruction_overfit_and_gain():
    # noiseless links and no pooling: the view is recoverable, so four samples can be memorized
    train = to_arrays(make_dataset(4, 1, seed=3).train)
    links = LinkConfig(noiseless_uplink=True, noiseless_downlink=True)
    cfg = TrainConfig(batch_size=4, epochs=500, lr=3e-3, weight_decay=0.0, plateau_window=0)
    up, rep = train_deepjscc_baseline(train, ArchConfig(), links, cfg, beta=0.0, l_p=6)
    assert rep.history[-1].total < 1e-3
    assert rep.initial.total >= 10 * rep.history[-1].total


# ---------------------------------------------------------------- rows and tables

def _eval_rows(metric_by_snr):
    rows = []
    for snr, v in metric_by_snr.items():
        rows += [EvalRow(0.0, snr, 0, "segmentation", v, 0.01), EvalRow(0.0, snr, 1, "segmentation", v, 0.01)]
    return rows


def test_rows_average_users_of_same_kind():
    rows = rows_from_eval("proposed_broadcast", 2, _eval_rows({0.0: 0.4, 5.0: 0.5}))
    assert [r.metrics["segmentation"] for r in rows] == [0.4, 0.5]
    assert rows[0].stderr["segmentation"] == pytest.approx(np.sqrt(2) * 0.01 / 2)


def test_metric_bounds_enforced():
    with pytest.raises(ValueError):
        MetricRow("x", 3, 0.0, 0.0, {"a": 1.5})


def test_trend_rho():
    rows = rows_from_eval("p", 3, _eval_rows({-10.0: 0.1, -5.0: 0.2, 0.0: 0.25, 5.0: 0.3, 10.0: 0.31}))
    assert trend_rho(rows, "p", "segmentation") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        trend_rho(rows[:1], "p", "segmentation")


def test_cap_columns():
    col = cap_columns(4, 512, (3, 384, 384), 8)
    assert col["cr"] == pytest.approx(0.0185, abs=5e-4)
    assert col["reduced"] == pytest.approx(0.75)
    assert cap_columns(8, 512, (3, 384, 384), 8)["reduced"] == 0.0


def test_write_rows_splits_timings(tmp_path):
    rows = rows_from_eval("p", 3, _eval_rows({0.0: 0.5}),
                          timings={"sd_encode_ms": 1.0, "edge_encode_ms": 2.0, "user_decode_ms": 3.0,
                                   "edge_encode_ops": 10})
    write_rows(tmp_path / "a.csv", rows, tmp_path / "a_timing.csv")
    main = list(csv.DictReader(open(tmp_path / "a.csv")))
    timing = list(csv.DictReader(open(tmp_path / "a_timing.csv")))
    assert "edge_encode_ms" not in main[0] and main[0]["edge_encode_ops"] == "10"
    assert timing[0]["edge_encode_ms"] == "2.0"


def test_manifest(tmp_path):
    cfg = {"a": 1, "b": [1, 2]}
    m = write_manifest(tmp_path / "m.json", cfg, 7, ["x.csv"])
    assert json.loads((tmp_path / "m.json").read_text()) == m
    assert m["seed"] == 7 and m["config_hash"] == config_hash({"b": [1, 2], "a": 1})
    assert config_hash(cfg) != config_hash({"a": 2, "b": [1, 2]})


def test_sweep_is_deterministic_and_ideal_is_noiseless(tiny_up, data):
    arch = tiny_arch()
    down, _ = train_downstream(data[0], tiny_up, arch, LINKS, LossWeights(), QUICK)
    models = [ModelEntry(BaselineKind.PROPOSED, tiny_up, down), ModelEntry(BaselineKind.IDEAL, tiny_up, down)]
    a = run_snr_sweep(models, data[1], LINKS, [0.0], [-10.0, 10.0], realizations=2)
    b = run_snr_sweep(models, data[1], LINKS, [0.0], [-10.0, 10.0], realizations=2)
    assert [r.record() for r in a] == [r.record() for r in b]
    ideal = [r.metrics for r in a if r.baseline == "ideal_downlink"]
    # with the downlink noise removed the nominal SNR cannot matter
    assert ideal[0] == ideal[1]
