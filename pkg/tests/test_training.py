import csv
from dataclasses import replace

import numpy as np
import pytest

from edgesense.channel import LinkConfig
from edgesense.data import make_dataset, to_arrays
from edgesense.losses import LossBreakdown, LossWeights
from edgesense.models import Upstream, param_checksum
from edgesense.numerics import ContractError
from edgesense.training import (EvalConfig, TrainConfig, TrainingDivergedError, _plateaued, evaluate, predict,
                                train_downstream, train_upstream, write_metrics_csv)

from .conftest import tiny_arch

ARCH = tiny_arch()
LINKS = LinkConfig()
ONE = TrainConfig(batch_size=4, epochs=1, plateau_window=0)


@pytest.fixture(scope="module")
def data():
    return make_dataset(8, 6, seed=11)


@pytest.fixture(scope="module")
def trained(data):
    train = to_arrays(data.train)
    cfg = replace(ONE, epochs=2, lr=1e-3)
    up, rep_up = train_upstream(train, ARCH, LINKS, LossWeights(), cfg)
    down, rep_down = train_downstream(train, up, ARCH, LINKS, LossWeights(), cfg)
    return up, down, rep_up, rep_down


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr, cfg.weight_decay, cfg.epochs) == (8, 2e-4, 1e-4, 60)
    assert (cfg.plateau_window, cfg.plateau_tol) == (10, 1e-3)


def test_zero_lr_keeps_theta(data):
    train = to_arrays(data.train)
    cfg = replace(ONE, lr=0.0)
    up, rep = train_upstream(train, ARCH, LINKS, LossWeights(), cfg)
    fresh = Upstream(ARCH, np.random.default_rng([cfg.seed, 0]), up.l_p)
    assert param_checksum(up) == param_checksum(fresh)
    assert rep.epochs == 1 and up.trained


def test_zero_lr_keeps_phi_psi(data, trained):
    up = trained[0]
    train = to_arrays(data.train)
    a, _ = train_downstream(train, up, ARCH, LINKS, LossWeights(), replace(ONE, lr=0.0))
    b, _ = train_downstream(train, up, ARCH, LINKS, LossWeights(), replace(ONE, epochs=1, lr=0.0, batch_size=8))
    assert param_checksum(a) == param_checksum(b)


def test_reports_are_reproducible(data, trained):
    up, down, rep_up, rep_down = trained
    train = to_arrays(data.train)
    cfg = replace(ONE, epochs=2, lr=1e-3)
    up2, rep2 = train_upstream(train, ARCH, LINKS, LossWeights(), cfg)
    down2, rep3 = train_downstream(train, up2, ARCH, LINKS, LossWeights(), cfg)
    assert rep2.history == rep_up.history and rep2.checksums == rep_up.checksums
    assert rep3.history == rep_down.history and param_checksum(down2) == param_checksum(down)


def test_history_length_matches_epochs(trained):
    _, _, rep_up, rep_down = trained
    assert rep_up.epochs == len(rep_up.wall_ms) == 2
    assert rep_down.epochs == 2


def test_theta_frozen_by_downstream(trained):
    up, _, rep_up, rep_down = trained
    assert rep_down.checksums["theta"] == rep_up.checksums["theta"] == param_checksum(up)


def test_aux_kept_only_in_report(trained):
    up, _, rep_up, _ = trained
    assert "aux" in rep_up.extra_state and "lambda" in rep_up.checksums
    assert not any(k.startswith("aux") for k in up.state_dict())


def test_untrained_theta_refused(data):
    fresh = Upstream(ARCH, np.random.default_rng(0), 4)
    with pytest.raises(ContractError):
        train_downstream(to_arrays(data.train), fresh, ARCH, LINKS, LossWeights(), ONE)
    with pytest.raises(ContractError):
        train_downstream(to_arrays(data.train), None, ARCH, LINKS, LossWeights(), ONE)


def test_divergence_aborts(data, monkeypatch):
    import edgesense.training as tr

    real = tr.vmib_upstream

    def poisoned(*a, **kw):
        total, bd = real(*a, **kw)
        return total, replace(bd, total=float("nan"))

    monkeypatch.setattr(tr, "vmib_upstream", poisoned)
    with pytest.raises(TrainingDivergedError, match="non-finite loss at epoch 1"):
        train_upstream(to_arrays(data.train), ARCH, LINKS, LossWeights(), ONE)


def test_fresh_noise_per_step(data):
    # with lr=0 the model is fixed, so differing batch losses can only come from new draws
    train = to_arrays(data.train)
    _, rep = train_upstream(replace(train, views=np.repeat(train.views[:1], 8, 0),
                                    seg=np.repeat(train.seg[:1], 8, 0), sal=np.repeat(train.sal[:1], 8, 0),
                                    cls=np.repeat(train.cls[:1], 8, 0)),
                            ARCH, LINKS, LossWeights(), replace(ONE, lr=0.0, batch_size=1, epochs=2))
    assert rep.history[0].total != rep.history[1].total


def _bd(total):
    return LossBreakdown(total, [total], 0.0, [1.0], 0.0)


def test_plateau_rule():
    flat = [_bd(1.0)] * 12
    assert _plateaued(flat, 10, 1e-3)
    falling = [_bd(1.0 - 0.01 * i) for i in range(12)]
    assert not _plateaued(falling, 10, 1e-3)
    assert not _plateaued(flat[:10], 10, 1e-3)
    assert not _plateaued(flat, 0, 1e-3)


def test_metrics_csv_columns(tmp_path, trained):
    _, _, rep_up, rep_down = trained
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [rep_up, rep_down])
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["phase", "epoch", "total_loss", "task0_loss", "task1_loss", "task2_loss",
                             "kl_term", "wall_ms"]
    assert [r["phase"] for r in rows] == ["upstream"] * 2 + ["downstream"] * 2


def test_evaluate_is_repeatable(data, trained):
    up, down = trained[:2]
    test = to_arrays(data.test)
    cfg = EvalConfig(uplink_snr_db=(0.0,), downlink_snr_db=(-5.0, 5.0), realizations=3)
    a, b = evaluate(test, up, down, LINKS, cfg), evaluate(test, up, down, LINKS, cfg)
    assert [r.values for r in a] == [r.values for r in b]
    assert len(a) == 2 * 3 and all(r.stderr >= 0 for r in a)


def test_predict_is_batch_invariant(data, trained):
    up, down = trained[:2]
    test = to_arrays(data.test)
    lk = replace(LINKS, downlink_snr_db=(0.0,))
    full = predict(test.views, np.arange(6), up, down, lk, seed=3)
    for i in (0, 4):
        one = predict(test.views[i:i + 1], [i], up, down, lk, seed=3)
        for m in range(3):
            assert one[m].tobytes() == full[m][i:i + 1].tobytes()
