"""Command line entry point: ``edgesense <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .checkpoints import Bundle, load_bundle, save_bundle
from .config import ExperimentConfig, load_config
from .experiments import BENCH_KINDS, fit_downstream, fit_upstream, load_data, run_bench
from .metrics import task_metric
from .netio import EdgeService, Topology, run_sd_client, run_user_client
from .training import evaluate, write_metrics_csv

log = logging.getLogger("edgesense")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _bundle(args, cfg: ExperimentConfig, need_up: bool = True, need_down: bool = False) -> Bundle:
    if not args.checkpoint:
        raise SystemExit("--checkpoint is required")
    bundle = load_bundle(args.checkpoint, cfg.arch_config())
    if need_up and bundle.up is None:
        raise SystemExit(f"{args.checkpoint} holds no device encoders")
    if need_down and bundle.down is None:
        raise SystemExit(f"{args.checkpoint} holds no edge encoder or decoders")
    return bundle


def _topology(args, cfg: ExperimentConfig) -> tuple[Topology, dict]:
    raw = dict(cfg.topology or {})
    if args.topology:
        raw.update(yaml.safe_load(Path(args.topology).read_text()) or {})
    extra = {k: raw.pop(k) for k in ("n_samples",) if k in raw}
    if not raw.get("users"):
        raise SystemExit("topology needs a users list (config 'topology' section or --topology file)")
    return Topology(**raw), extra


# ---------------------------------------------------------------- training

def cmd_train_upstream(args) -> int:
    cfg = _config(args)
    up, report = fit_upstream(cfg, load_data(cfg, args.dataset))
    save_bundle(args.out, Bundle(up=up, aux=report.extra_state.get("aux")))
    if args.metrics:
        write_metrics_csv(args.metrics, [report])
    log.info("upstream: %d epochs, final loss %.5f", report.epochs, report.history[-1].total)
    return 0


def cmd_train_downstream(args) -> int:
    cfg = _config(args)
    bundle = _bundle(args, cfg)
    down, report = fit_downstream(cfg, load_data(cfg, args.dataset), bundle.up)
    save_bundle(args.out, Bundle(up=bundle.up, down=down))
    if args.metrics:
        write_metrics_csv(args.metrics, [report])
    log.info("downstream: %d epochs, final loss %.5f", report.epochs, report.history[-1].total)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    bundle = _bundle(args, cfg, need_down=True)
    rows = evaluate(load_data(cfg, args.dataset).test, bundle.up, bundle.down, cfg.links, cfg.eval)
    fields = ["uplink_snr_db", "downlink_snr_db", "user", "kind", "metric", "stderr"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(fields)
        for r in rows:
            w.writerow([getattr(r, f) for f in fields])
    finally:
        if args.out:
            out.close()
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    bundle = _bundle(args, cfg) if args.checkpoint else None
    seed = args.seed if args.seed is not None else cfg.train.seed
    rows = run_bench(args.kind, cfg, seed, args.out or "results", load_data(cfg, args.dataset), bundle)
    log.info("bench %s: %d rows written to %s", args.kind, len(rows), args.out or "results")
    return 0


# ---------------------------------------------------------------- deployment

def cmd_serve_es(args) -> int:
    cfg = _config(args)
    bundle = _bundle(args, cfg, need_down=True)
    topo, _ = _topology(args, cfg)
    service = EdgeService(bundle.up, bundle.down, topo)
    print(f"listening on {topo.host}:{service.port}", flush=True)
    report = service.serve()
    summary = {"samples": len({sid for sid, _ in report.results}), "dropped": report.dropped}
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True))
    log.info("edge service done: %s", summary)
    return 0


def cmd_run_sd(args) -> int:
    cfg = _config(args)
    bundle = _bundle(args, cfg)
    topo, extra = _topology(args, cfg)
    test = load_data(cfg, args.dataset).test
    n = int(extra.get("n_samples", len(test)))
    try:
        sent = run_sd_client(args.id, [(i, test.views[i, args.id]) for i in range(n)], bundle.up, topo)
    except ConnectionError as exc:
        log.error("%s", exc)
        return 2
    log.info("device %d sent %d features", args.id, sent)
    return 0


def cmd_run_user(args) -> int:
    cfg = _config(args)
    bundle = _bundle(args, cfg, need_up=False, need_down=True)
    topo, _ = _topology(args, cfg)
    test = load_data(cfg, args.dataset).test
    dec = bundle.down.decoders[args.id]
    try:
        results = run_user_client(args.id, dec, topo, lambda sid: test.labels(dec.task.kind, sid))
    except ConnectionError as exc:
        log.error("%s", exc)
        return 2
    if args.metrics:
        with open(args.metrics, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "user", "metric"])
            w.writerows([r.sample_id, r.user_id, r.metric] for r in results)
    if args.out:
        t = dec.task
        summary = {"user": args.id, "kind": t.kind, "samples": len(results)}
        if results:
            # dataset-level metric over the received labels, same definition as evaluate
            pred = np.stack([r.labels.reshape(t.out_shape[-2:] if t.kind != "classification" else ())
                             for r in results]).astype(np.int64)
            gt = np.stack([test.labels(t.kind, r.sample_id) for r in results])
            summary["metric"] = task_metric(pred, gt, t.kind, t.num_classes)
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True))
    log.info("user %d decoded %d samples", args.id, len(results))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgesense", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--dataset", help="load scenes from a dataset dump instead of generating them")
        if checkpoint:
            sp.add_argument("--checkpoint", help="parameter checkpoint to load")
        return sp

    sp = common(sub.add_parser("train-upstream", help="fit device encoders"))
    sp.add_argument("--out", required=True, help="checkpoint to write")
    sp.add_argument("--metrics", help="per-epoch CSV")
    sp.set_defaults(fn=cmd_train_upstream)

    sp = common(sub.add_parser("train-downstream", help="fit edge encoder and user decoders"), True)
    sp.add_argument("--out", required=True, help="checkpoint to write")
    sp.add_argument("--metrics", help="per-epoch CSV")
    sp.set_defaults(fn=cmd_train_downstream)

    sp = common(sub.add_parser("evaluate", help="metrics over the configured SNR grid"), True)
    sp.add_argument("--out", help="CSV path (stdout if omitted)")
    sp.set_defaults(fn=cmd_evaluate)

    sp = common(sub.add_parser("bench", help="benchmark tables"), True)
    sp.add_argument("kind", choices=BENCH_KINDS)
    sp.add_argument("--out", help="output directory (default ./results)")
    sp.set_defaults(fn=cmd_bench)

    for name, fn, helptext in (("serve-es", cmd_serve_es, "run the edge service"),
                               ("run-sd", cmd_run_sd, "run one sensing-device client"),
                               ("run-user", cmd_run_user, "run one user client")):
        sp = common(sub.add_parser(name, help=helptext), True)
        sp.add_argument("--topology", help="YAML/JSON topology file (overrides the config section)")
        if name != "serve-es":
            sp.add_argument("--id", type=int, required=True)
        sp.add_argument("--out", help="summary file")
        sp.add_argument("--metrics", help="per-sample result CSV")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
