"""Command-line entry point: ``simulate``, ``train``, ``evaluate``, ``robustness``, ``mpc``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import experiments as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .config import MODEL_KINDS, load_config

log = logging.getLogger("deepkoopman")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_episodes(data_dir):
    files = sorted(Path(data_dir).glob("episode_*.csv"))
    if not files:
        raise FileNotFoundError(f"no episode_*.csv files in {data_dir}")
    return [ds.read_csv(f) for f in files]


def _episodes(args, cfg):
    if args.data:
        return _load_episodes(args.data)
    return ex.simulate_episodes(cfg, args.seed)


def cmd_simulate(args, cfg):
    out = Path(args.out) / "episodes"
    out.mkdir(parents=True, exist_ok=True)
    eps = ex.simulate_episodes(cfg, args.seed)
    manifest = {"seed": args.seed, "config": cfg.to_dict(), "files": {}}
    for i, ep in enumerate(eps):
        f = out / f"episode_{i:03d}.csv"
        ds.write_csv(ep, f)
        manifest["files"][f.name] = _sha256(f)
    digest = hashlib.sha256(json.dumps(manifest["files"], sort_keys=True).encode()).hexdigest()
    manifest["manifest_hash"] = digest
    _write_json(out / "manifest.json", manifest)
    summary = {"command": "simulate", "episodes": len(eps), "length": cfg.data["length"],
               "directory": str(out), "manifest_hash": digest}
    _write_json(Path(args.out) / "summary.json", summary)
    return summary


def cmd_train(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = args.model or cfg.model
    bundle = ex.make_bundle(_episodes(args, cfg), args.seed)
    t0 = time.perf_counter()
    model, hist = ex.fit_model(kind, bundle, cfg, args.seed)
    elapsed = time.perf_counter() - t0
    tau = cfg.raw["train"]["tau"]
    save_checkpoint(out / "checkpoint.zip", model, bundle.stats,
                    {"kind": kind, "tau": tau, "seed": args.seed, "config": cfg.to_dict()})
    bundle.stats.to_json(out / "stats.json")
    summary = {"command": "train", "model": kind, "seed": args.seed, "train_seconds": elapsed,
               "checkpoint": str(out / "checkpoint.zip")}
    if hist is not None:
        hist.to_csv(out / "history.csv")
        summary.update(initial_val=hist.val[0], final_val=hist.val[-1], batches=int(hist.batches[-1]),
                       stopped=hist.stopped)
    else:
        summary["residuals"] = model.residuals
    _write_json(out / "summary.json", summary)
    return summary


def _evaluate(model, meta, bundle, cfg, out, label):
    tau = meta.get("tau", cfg.raw["train"]["tau"])
    horizons = cfg.raw["evaluate"]["horizons"]
    rows = []
    for split in ("train", "test"):
        metrics = ex.horizon_metrics(model, bundle.norm(split), tau, horizons)
        for h, vals in metrics.items():
            for c, v in zip(ex.CHANNELS, vals):
                rows.append((label, split, h, c, float(v)))
    with (out / "metrics.csv").open("a" if (out / "metrics.csv").exists() else "w", newline="") as fh:
        w = csv.writer(fh)
        if fh.tell() == 0:
            w.writerow(("model", "split", "horizon", "channel", "rmse"))
        for r in rows:
            w.writerow((*r[:4], f"{r[4]:.17g}"))
    s, u = bundle.norm("test")[0]
    curve = ex.open_loop_curve(model, s, u, tau)
    with (out / f"rollout_{label}.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", *ex.CHANNELS))
        for k, e in enumerate(curve, start=1):
            w.writerow((k, *(f"{v:.17g}" for v in e)))
    return {f"{split}/{h}/{c}": v for _, split, h, c, v in rows}


def cmd_evaluate(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if (out / "metrics.csv").exists():
        (out / "metrics.csv").unlink()
    bundle = ex.make_bundle(_episodes(args, cfg), args.seed)
    summary = {"command": "evaluate", "seed": args.seed, "models": {}}
    checkpoints = args.checkpoint or []
    if not checkpoints:
        raise SystemExit("evaluate needs at least one --checkpoint")
    for ck in checkpoints:
        model, stats, meta = load_checkpoint(ck)
        bundle.stats = stats
        label = meta.get("kind", Path(ck).stem)
        summary["models"][label] = _evaluate(model, meta, bundle, cfg, out, label)
    _write_json(out / "summary.json", summary)
    return summary


def cmd_robustness(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = ex.make_bundle(_episodes(args, cfg), args.seed)
    repeats = args.repeats or cfg.raw["robustness"]["repeats"]
    summary = {"command": "robustness", "seed": args.seed, "repeats": repeats}
    with (out / "robustness.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("model", "channel", "mean_rmse", "variance"))
        for kind in ("deep-edmd", "mlp"):
            res, _ = ex.robustness_study(kind, bundle, cfg, args.seed, repeats)
            for c, m, v in zip(ex.CHANNELS, res.mean_error, res.variance):
                w.writerow((kind, c, f"{m:.17g}", f"{v:.17g}"))
            res.history.to_csv(out / f"history_{kind}.csv")
            np.savetxt(out / f"traces_{kind}.csv", res.traces.reshape(repeats, -1), delimiter=",", fmt="%.17g")
            summary[kind] = {"mean_rmse": res.mean_error.tolist(), "variance": res.variance.tolist(),
                             "final_train": float(res.history.train[-1]), "final_val": float(res.history.val[-1])}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_mpc(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.checkpoint:
        raise SystemExit("mpc needs --checkpoint")
    model, stats, meta = load_checkpoint(args.checkpoint[0])
    params = cfg.vehicle_params()
    tau = meta.get("tau", cfg.raw["train"]["tau"])
    max_np = max(n_p for n_p, _ in cfg.raw["mpc"]["horizons"])
    if cfg.raw["mpc"]["reference"] == "cruise":
        ref = ex.cruise_reference(cfg, params, extra=max_np).states
    else:
        ref = ex.make_bundle(_episodes(args, cfg), args.seed).test[0].states
    summary = {"command": "mpc", "seed": args.seed, "runs": {}}
    for (n_p, n_c), (lg, s) in ex.mpc_study(model, stats, cfg, ref, params, tau).items():
        lg.to_csv(out / f"tracking_np{n_p}_nc{n_c}.csv")
        summary["runs"][f"{n_p}/{n_c}"] = s
    _write_json(out / "summary.json", summary)
    return summary


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "robustness": cmd_robustness, "mpc": cmd_mpc}


def build_parser():
    ap = argparse.ArgumentParser(prog="deepkoopman", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="YAML overrides on top of the preset")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "evaluate", "robustness", "mpc"):
            p.add_argument("--data", type=Path, default=None, help="directory of episode CSVs (simulated if absent)")
        if name == "train":
            p.add_argument("--model", choices=MODEL_KINDS, default=None)
        if name in ("evaluate", "mpc"):
            p.add_argument("--checkpoint", type=Path, action="append")
        if name == "robustness":
            p.add_argument("--repeats", type=int, default=None)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset)
    except (ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    summary = COMMANDS[args.command](args, cfg)
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
