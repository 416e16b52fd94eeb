"""Train Deep EDMD, the MLP baseline and plain EDMD on desk-scale data and compare them.

Writes training histories, per-horizon RMSE tables and a JSON summary.

    python scripts/run_desk_comparison.py --out results/desk [--config configs/desk.yaml] [--seed 0]
"""
import argparse
import csv
import json
import time
from pathlib import Path

from deepkoopman import experiments as ex
from deepkoopman.checkpoint import save_checkpoint
from deepkoopman.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "desk.yaml")
    ap.add_argument("--preset", choices=("desk", "paper"), default="desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config, args.preset)
    bundle = ex.make_bundle(ex.simulate_episodes(cfg, args.seed), args.seed)
    tau = cfg.raw["train"]["tau"]
    horizons = cfg.raw["evaluate"]["horizons"]
    summary = {}
    with (args.out / "horizon_rmse.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("model", "horizon", *ex.CHANNELS))
        for kind in ("edmd", "elm-edmd", "deep-edmd", "mlp"):
            t0 = time.perf_counter()
            model, hist = ex.fit_model(kind, bundle, cfg, args.seed)
            entry = {"seconds": time.perf_counter() - t0}
            save_checkpoint(args.out / f"{kind}.zip", model, bundle.stats, {"kind": kind, "tau": tau})
            if hist is not None:
                hist.to_csv(args.out / f"history_{kind}.csv")
                entry.update(initial_val=float(hist.val[0]), final_val=float(hist.val[-1]))
            metrics = ex.horizon_metrics(model, bundle.norm("test"), tau, horizons)
            for h, vals in metrics.items():
                w.writerow((kind, h, *(f"{v:.17g}" for v in vals)))
            entry["rmse"] = {str(h): v.tolist() for h, v in metrics.items()}
            summary[kind] = entry
            print(kind, json.dumps(entry))
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
