"""Train (or load) a Deep EDMD model, then run DE-MPC on the cruise reference for every horizon pair.

    python scripts/run_mpc.py --out results/mpc [--checkpoint results/desk/deep-edmd.zip]
"""
import argparse
import json
from pathlib import Path

from deepkoopman import experiments as ex
from deepkoopman.checkpoint import load_checkpoint
from deepkoopman.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "desk.yaml")
    ap.add_argument("--preset", choices=("desk", "paper"), default="desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--checkpoint", type=Path, default=None)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config, args.preset)
    if args.checkpoint:
        model, stats, _ = load_checkpoint(args.checkpoint)
    else:
        bundle = ex.make_bundle(ex.simulate_episodes(cfg, args.seed), args.seed)
        model, _ = ex.fit_model("deep-edmd", bundle, cfg, args.seed)
        stats = bundle.stats
    params = cfg.vehicle_params()
    max_np = max(n_p for n_p, _ in cfg.raw["mpc"]["horizons"])
    ref = ex.cruise_reference(cfg, params, extra=max_np).states
    summary = {}
    for (n_p, n_c), (lg, s) in ex.mpc_study(model, stats, cfg, ref, params, cfg.raw["train"]["tau"]).items():
        lg.to_csv(args.out / f"tracking_np{n_p}_nc{n_c}.csv")
        summary[f"{n_p}/{n_c}"] = s
        print(n_p, n_c, json.dumps(s))
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
