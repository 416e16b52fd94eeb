"""Repeated predictions with a per-batch random hidden layer, Deep EDMD against the MLP.

    python scripts/run_robustness.py --out results/robustness [--repeats 20]
"""
import argparse
import sys

from deepkoopman import cli

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", default=None)
    ap.add_argument("--preset", choices=("desk", "paper"), default="desk")
    ap.add_argument("--seed", default="0")
    ap.add_argument("--repeats", default=None)
    a = ap.parse_args()
    argv = ["robustness", "--out", a.out, "--preset", a.preset, "--seed", a.seed, "-v"]
    argv += ["--config", a.config] if a.config else []
    argv += ["--repeats", a.repeats] if a.repeats else []
    sys.exit(cli.main(argv))
