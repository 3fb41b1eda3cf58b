"""Merged-model AUC as the fraction of paired training samples shrinks.

    python scripts/overlap_sweep.py --rhos 0 0.25 0.5 0.75 1 --seeds 0 1 2
"""

import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from mmlego.config import load_config
from mmlego.experiments import overlap_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--profile", default="desk", choices=("full", "desk"))
    ap.add_argument("--rhos", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/overlap.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rows = overlap_sweep(load_config(args.config, args.profile), args.rhos, args.seeds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["rho", "seed", "model", "metric"])
        w.writeheader()
        w.writerows(rows)

    models = list(dict.fromkeys(r["model"] for r in rows))
    print("rho   " + "".join(f"{m:>12}" for m in models))
    for rho in args.rhos:
        means = [np.mean([r["metric"] for r in rows if r["rho"] == rho and r["model"] == m])
                 for m in models]
        print(f"{rho:<6.2f}" + "".join(f"{v:>12.4f}" for v in means))


if __name__ == "__main__":
    main()
