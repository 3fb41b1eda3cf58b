"""Unimodal blocks vs merged, ensembled and fused models over several seeds.

    python scripts/merge_fuse_uplift.py --profile desk --seeds 0 1 2 3 4 --out runs/uplift.csv
"""

import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from mmlego.config import load_config
from mmlego.experiments import run_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--profile", default="desk", choices=("full", "desk"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/uplift.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.profile)
    rows = []
    for seed in args.seeds:
        seed_rows, art = run_seed(cfg, seed)
        rows += seed_rows
        steps = art["merge_report"]["gradient_steps"]
        print(f"seed {seed}: " + "  ".join(f"{r['model']}={r['metric']:.4f}" for r in seed_rows)
              + f"  (merge steps {steps})")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["seed", "model", "metric"])
        w.writeheader()
        w.writerows(rows)
    print(f"\n{'model':<18}{'mean':>8}{'std':>8}")
    for model in dict.fromkeys(r["model"] for r in rows):
        v = np.array([r["metric"] for r in rows if r["model"] == model])
        print(f"{model:<18}{v.mean():>8.4f}{v.std():>8.4f}")


if __name__ == "__main__":
    main()
