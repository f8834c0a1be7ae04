"""lambda x K grid for dann_cat on rotated two-moons, with the accuracy-vs-lambda curve.

Usage: python scripts/ablation_grid.py --out results/ablation [--seeds 0,1,2,3,4] [--jobs 4]
"""
import argparse
from pathlib import Path

import numpy as np

from cat_uda.train import RunConfig, run_ablation, write_ablation_csv

LAMBDAS = (0.1, 1.0, 5.0, 10.0)
KS = (1, 2, 5, 15)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--raw", action="store_true", help="unnormalised contrastive loss")
    args = ap.parse_args()
    base = RunConfig(a_distance_every=0, record_wall_ms=False, normalize_features=not args.raw)
    rows = run_ablation(base, LAMBDAS, KS, [int(s) for s in args.seeds.split(",")], jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(args.out / "ablation.csv", rows)
    print("| lambda | " + " | ".join(f"K={k}" for k in KS) + " | mean over K |")
    print("|---|" + "---|" * (len(KS) + 1))
    for lam in LAMBDAS:
        cells = [r for r in rows if r.lam == lam]
        accs = " | ".join(f"{r.mean_target_acc:.3f} +- {r.std_target_acc:.3f}" for r in cells)
        print(f"| {lam:g} | {accs} | {np.mean([r.mean_target_acc for r in cells]):.3f} |")


if __name__ == "__main__":
    main()
