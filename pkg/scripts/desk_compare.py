"""Source-only vs DANN vs DANN+CAT (and the KL baseline) on rotated two-moons.

Usage: python scripts/desk_compare.py --out results/compare [--seeds 0,1,2,3,4] [--jobs 4]
"""
import argparse
import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from cat_uda.train import RunConfig, fit

# best cell of the lambda x K grid on this task (see results table in the README)
TUNED = {"lam": 10.0, "K": 1}


def configs(seeds, tuned=True):
    base = RunConfig(record_wall_ms=False)
    cat = replace(base, mode="dann_cat", **(TUNED if tuned else {}))
    out = []
    for seed in seeds:
        out += [("source_only", replace(base, mode="source_only", seed=seed)),
                ("dann", replace(base, mode="dann", seed=seed)),
                ("dann_cat", replace(cat, seed=seed)),
                ("dann_kld", replace(base, mode="dann_kld", seed=seed))]
    return out


def run(item):
    name, cfg = item
    rec = fit(cfg).records[-1]
    return {"mode": name, "seed": cfg.seed, "lambda": cfg.lam, "K": cfg.K,
            "target_acc": rec.target_acc, "source_acc": rec.source_acc, "a_distance": rec.a_distance}


def summarize(rows):
    table = {}
    for mode in dict.fromkeys(r["mode"] for r in rows):
        sub = [r for r in rows if r["mode"] == mode]
        acc = np.array([r["target_acc"] for r in sub])
        ad = np.array([r["a_distance"] for r in sub])
        table[mode] = {"mean_target_acc": float(acc.mean()), "std_target_acc": float(acc.std()),
                       "mean_a_distance": float(ad.mean()), "n_seeds": len(sub)}
    return table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--default-cat", action="store_true", help="use lambda=1, K=5 instead of the tuned cell")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    items = configs(seeds, tuned=not args.default_cat)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(run, items))
    else:
        rows = [run(i) for i in items]
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    table = summarize(rows)
    (args.out / "summary.json").write_text(json.dumps(table, indent=1))
    print("| mode | mean target acc | std | mean A-distance |")
    print("|---|---|---|---|")
    for mode, t in table.items():
        print(f"| {mode} | {t['mean_target_acc']:.4f} | {t['std_target_acc']:.4f} | {t['mean_a_distance']:.3f} |")


if __name__ == "__main__":
    main()
