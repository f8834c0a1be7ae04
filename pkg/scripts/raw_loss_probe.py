"""Trace the contrastive term with and without unit normalisation for one seed.

Usage: python scripts/raw_loss_probe.py [--lam 1.0] [--seed 0]
"""
import argparse

from cat_uda.train import RunConfig, fit


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lam", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()
    print("normalize epoch l_con target_acc")
    for normalize in (False, True):
        cfg = RunConfig(lam=args.lam, seed=args.seed, epochs=args.epochs, normalize_features=normalize,
                        a_distance_every=0, record_wall_ms=False)
        for r in fit(cfg).records[::10]:
            print(f"{normalize!s:9} {r.epoch:5d} {r.l_con:12.4g} {r.target_acc:.4f}")


if __name__ == "__main__":
    main()
