"""Command-line entry point: ``cat-uda {train,ablate,adistance,export-embeddings,gen-data}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import LabeledDataset, make_rng, read_csv, write_csv
from .models import classify, extract_features, load_checkpoint, predict, save_checkpoint
from .numcore import ConfigError, DataError, DimensionError
from .train import (NonFiniteLossError, RunConfig, a_distance, build_datasets, derive_seed, fit, run_ablation,
                    run_summary, write_ablation_csv, write_metrics_csv)

log = logging.getLogger("cat_uda")

VERBS = ("train", "ablate", "adistance", "export-embeddings", "gen-data")
GRID_LAMBDAS = (0.1, 1.0, 5.0, 10.0)
GRID_KS = (1, 2, 5, 15)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {part} is not an object")
    node[parts[-1]] = _parse_value(value)


def parse_config(path=None, overrides=()) -> RunConfig:
    """Load a JSON config (or defaults when ``path`` is None), apply ``key=value`` overrides, validate."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: malformed JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
    for o in overrides:
        apply_override(doc, o)
    return RunConfig.from_dict(doc)


def _prepare_out(out: Path, names, force: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise FileExistsError(f"{out} already holds {', '.join(clash)}; pass --force to overwrite")


def cmd_train(cfg: RunConfig, out: Path, force: bool = False) -> int:
    out = Path(out)
    _prepare_out(out, ("metrics.csv", "summary.json", "checkpoint.json"), force)
    try:
        result = fit(cfg)
    except NonFiniteLossError as exc:
        dump = out / "diagnostic.json"
        dump.write_text(json.dumps({"step": exc.step, "breakdown": exc.breakdown, "config": cfg.to_dict()},
                                   indent=1, default=str))
        print(f"training aborted: {exc}; diagnostics in {dump}", file=sys.stderr)
        return 2
    write_metrics_csv(out / "metrics.csv", result.records)
    (out / "summary.json").write_text(json.dumps(run_summary(cfg, result.records), indent=1))
    save_checkpoint(result.params, out / "checkpoint.json", {"config": cfg.to_dict()})
    final = result.records[-1]
    print(f"epoch {final.epoch}: source_acc={final.source_acc:.4f} target_acc={final.target_acc:.4f}")
    return 0


def cmd_ablate(cfg: RunConfig, lambdas, Ks, seeds, out: Path, jobs: int = 1, force: bool = False) -> int:
    out = Path(out)
    _prepare_out(out, ("ablation.csv",), force)
    rows = run_ablation(cfg, lambdas, Ks, seeds, jobs=jobs)
    rows.sort(key=lambda r: (r.lam, r.K))
    write_ablation_csv(out / "ablation.csv", rows)
    for r in rows:
        print(f"lambda={r.lam:g} K={r.K}: {r.mean_target_acc:.4f} +- {r.std_target_acc:.4f} ({r.status})")
    return 1 if all(r.n_seeds == 0 for r in rows) else 0


def _checkpoint_and_data(cfg: RunConfig, checkpoint, data):
    params = load_checkpoint(checkpoint)
    if data is not None:
        sets = read_csv(data)
        if "source" not in sets or "target" not in sets:
            raise DataError(f"{data}: needs both source and target rows")
        source, target = sets["source"], sets["target"]
    else:
        source, target = build_datasets(cfg)
    if source.d_in != params.spec_g.d_in:
        raise ConfigError(f"checkpoint expects inputs of dim {params.spec_g.d_in}, dataset has {source.d_in}")
    return params, source, target


def cmd_adistance(cfg: RunConfig, checkpoint, out: Path, data=None, force: bool = False) -> int:
    out = Path(out)
    _prepare_out(out, ("adistance.json",), force)
    params, source, target = _checkpoint_and_data(cfg, checkpoint, data)
    dist = a_distance(extract_features(params, source.x).data, extract_features(params, target.x).data,
                      seed=derive_seed(cfg.seed, 200))
    (out / "adistance.json").write_text(json.dumps({"a_distance": dist, "checkpoint": str(checkpoint)}, indent=1))
    print(f"A-distance: {dist:.4f}")
    return 0


def sample_per_class(ds: LabeledDataset, per_class: int, rng: np.random.Generator) -> np.ndarray:
    idx = []
    for c in np.unique(ds.y):
        members = np.flatnonzero(ds.y == c)
        take = min(per_class, len(members))
        idx.append(np.sort(rng.choice(members, size=take, replace=False)))
    return np.concatenate(idx)


def cmd_export_embeddings(cfg: RunConfig, checkpoint, out: Path, per_class: int = 300, data=None,
                          force: bool = False) -> int:
    out = Path(out)
    _prepare_out(out, ("embeddings.csv",), force)
    try:
        params, source, target = _checkpoint_and_data(cfg, checkpoint, data)
    except DimensionError as exc:
        raise ConfigError(str(exc)) from None
    rng = make_rng(derive_seed(cfg.seed, 300))
    d_z = params.spec_g.d_out
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z{i}" for i in range(d_z)] + ["domain", "label", "pred"])
        for ds in (source, target):
            idx = sample_per_class(ds, per_class, rng)
            z = extract_features(params, ds.x[idx]).data
            pred = predict(classify(params, z).data)
            for row, label, p in zip(z, ds.y[idx], pred):
                w.writerow([repr(float(v)) for v in row] + [ds.domain_tag, int(label), int(p)])
    return 0


def cmd_gen_data(cfg: RunConfig, out: Path, force: bool = False) -> int:
    out = Path(out)
    _prepare_out(out, ("data.csv",), force)
    source, target = build_datasets(cfg)
    write_csv(out / "data.csv", [source, target])
    return 0


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cat-uda", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run config; defaults are used when omitted")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value by dotted key (repeatable)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    common(sub.add_parser("train", help="run one training job"))
    p = common(sub.add_parser("ablate", help="lambda x K grid over several seeds"))
    p.add_argument("--lambdas", type=_floats, default=list(GRID_LAMBDAS))
    p.add_argument("--ks", type=_ints, default=list(GRID_KS))
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p.add_argument("--jobs", type=int, default=1)
    p = common(sub.add_parser("adistance", help="A-distance between source and target features of a checkpoint"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="CSV from gen-data; otherwise regenerated from the config")
    p = common(sub.add_parser("export-embeddings", help="write per-sample features for external projection"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--per-class", type=int, default=300)
    common(sub.add_parser("gen-data", help="write the configured source/target datasets as CSV"))
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CAT_UDA_LOG", "error").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = parse_config(args.config, overrides)
        if args.verb == "train":
            return cmd_train(cfg, args.out, args.force)
        if args.verb == "ablate":
            return cmd_ablate(cfg, args.lambdas, args.ks, args.seeds, args.out, args.jobs, args.force)
        if args.verb == "adistance":
            return cmd_adistance(cfg, args.checkpoint, args.out, args.data, args.force)
        if args.verb == "export-embeddings":
            return cmd_export_embeddings(cfg, args.checkpoint, args.out, args.per_class, args.data, args.force)
        return cmd_gen_data(cfg, args.out, args.force)
    except (ConfigError, DataError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
