"""Adversarial training loop with the optional contrastive plug-in, evaluation and ablations."""
from __future__ import annotations

import csv
import logging
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as nc
from .bank import FeatureBank, build_set_ids, init_bank, update
from .data import BatchSampler, LabeledDataset, gen_blobs, gen_two_moons, make_rng, shift_domain
from .losses import (LossBreakdown, contrastive_loss_arrays, cross_entropy, domain_adversarial_loss,
                     kld_alignment_loss, total_loss)
from .models import (MlpSpec, ModelParams, classify, default_specs, discriminate, extract_features, init_params,
                     mlp, predict, xavier_layers)
from .numcore import ConfigError, PreconditionError, Tensor

log = logging.getLogger(__name__)

MODES = ("source_only", "dann", "dann_cat", "dann_kld")
GRL_KINDS = ("constant", "dann_ramp")
DATASET_KINDS = ("two_moons", "blobs")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, breakdown: dict, step: int | None = None):
        self.breakdown = breakdown
        self.step = step
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


@dataclass
class GrlConfig:
    kind: str = "dann_ramp"
    mu: float = 1.0


@dataclass
class DatasetConfig:
    kind: str = "two_moons"
    n: int = 2000
    noise_sd: float = 0.1
    rotation_deg: float = 30.0
    translate: list[float] = field(default_factory=lambda: [0.0, 0.0])
    # blobs only
    n_classes: int = 3
    blob_sd: float = 0.5


@dataclass
class ArchConfig:
    d_z: int = 16
    g_hidden: list[int] = field(default_factory=lambda: [64, 64])
    d_hidden: list[int] = field(default_factory=lambda: [32])


@dataclass
class RunConfig:
    mode: str = "dann_cat"
    lam: float = 1.0
    K: int = 5
    batch_size: int = 32
    epochs: int = 50
    lr: float = 0.002
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    grl_schedule: GrlConfig = field(default_factory=GrlConfig)
    bank_momentum: float = 0.0
    seed: int = 0
    normalize_features: bool = True
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    a_distance_every: int = 10
    record_wall_ms: bool = True

    def __post_init__(self):
        if isinstance(self.grl_schedule, dict):
            self.grl_schedule = GrlConfig(**self.grl_schedule)
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig(**self.dataset)
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        if self.mode == "source_only":
            self.lam = 0.0
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}")

        if self.mode not in MODES:
            bad("mode", f"must be one of {MODES}, got {self.mode!r}")
        if not self.lam >= 0:
            bad("lambda", f"must be >= 0, got {self.lam}")
        if self.K < 1:
            bad("K", f"must be >= 1, got {self.K}")
        if self.batch_size < 1:
            bad("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            bad("epochs", f"must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            bad("lr", f"must be > 0, got {self.lr}")
        if not 0 <= self.sgd_momentum < 1:
            bad("sgd_momentum", f"must lie in [0, 1), got {self.sgd_momentum}")
        if self.weight_decay < 0:
            bad("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if not self.clip_norm > 0:
            bad("clip_norm", f"must be > 0, got {self.clip_norm}")
        if self.grl_schedule.kind not in GRL_KINDS:
            bad("grl_schedule.kind", f"must be one of {GRL_KINDS}, got {self.grl_schedule.kind!r}")
        if self.grl_schedule.mu < 0:
            bad("grl_schedule.mu", f"must be >= 0, got {self.grl_schedule.mu}")
        if not 0 <= self.bank_momentum <= 1:
            bad("bank_momentum", f"must lie in [0, 1], got {self.bank_momentum}")
        if self.seed < 0:
            bad("seed", f"must be >= 0, got {self.seed}")
        ds = self.dataset
        if ds.kind not in DATASET_KINDS:
            bad("dataset.kind", f"must be one of {DATASET_KINDS}, got {ds.kind!r}")
        if ds.n < 2 or (ds.kind == "two_moons" and ds.n % 2):
            bad("dataset.n", f"must be an even number >= 2 for two_moons, got {ds.n}")
        if ds.noise_sd < 0:
            bad("dataset.noise_sd", f"must be >= 0, got {ds.noise_sd}")
        if len(ds.translate) != 2:
            bad("dataset.translate", f"must have 2 entries, got {ds.translate}")
        if ds.kind == "blobs" and ds.n_classes < 2:
            bad("dataset.n_classes", f"must be >= 2, got {ds.n_classes}")
        if ds.kind == "blobs" and not ds.blob_sd > 0:
            bad("dataset.blob_sd", f"must be > 0, got {ds.blob_sd}")
        if self.arch.d_z < 1:
            bad("arch.d_z", f"must be >= 1, got {self.arch.d_z}")
        if self.K > ds.n:
            bad("K", f"must be <= bank size {ds.n}, got {self.K}")
        if self.batch_size > ds.n:
            bad("batch_size", f"must be <= dataset size {ds.n}, got {self.batch_size}")
        if self.a_distance_every < 0:
            bad("a_distance_every", f"must be >= 0, got {self.a_distance_every}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Strict: unknown keys raise, naming the dotted path."""
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        nested = {"grl_schedule": GrlConfig, "dataset": DatasetConfig, "arch": ArchConfig}
        _reject_unknown(d, cls, "")
        kwargs = {}
        for k, v in d.items():
            if k in nested:
                if not isinstance(v, dict):
                    raise ConfigError(f"{k}: expected an object, got {type(v).__name__}")
                _reject_unknown(v, nested[k], f"{k}.")
                v = nested[k](**{kk: _coerce(nested[k], kk, vv, f"{k}.{kk}") for kk, vv in v.items()})
            else:
                v = _coerce(cls, k, v, "lambda" if k == "lam" else k)
            kwargs[k] = v
        return cls(**kwargs)


def _reject_unknown(d: dict, cls, prefix: str) -> None:
    known = {f.name for f in fields(cls)}
    for k in d:
        if k not in known:
            shown = "lambda" if k == "lam" else k
            raise ConfigError(f"{prefix}{shown}: unknown config key")


def _coerce(cls, name: str, value, path: str):
    default = getattr(cls(), name)
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
        if isinstance(default, list):
            if not isinstance(value, list):
                raise TypeError
            return [type(default[0])(v) if default else v for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}") from None
    return value



@dataclass
class MetricsRecord:
    epoch: int
    l_cls: float
    l_d: float
    l_con: float
    total: float
    source_acc: float
    target_acc: float
    a_distance: float | None = None
    wall_ms: int = 0


METRICS_HEADER = ["epoch", "l_cls", "l_d", "l_con", "total", "source_acc", "target_acc", "a_distance", "wall_ms"]


# schedule -----------------------------------------------------------------------

def grl_schedule(kind, p: float) -> float:
    """GRL coefficient at training progress ``p``. ``kind`` is a GrlConfig, 'dann_ramp' or a constant."""
    if not 0.0 <= p <= 1.0:
        log.warning("GRL schedule progress %s outside [0, 1]; clamping", p)
        p = min(max(p, 0.0), 1.0)
    if isinstance(kind, GrlConfig):
        kind, mu = kind.kind, kind.mu
    elif isinstance(kind, (int, float)):
        kind, mu = "constant", float(kind)
    else:
        mu = 1.0
    if kind == "constant":
        return mu
    if kind == "dann_ramp":
        return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0
    raise ConfigError(f"unknown GRL schedule {kind!r}")


# datasets -------------------------------------------------------------------------

def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0])


def build_datasets(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    ds = cfg.dataset
    if ds.kind == "two_moons":
        src = gen_two_moons(ds.n, ds.noise_sd, derive_seed(cfg.seed, 1))
        tgt = gen_two_moons(ds.n, ds.noise_sd, derive_seed(cfg.seed, 2))
    else:
        angles = 2 * np.pi * np.arange(ds.n_classes) / ds.n_classes
        centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        per = ds.n // ds.n_classes
        src = gen_blobs(ds.n_classes, per, centers, ds.blob_sd, derive_seed(cfg.seed, 1))
        tgt = gen_blobs(ds.n_classes, per, centers, ds.blob_sd, derive_seed(cfg.seed, 2))
    tgt = shift_domain(tgt, ds.rotation_deg, ds.translate, domain_tag="target")
    return src, tgt


def model_specs(cfg: RunConfig, d_in: int, n_classes: int) -> tuple[MlpSpec, MlpSpec, MlpSpec]:
    return default_specs(d_in, n_classes, cfg.arch.d_z, tuple(cfg.arch.g_hidden), tuple(cfg.arch.d_hidden))


# optimisation ---------------------------------------------------------------------

class SGD:
    """Heavy-ball SGD (``v = m v + g; p -= lr v``) with per-network gradient clipping."""

    def __init__(self, params: ModelParams, lr: float, momentum: float, weight_decay: float, clip_norm: float):
        self.lr, self.momentum, self.weight_decay, self.clip_norm = lr, momentum, weight_decay, clip_norm
        self.velocity = {name: [(np.zeros_like(W), np.zeros_like(b)) for W, b in params.group(name)]
                         for name in ModelParams.GROUPS}

    def step(self, params: ModelParams, grads: dict[str, list[tuple[np.ndarray, np.ndarray]]]) -> None:
        for name, group_grads in grads.items():
            flat = [g for pair in group_grads for g in pair]
            gnorm = math.sqrt(sum(float(np.vdot(g, g)) for g in flat))
            scale = self.clip_norm / gnorm if gnorm > self.clip_norm else 1.0
            for (W, b), (gW, gb), (vW, vb) in zip(params.group(name), group_grads, self.velocity[name]):
                for p, g, v in ((W, gW, vW), (b, gb, vb)):
                    if scale != 1.0:
                        g = g * scale
                    if self.weight_decay:
                        g = g + self.weight_decay * p
                    v *= self.momentum
                    v += g
                    p -= self.lr * v


def _leaves(layers):
    return [(Tensor(W, requires_grad=True), Tensor(b, requires_grad=True)) for W, b in layers]


def _grads(leaves):
    return [(W.grad if W.grad is not None else np.zeros_like(W.data),
             b.grad if b.grad is not None else np.zeros_like(b.data)) for W, b in leaves]


def forward_losses(params: ModelParams, bank: FeatureBank | None, xs, ys, xt, cfg: RunConfig, mu: float,
                   layers=None):
    """Build the loss graph for one batch.

    Returns ``(total, breakdown, z_t)`` where ``total`` is the Tensor to
    differentiate and ``z_t`` the target features (None for source_only).
    """
    g_layers, f_layers, d_layers = layers or (params.theta_g, params.theta_f, params.theta_d)
    z_s = extract_features(params, xs, g_layers)
    l_cls = cross_entropy(classify(params, z_s, f_layers), ys)
    total = l_cls
    l_d = l_con = None
    z_t = None
    if cfg.mode != "source_only":
        z_t = extract_features(params, xt, g_layers)
        d_src = discriminate(params, nc.grl_forward(z_s, mu), d_layers)
        d_tgt = discriminate(params, nc.grl_forward(z_t, mu), d_layers)
        l_d = domain_adversarial_loss(d_src, d_tgt)
        total = nc.add(total, l_d)
    if cfg.mode == "dann_cat":
        close_ids, distant_ids = build_set_ids(bank, z_s.data, cfg.K)
        l_con = contrastive_loss_arrays(z_s, bank.feats[close_ids], bank.feats[distant_ids],
                                        cfg.normalize_features)
    elif cfg.mode == "dann_kld":
        l_con = kld_alignment_loss(z_s, z_t)
    # with lambda == 0 the alignment term stays off the graph, so the update equals the host method's
    if l_con is not None and cfg.lam > 0:
        total = nc.add(total, nc.mul(l_con, cfg.lam))
    breakdown = total_loss(l_cls.item(), l_d.item() if l_d is not None else 0.0,
                           l_con.item() if l_con is not None else 0.0, cfg.lam)
    return total, breakdown, z_t


def train_step(params: ModelParams, bank: FeatureBank | None, batch, cfg: RunConfig, mu: float,
               opt: SGD, step: int | None = None) -> tuple[ModelParams, FeatureBank | None, LossBreakdown]:
    """One adversarial (plus contrastive) update; modifies ``params``, ``opt`` and ``bank`` in place."""
    leaves = tuple(_leaves(params.group(n)) for n in ModelParams.GROUPS)
    total, breakdown, z_t = forward_losses(params, bank, batch.xs, batch.ys, batch.xt, cfg, mu, leaves)
    if not all(math.isfinite(v) for v in breakdown.as_dict().values()):
        raise NonFiniteLossError(breakdown.as_dict(), step)
    total.backward()
    # networks outside the graph (the discriminator in source_only) are left untouched, weight decay included
    opt.step(params, {n: _grads(l) for n, l in zip(ModelParams.GROUPS, leaves)
                      if any(t.grad is not None for pair in l for t in pair)})
    if bank is not None and z_t is not None:
        update(bank, batch.target_ids, z_t.data.copy(), cfg.bank_momentum)
    return params, bank, breakdown


# evaluation -----------------------------------------------------------------------

def evaluate(params: ModelParams, ds: LabeledDataset) -> float:
    logits = classify(params, extract_features(params, ds.x)).data
    return float(np.mean(predict(logits) == ds.y))


def a_distance_from_error(eps: float) -> float:
    return max(0.0, 2.0 * (1.0 - 2.0 * eps))


def a_distance(feats_s, feats_t, seed: int = 0, epochs: int = 10, lr: float = 0.01, hidden: int = 32,
               batch_size: int = 32) -> float:
    """Proxy A-distance from the held-out error of a fresh source-vs-target MLP."""
    feats_s = np.asarray(feats_s, dtype=np.float64)
    feats_t = np.asarray(feats_t, dtype=np.float64)
    if len(feats_s) < 20 or len(feats_t) < 20:
        raise PreconditionError(f"A-distance needs >= 20 samples per domain, got {len(feats_s)}, {len(feats_t)}")
    rng = make_rng(seed)
    ps, pt = rng.permutation(len(feats_s)), rng.permutation(len(feats_t))
    hs, ht = len(ps) // 2, len(pt) // 2
    x_train = np.concatenate([feats_s[ps[:hs]], feats_t[pt[:ht]]])
    y_train = np.concatenate([np.ones(hs), np.zeros(ht)])
    x_test = np.concatenate([feats_s[ps[hs:]], feats_t[pt[ht:]]])
    y_test = np.concatenate([np.ones(len(ps) - hs), np.zeros(len(pt) - ht)])
    mu_, sd = x_train.mean(axis=0), x_train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    x_train, x_test = (x_train - mu_) / sd, (x_test - mu_) / sd

    spec = MlpSpec((x_train.shape[1], hidden, 1), "relu", "sigmoid")
    layers = xavier_layers(spec, rng)
    velocity = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
    for _ in range(epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            leaves = _leaves(layers)
            prob = nc.clamp(nc.sigmoid(mlp(Tensor(x_train[idx]), leaves)), 1e-7, 1 - 1e-7)
            y = y_train[idx][:, None]
            bce = nc.mul(nc.mean(nc.add(nc.mul(nc.log(prob), y), nc.mul(nc.log(nc.sub(1.0, prob)), 1.0 - y))), -1.0)
            bce.backward()
            for (W, b), (lW, lb), (vW, vb) in zip(layers, leaves, velocity):
                for p, g, v in ((W, lW.grad, vW), (b, lb.grad, vb)):
                    v *= 0.9
                    v += g
                    p -= lr * v
    logits = mlp(Tensor(x_test), layers).data[:, 0]
    eps = float(np.mean((logits > 0) != (y_test == 1)))
    return a_distance_from_error(eps)


def evaluate_losses(params: ModelParams, bank: FeatureBank | None, source: LabeledDataset, target: LabeledDataset,
                    cfg: RunConfig, mu: float) -> LossBreakdown:
    """Objective on the full datasets, no update."""
    _, breakdown, _ = forward_losses(params, bank, source.x, source.y, target.x, cfg, mu)
    return breakdown


def features_of(params: ModelParams, ds: LabeledDataset) -> np.ndarray:
    return extract_features(params, ds.x).data


# fitting --------------------------------------------------------------------------

@dataclass
class FitResult:
    params: ModelParams
    records: list[MetricsRecord]
    bank: FeatureBank | None = None


def fit(cfg: RunConfig, on_epoch=None) -> FitResult:
    source, target = build_datasets(cfg)
    params = init_params(*model_specs(cfg, source.d_in, source.n_classes), seed=derive_seed(cfg.seed, 3))
    bank = init_bank(target.x, params) if cfg.mode == "dann_cat" else None
    sampler = BatchSampler(source, target, cfg.batch_size, derive_seed(cfg.seed, 4))
    opt = SGD(params, cfg.lr, cfg.sgd_momentum, cfg.weight_decay, cfg.clip_norm)
    total_steps = max(cfg.epochs * sampler.batches_per_epoch, 1)

    t0 = time.perf_counter()

    def record(epoch: int, bd: LossBreakdown) -> MetricsRecord:
        a_dist = None
        if cfg.a_distance_every and (epoch % cfg.a_distance_every == 0 or epoch == cfg.epochs):
            a_dist = a_distance(features_of(params, source), features_of(params, target),
                                seed=derive_seed(cfg.seed, 100 + epoch))
        wall = int((time.perf_counter() - t0) * 1000) if cfg.record_wall_ms else 0
        rec = MetricsRecord(epoch, bd.l_cls, bd.l_d, bd.l_con, bd.total, evaluate(params, source),
                            evaluate(params, target), a_dist, wall)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d: %s", epoch, rec)
        return rec

    records = [record(0, evaluate_losses(params, bank, source, target, cfg, grl_schedule(cfg.grl_schedule, 0.0)))]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        n = 0
        for batch in sampler.epoch():
            mu = grl_schedule(cfg.grl_schedule, step / total_steps)
            _, _, bd = train_step(params, bank, batch, cfg, mu, opt, step)
            sums += (bd.l_cls, bd.l_d, bd.l_con)
            n += 1
            step += 1
        if not params.is_finite():
            raise NonFiniteLossError({"params": "non-finite after epoch"}, step)
        l_cls, l_d, l_con = sums / max(n, 1)
        records.append(record(epoch, total_loss(l_cls, l_d, l_con, cfg.lam)))
    return FitResult(params, records, bank)


# ablation -------------------------------------------------------------------------

@dataclass
class AblationRow:
    lam: float
    K: int
    mean_target_acc: float
    std_target_acc: float
    n_seeds: int
    status: str = "ok"
    target_accs: list[float] = field(default_factory=list)


ABLATION_HEADER = ["lambda", "K", "mean_target_acc", "std_target_acc", "n_seeds", "status"]


def _final_target_acc(cfg: RunConfig) -> float:
    return fit(cfg).records[-1].target_acc


def _run_one(cfg: RunConfig):
    try:
        return _final_target_acc(cfg), None
    except Exception as exc:  # a failed run marks its row, the grid continues
        return None, f"{type(exc).__name__}: {exc}"


def run_ablation(base_cfg: RunConfig, lambdas, Ks, seeds, jobs: int = 1) -> list[AblationRow]:
    lambdas, Ks, seeds = list(lambdas), list(Ks), list(seeds)
    if not (lambdas and Ks and seeds):
        raise ConfigError("ablation needs non-empty lambda, K and seed lists")
    cfgs = [replace(base_cfg, lam=float(lam), K=int(K), seed=int(s)) for lam in lambdas for K in Ks for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, cfgs))
    else:
        results = [_run_one(c) for c in cfgs]
    rows = []
    it = iter(results)
    for lam in lambdas:
        for K in Ks:
            accs, errors = [], []
            for _ in seeds:
                acc, err = next(it)
                (errors.append(err) if err else accs.append(acc))
            for err in errors:
                log.error("ablation run lambda=%s K=%s failed: %s", lam, K, err)
            mean = float(np.mean(accs)) if accs else float("nan")
            std = float(np.std(accs)) if accs else float("nan")
            rows.append(AblationRow(float(lam), int(K), mean, std, len(accs), "failed" if errors else "ok", accs))
    return rows


# file outputs -----------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in METRICS_HEADER])


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if next(r) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header")
        out = []
        for row in r:
            v = dict(zip(METRICS_HEADER, row))
            out.append(MetricsRecord(int(v["epoch"]), float(v["l_cls"]), float(v["l_d"]), float(v["l_con"]),
                                     float(v["total"]), float(v["source_acc"]), float(v["target_acc"]),
                                     float(v["a_distance"]) if v["a_distance"] else None, int(v["wall_ms"])))
    return out


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([_fmt(r.lam), r.K, _fmt(r.mean_target_acc), _fmt(r.std_target_acc), r.n_seeds, r.status])


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run_summary(cfg: RunConfig, records: list[MetricsRecord]) -> dict:
    return {"config": cfg.to_dict(), "final": asdict(records[-1]), "version": version_string()}
