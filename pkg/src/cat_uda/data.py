"""Synthetic two-domain tasks and the unpaired minibatch sampler.

All randomness goes through ``numpy.random.Generator(PCG64(seed))``. PCG64's
bit stream is fixed by numpy's stream-compatibility policy, so a seed pins
the dataset and the batch order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numcore import ConfigError, DataError


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    domain_tag: str = "source"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise DataError(f"x must be a non-empty 2-D array, got shape {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise DataError(f"y has shape {self.y.shape}, expected ({self.x.shape[0]},)")
        if (self.y < 0).any():
            raise DataError("labels must be non-negative")
        if self.domain_tag not in ("source", "target"):
            raise DataError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d_in(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1


@dataclass
class DomainBatch:
    """One unpaired minibatch. The target half carries dataset ids, never labels."""

    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    target_ids: np.ndarray


def gen_two_moons(n: int, noise_sd: float, seed: int) -> LabeledDataset:
    if n % 2:
        raise ConfigError(f"two-moons needs an even sample count, got n={n}")
    if noise_sd < 0:
        raise ConfigError(f"noise_sd must be >= 0, got {noise_sd}")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.repeat([0, 1], half)
    if noise_sd > 0:
        x = x + make_rng(seed).normal(0.0, noise_sd, size=x.shape)
    return LabeledDataset(x, y, "source")


def gen_blobs(C: int, n_per_class: int, centers, sd: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian clusters. Duplicate centers are allowed."""
    centers = np.asarray(centers, dtype=np.float64)
    if C < 2:
        raise ConfigError(f"blobs need C >= 2, got {C}")
    if sd <= 0:
        raise ConfigError(f"sd must be > 0, got {sd}")
    if centers.shape[0] != C:
        raise ConfigError(f"centers has {centers.shape[0]} rows, expected C={C}")
    rng = make_rng(seed)
    x = np.repeat(centers, n_per_class, axis=0) + rng.normal(0.0, sd, size=(C * n_per_class, centers.shape[1]))
    y = np.repeat(np.arange(C), n_per_class)
    return LabeledDataset(x, y, "source")


def rotation_matrix(deg: float) -> np.ndarray:
    th = np.deg2rad(deg)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s], [s, c]])


def shift_domain(ds: LabeledDataset, rotation_deg: float = 0.0, translate=None, seed: int = 0,
                 domain_tag: str | None = None) -> LabeledDataset:
    """Rotate about the origin, then translate. ``seed`` is accepted for API symmetry; no noise is drawn."""
    x = ds.x.copy()
    if rotation_deg:
        if ds.d_in != 2:
            raise ConfigError(f"rotation needs 2-D inputs, got d_in={ds.d_in}")
        x = x @ rotation_matrix(rotation_deg).T
    if translate is not None:
        translate = np.asarray(translate, dtype=np.float64)
        if translate.shape != (ds.d_in,):
            raise ConfigError(f"translate must have shape ({ds.d_in},), got {translate.shape}")
        x = x + translate
    return LabeledDataset(x, ds.y.copy(), domain_tag or ds.domain_tag)


class BatchSampler:
    """Draws unpaired (source, target) minibatches.

    Each domain is walked through its own random permutation; an epoch is one
    pass over the target permutation with the partial last batch dropped.
    Source indices roll over into a fresh permutation whenever exhausted.
    """

    def __init__(self, source: LabeledDataset, target: LabeledDataset, batch_size: int, seed: int):
        if batch_size < 1 or batch_size > min(len(source), len(target)):
            raise ConfigError(f"batch_size {batch_size} must be in [1, min(Ns, Nt)="
                              f"{min(len(source), len(target))}]")
        self.source, self.target, self.batch_size = source, target, batch_size
        self.rng = make_rng(seed)
        self._src_perm = self.rng.permutation(len(source))
        self._src_pos = 0
        self._tgt_perm = self.rng.permutation(len(target))
        self._tgt_pos = 0

    @property
    def batches_per_epoch(self) -> int:
        return len(self.target) // self.batch_size

    def _source_indices(self) -> np.ndarray:
        b = self.batch_size
        if self._src_pos + b > len(self._src_perm):
            self._src_perm = self.rng.permutation(len(self.source))
            self._src_pos = 0
        idx = self._src_perm[self._src_pos:self._src_pos + b]
        self._src_pos += b
        return idx

    def _target_indices(self) -> np.ndarray:
        b = self.batch_size
        if self._tgt_pos + b > len(self._tgt_perm):
            self._tgt_perm = self.rng.permutation(len(self.target))
            self._tgt_pos = 0
        idx = self._tgt_perm[self._tgt_pos:self._tgt_pos + b]
        self._tgt_pos += b
        return idx

    def next_batch(self) -> DomainBatch:
        si = self._source_indices()
        ti = self._target_indices()
        return DomainBatch(self.source.x[si], self.source.y[si], self.target.x[ti], ti.copy())

    def epoch(self):
        for _ in range(self.batches_per_epoch):
            yield self.next_batch()


def next_batch(source: LabeledDataset, target: LabeledDataset, batch_size: int,
               rng_state: BatchSampler | int) -> DomainBatch:
    """Functional entry point: ``rng_state`` is a live sampler or an integer seed."""
    if isinstance(rng_state, BatchSampler):
        return rng_state.next_batch()
    return BatchSampler(source, target, batch_size, int(rng_state)).next_batch()


# CSV interchange ---------------------------------------------------------------

def write_csv(path, datasets) -> None:
    datasets = [datasets] if isinstance(datasets, LabeledDataset) else list(datasets)
    d = datasets[0].d_in
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["y", "domain"])
        for ds in datasets:
            for row, label in zip(ds.x, ds.y):
                w.writerow([repr(float(v)) for v in row] + [int(label), ds.domain_tag])


def read_csv(path) -> dict[str, LabeledDataset]:
    """Returns datasets keyed by domain tag."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        xcols = [h for h in header if h.startswith("x")]
        if header != xcols + ["y", "domain"] or xcols != [f"x{i}" for i in range(len(xcols))]:
            raise DataError(f"unexpected CSV header {header}")
        rows: dict[str, tuple[list, list]] = {}
        for line in r:
            xs, ys = rows.setdefault(line[-1], ([], []))
            xs.append([float(v) for v in line[:-2]])
            ys.append(int(line[-2]))
    return {tag: LabeledDataset(np.array(xs), np.array(ys), tag) for tag, (xs, ys) in rows.items()}

