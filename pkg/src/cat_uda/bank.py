"""Target-domain feature bank with exact cosine top-K / bottom-K retrieval."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import NeighborSets
from .models import ModelParams, decode_array, encode_array, extract_features
from .numcore import DataError, DegenerateInputError, DimensionError, PreconditionError


@dataclass
class FeatureBank:
    feats: np.ndarray  # (M, d_z); row i is the latest feature of target sample i
    version: int = 0

    @property
    def M(self) -> int:
        return self.feats.shape[0]

    @property
    def d_z(self) -> int:
        return self.feats.shape[1]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.feats[i]

    def copy(self) -> "FeatureBank":
        return FeatureBank(self.feats.copy(), self.version)

    def to_dict(self) -> dict:
        return {"version": self.version, "feats": encode_array(self.feats)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureBank":
        return cls(decode_array(d["feats"]), int(d["version"]))


def init_bank(target_x: np.ndarray, params: ModelParams) -> FeatureBank:
    target_x = np.asarray(target_x, dtype=np.float64)
    if target_x.ndim != 2 or target_x.shape[0] < 1:
        raise PreconditionError(f"bank needs at least one target sample, got shape {target_x.shape}")
    return FeatureBank(extract_features(params, target_x).data.copy(), 0)


def update(bank: FeatureBank, ids, feats, momentum: float = 0.0) -> FeatureBank:
    """Overwrite (m=0) or blend ``m*old + (1-m)*new`` the rows at ``ids``; in place."""
    ids = np.asarray(ids, dtype=np.int64)
    feats = np.asarray(feats, dtype=np.float64)
    if ids.size and (ids.min() < 0 or ids.max() >= bank.M):
        raise DataError(f"bank ids must lie in [0, {bank.M}), got range [{ids.min()}, {ids.max()}]")
    if feats.shape != (ids.size, bank.d_z):
        raise DimensionError(f"feats shape {feats.shape} != ({ids.size}, {bank.d_z})")
    if not np.isfinite(feats).all():
        raise DataError("refusing to store non-finite features in the bank")
    if momentum == 0.0:
        bank.feats[ids] = feats
    else:
        bank.feats[ids] = momentum * bank.feats[ids] + (1.0 - momentum) * feats
    bank.version += 1
    return bank


def cosine_scores(bank_feats: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(N', M) cosine similarities. Zero-norm bank rows score 0; zero anchors are rejected."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    a_norm = np.linalg.norm(anchors, axis=1)
    if (a_norm == 0).any():
        raise DegenerateInputError("cosine retrieval needs non-zero anchors")
    b_norm = np.linalg.norm(bank_feats, axis=1)
    # one matrix-vector product per anchor so a row's scores do not depend on the batch around it
    dots = np.stack([bank_feats @ a for a in anchors])
    denom = a_norm[:, None] * b_norm[None, :]
    return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)


def _check_K(bank: FeatureBank, K: int):
    if not 1 <= K <= bank.M:
        raise PreconditionError(f"K must lie in [1, M={bank.M}], got {K}")


def _smallest_k(keys: np.ndarray, K: int) -> np.ndarray:
    """Per row, ids of the K smallest keys in ascending order; equal keys ordered by id."""
    N, M = keys.shape
    if K == M:
        return np.argsort(keys, axis=1, kind="stable")
    kth = np.partition(keys, K - 1, axis=1)[:, K - 1]
    out = np.empty((N, K), dtype=np.int64)
    for r in range(N):
        # every id tied with the K-th key is a candidate, so the id tie-break stays exact
        cand = np.flatnonzero(keys[r] <= kth[r])
        out[r] = cand[np.lexsort((cand, keys[r, cand]))][:K]
    return out


def ranked_ids(scores: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Close (descending score) and distant (ascending score) ids per row; ties go to the smaller id."""
    return _smallest_k(-scores, K), _smallest_k(scores, K)


def query_close(bank: FeatureBank, anchor, K: int) -> list[tuple[int, np.ndarray]]:
    _check_K(bank, K)
    close, _ = ranked_ids(cosine_scores(bank.feats, anchor), K)
    return [(int(i), bank.feats[i].copy()) for i in close[0]]


def query_distant(bank: FeatureBank, anchor, K: int) -> list[tuple[int, np.ndarray]]:
    _check_K(bank, K)
    _, distant = ranked_ids(cosine_scores(bank.feats, anchor), K)
    return [(int(i), bank.feats[i].copy()) for i in distant[0]]


def build_set_ids(bank: FeatureBank, anchors, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised form of :func:`build_sets` returning (N', K) id arrays."""
    _check_K(bank, K)
    return ranked_ids(cosine_scores(bank.feats, anchors), K)


def build_sets(bank: FeatureBank, anchors, K: int) -> list[NeighborSets]:
    close, distant = build_set_ids(bank, anchors, K)
    return [NeighborSets([(int(i), bank.feats[i].copy()) for i in c],
                         [(int(i), bank.feats[i].copy()) for i in d])
            for c, d in zip(close, distant)]
