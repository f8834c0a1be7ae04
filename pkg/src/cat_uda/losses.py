"""Training objectives: source CE, domain adversarial, contrastive alignment.

Also carries the diagnostics used to check the contrastive derivation (the
softmax similarity over the bank and the log-likelihood ratio in both its
softmax and dot-product forms) and a moment-matched KL baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ConfigError, DataError, PreconditionError, Tensor


@dataclass
class NeighborSets:
    """Close set and distant set for one source anchor as ``(bank_id, feature)`` pairs."""

    close: list[tuple[int, np.ndarray]]
    distant: list[tuple[int, np.ndarray]]

    @property
    def K(self) -> int:
        return len(self.close)

    def close_ids(self) -> list[int]:
        return [i for i, _ in self.close]

    def distant_ids(self) -> list[int]:
        return [i for i, _ in self.distant]

    def close_feats(self) -> np.ndarray:
        return np.stack([f for _, f in self.close])

    def distant_feats(self) -> np.ndarray:
        return np.stack([f for _, f in self.distant])


@dataclass
class LossBreakdown:
    l_cls: float
    l_d: float
    l_con: float
    lam: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.l_cls + self.l_d + self.lam * self.l_con

    def as_dict(self) -> dict:
        return {"l_cls": self.l_cls, "l_d": self.l_d, "l_con": self.l_con, "lambda": self.lam,
                "total": self.total}


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    C = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise DataError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    picked = nc.take_along_rows(nc.log_softmax(logits), labels)
    return nc.mul(nc.mean(picked), -1.0)


def domain_adversarial_loss(d_src: Tensor, d_tgt: Tensor) -> Tensor:
    """Binary CE with source labelled 1 and target labelled 0."""
    for name, t in (("d_src", d_src), ("d_tgt", d_tgt)):
        # NaN is left to the caller's finiteness check
        if ((t.data <= 0) | (t.data >= 1)).any():
            raise RuntimeError(f"{name} has entries outside (0, 1); discriminator clamp was bypassed")
    src = nc.mean(nc.log(d_src))
    tgt = nc.mean(nc.log(nc.sub(1.0, d_tgt)))
    return nc.mul(nc.add(src, tgt), -1.0)


def similarity_softmax(anchor, bank_feats) -> np.ndarray:
    """p_j = exp(anchor . b_j) / sum_k exp(anchor . b_k) over the bank rows."""
    bank_feats = np.atleast_2d(np.asarray(bank_feats, dtype=np.float64))
    if bank_feats.shape[0] < 1:
        raise PreconditionError("bank must hold at least one entry")
    return nc.softmax_array(bank_feats @ np.asarray(anchor, dtype=np.float64))


def log_likelihood_ratio_forms(anchor, sets: NeighborSets, bank_feats) -> tuple[float, float]:
    """(softmax form, dot-product form) of sum_C log p - sum_D log p."""
    if len(sets.close) != len(sets.distant):
        raise PreconditionError(f"close and distant sets differ in size: {len(sets.close)} vs "
                                f"{len(sets.distant)}")
    anchor = np.asarray(anchor, dtype=np.float64)
    bank_feats = np.atleast_2d(np.asarray(bank_feats, dtype=np.float64))
    scores = bank_feats @ anchor
    top = scores.max()
    log_p = scores - (top + np.log(np.exp(scores - top).sum()))
    soft = float(sum(log_p[i] for i in sets.close_ids()) - sum(log_p[i] for i in sets.distant_ids()))
    dot = float(sum(anchor @ f for _, f in sets.close) - sum(anchor @ f for _, f in sets.distant))
    return soft, dot


def log_likelihood_ratio(anchor, sets: NeighborSets, bank_feats, check_tol: float = 1e-8) -> float:
    soft, dot = log_likelihood_ratio_forms(anchor, sets, bank_feats)
    if abs(soft - dot) > check_tol * max(1.0, abs(dot)):
        raise ArithmeticError(f"softmax form {soft!r} and dot form {dot!r} disagree")
    return dot


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(n > 0, n, 1.0)


def contrastive_terms(z_s: Tensor, close: np.ndarray, distant: np.ndarray, normalize: bool = False) -> Tensor:
    """Per-anchor loss: sum of l2 distances to the close set minus those to the distant set.

    ``close`` and ``distant`` are (N, K, d) arrays of bank features and carry no
    gradient; only ``z_s`` (N, d) does.
    """
    N, d = z_s.shape
    if close.shape[1] == 0 or distant.shape[1] == 0:
        raise PreconditionError("close and distant sets must be non-empty")
    if normalize:
        z_s = nc.div(z_s, nc.norm(z_s, axis=1, keepdims=True))
        close, distant = _unit_rows(close), _unit_rows(distant)
    anchor = nc.reshape(z_s, (N, 1, d))
    pull = nc.sum_(nc.norm(nc.sub(anchor, close), axis=2), axis=1)
    push = nc.sum_(nc.norm(nc.sub(anchor, distant), axis=2), axis=1)
    return nc.sub(pull, push)


def contrastive_loss_arrays(z_s: Tensor, close: np.ndarray, distant: np.ndarray,
                            normalize: bool = False) -> Tensor:
    return nc.mean(contrastive_terms(z_s, close, distant, normalize))


def contrastive_loss(z_s_batch: Tensor, sets_per_anchor: list[NeighborSets], normalize: bool = False) -> Tensor:
    z_s_batch = nc._lift(z_s_batch)
    if len(sets_per_anchor) != z_s_batch.shape[0]:
        raise PreconditionError(f"{len(sets_per_anchor)} neighbor sets for {z_s_batch.shape[0]} anchors")
    if any(not s.close or not s.distant for s in sets_per_anchor):
        raise PreconditionError("close and distant sets must be non-empty")
    close = np.stack([s.close_feats() for s in sets_per_anchor])
    distant = np.stack([s.distant_feats() for s in sets_per_anchor])
    return contrastive_loss_arrays(z_s_batch, close, distant, normalize)


def total_loss(l_cls, l_d, l_con, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return LossBreakdown(float(l_cls), float(l_d), float(l_con), float(lam))


KLD_VAR_FLOOR = 1e-6


def kld_alignment_loss(z_s_batch: Tensor, z_t_batch: Tensor) -> Tensor:
    """KL(source || target) between per-dimension Gaussians fitted to each batch, summed over dims."""
    z_s_batch, z_t_batch = nc._lift(z_s_batch), nc._lift(z_t_batch)
    if z_s_batch.shape[0] < 2 or z_t_batch.shape[0] < 2:
        raise PreconditionError("KL alignment needs at least 2 samples per domain")

    def moments(z):
        mu = nc.mean(z, axis=0)
        var = nc.mean(nc.mul(nc.sub(z, mu), nc.sub(z, mu)), axis=0)
        return mu, nc.clamp(var, KLD_VAR_FLOOR, np.inf)

    mu_s, var_s = moments(z_s_batch)
    mu_t, var_t = moments(z_t_batch)
    gap = nc.sub(mu_s, mu_t)
    per_dim = nc.sub(nc.add(nc.sub(nc.log(var_t), nc.log(var_s)),
                            nc.div(nc.add(var_s, nc.mul(gap, gap)), var_t)), 1.0)
    return nc.mul(nc.sum_(per_dim), 0.5)
