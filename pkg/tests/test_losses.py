import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cat_uda import losses as L
from cat_uda import numcore as nc
from cat_uda.numcore import ConfigError, DataError, PreconditionError, Tensor


def _sets(close, distant):
    return L.NeighborSets([(i, np.asarray(f, float)) for i, f in close],
                          [(i, np.asarray(f, float)) for i, f in distant])


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# cross entropy ---------------------------------------------------------------------

def test_cross_entropy_examples():
    assert L.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)
    # log(1 + e^-20), evaluated without cancellation
    assert L.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(math.log1p(math.exp(-20)),
                                                                                rel=1e-12)
    assert L.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(2.06e-9, rel=1e-3)
    assert L.cross_entropy(Tensor(np.zeros((4, 12))), [0, 3, 7, 11]).item() == pytest.approx(math.log(12),
                                                                                            abs=1e-14)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        L.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DataError):
        L.cross_entropy(Tensor(np.zeros((2, 3))), [0])


def test_cross_entropy_gradient_on_toy_net():
    r = np.random.default_rng(5)
    x, y = r.normal(size=(6, 3)), r.integers(0, 2, size=6)

    def loss(ts):
        return L.cross_entropy(nc.affine(nc.tanh(nc.affine(x, ts[0], ts[1])), ts[2], ts[3]), y)

    rep = nc.finite_diff_check(loss, [r.normal(size=(3, 4)), r.normal(size=4), r.normal(size=(4, 2)),
                                      r.normal(size=2)], rtol=1e-4, h=1e-5)
    assert rep.passed, rep


# domain adversarial ----------------------------------------------------------------

def test_domain_adversarial_examples():
    half = Tensor(np.full((4, 1), 0.5))
    assert L.domain_adversarial_loss(half, half).item() == pytest.approx(2 * math.log(2), abs=1e-15)
    hi, lo = Tensor([[1 - 1e-7]]), Tensor([[1e-7]])
    perfect = -(math.log1p(-1e-7) + math.log1p(-1e-7))
    assert L.domain_adversarial_loss(hi, lo).item() == pytest.approx(perfect, rel=1e-9)
    assert perfect == pytest.approx(2e-7, rel=1e-6)
    worst_src = -math.log(1e-7) - math.log1p(-1e-7)
    assert L.domain_adversarial_loss(lo, lo).item() == pytest.approx(worst_src, rel=1e-12)
    assert worst_src == pytest.approx(16.118, abs=1e-3)


def test_domain_adversarial_rejects_unclamped():
    with pytest.raises(RuntimeError):
        L.domain_adversarial_loss(Tensor([[1.0]]), Tensor([[0.5]]))


# similarity softmax and the log-likelihood ratio ------------------------------------

def test_similarity_softmax_examples():
    np.testing.assert_allclose(L.similarity_softmax([1.0, 1.0], np.ones((5, 2))), np.full(5, 0.2), atol=1e-15)
    e = math.e
    p = L.similarity_softmax([1.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(p, [e / (e + 1 / e), (1 / e) / (e + 1 / e)], rtol=1e-14)
    np.testing.assert_allclose(p, [0.8808, 0.1192], atol=1e-4)


@given(arrays(np.float64, (7, 3), elements=st.floats(-20, 20)), arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_similarity_softmax_sums_to_one(bank, anchor):
    assert abs(L.similarity_softmax(anchor, bank).sum() - 1.0) <= 1e-12


def test_log_likelihood_ratio_examples():
    bank = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert L.log_likelihood_ratio([1.0, 0.0], _sets([(0, bank[0])], [(1, bank[1])]), bank) == pytest.approx(2.0)
    same = _sets([(0, bank[0])], [(0, bank[0])])
    assert L.log_likelihood_ratio([1.0, 0.0], same, bank) == 0.0
    with pytest.raises(PreconditionError):
        L.log_likelihood_ratio([1.0, 0.0], _sets([(0, bank[0]), (1, bank[1])], [(1, bank[1])]), bank)


def test_log_ratio_cancellation_identity_1000_instances():
    r = np.random.default_rng(910)
    worst = 0.0
    for _ in range(1000):
        M, d, K = r.integers(6, 40), r.integers(2, 17), r.integers(1, 4)
        bank = _unit(r.normal(size=(M, d)))
        anchor = _unit(r.normal(size=d))
        ids = r.choice(M, size=2 * K, replace=False)
        sets = _sets([(i, bank[i]) for i in ids[:K]], [(i, bank[i]) for i in ids[K:]])
        soft, dot = L.log_likelihood_ratio_forms(anchor, sets, bank)
        worst = max(worst, abs(soft - dot))
    assert worst <= 1e-10


def test_squared_l2_dot_identity_on_unit_vectors():
    r = np.random.default_rng(1011)
    for _ in range(1000):
        d, K = r.integers(2, 33), r.integers(1, 6)
        z = _unit(r.normal(size=d))
        C, D = _unit(r.normal(size=(K, d))), _unit(r.normal(size=(K, d)))
        lhs = ((z - C) ** 2).sum() - ((z - D) ** 2).sum()
        rhs = 2 * ((D @ z).sum() - (C @ z).sum())
        assert abs(lhs - rhs) <= 1e-10


# contrastive ------------------------------------------------------------------------

def test_contrastive_examples():
    sets = _sets([(1, [0.0, 1.0])], [(2, [-1.0, 0.0])])
    got = L.contrastive_loss(Tensor([[1.0, 0.0]]), [sets]).item()
    assert got == pytest.approx(math.sqrt(2) - 2, abs=1e-15)
    same = _sets([(1, [0.3, 1.0]), (2, [2.0, 0.5])], [(1, [0.3, 1.0]), (2, [2.0, 0.5])])
    assert L.contrastive_loss(Tensor([[1.0, -1.0]]), [same]).item() == 0.0


def test_contrastive_mean_reduction():
    s1 = _sets([(1, [0.0, 1.0])], [(2, [-1.0, 0.0])])
    s2 = _sets([(0, [2.0, 0.0])], [(1, [0.0, 3.0])])
    a = L.contrastive_loss(Tensor([[1.0, 0.0]]), [s1]).item()
    b = L.contrastive_loss(Tensor([[0.0, 1.0]]), [s2]).item()
    both = L.contrastive_loss(Tensor([[1.0, 0.0], [0.0, 1.0]]), [s1, s2]).item()
    assert both == pytest.approx((a + b) / 2, abs=1e-15)


@given(st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_contrastive_decreases_as_close_feature_moves_toward_anchor(frac, seed):
    r = np.random.default_rng(seed)
    anchor = r.normal(size=4)
    close, distant = r.normal(size=(1, 3, 4)), r.normal(size=(1, 3, 4))
    moved = close.copy()
    moved[0, 1] = anchor + (1 - frac) * (close[0, 1] - anchor)
    if np.linalg.norm(close[0, 1] - anchor) < 1e-6:
        return
    before = L.contrastive_loss_arrays(Tensor(anchor[None]), close, distant).item()
    after = L.contrastive_loss_arrays(Tensor(anchor[None]), moved, distant).item()
    assert after < before


def test_contrastive_normalized_is_scale_free_and_bounded():
    r = np.random.default_rng(3)
    z, C, D = r.normal(size=(4, 5)), r.normal(size=(4, 3, 5)), r.normal(size=(4, 3, 5))
    a = L.contrastive_loss_arrays(Tensor(z), C, D, normalize=True).item()
    b = L.contrastive_loss_arrays(Tensor(7 * z), 0.2 * C, 3 * D, normalize=True).item()
    assert a == pytest.approx(b, abs=1e-12)
    assert abs(a) <= 2 * 3


def test_contrastive_gradients_reach_anchors_only():
    r = np.random.default_rng(12)
    C, D = r.normal(size=(3, 2, 4)), r.normal(size=(3, 2, 4))
    for normalize in (False, True):
        rep = nc.finite_diff_check(lambda ts: L.contrastive_loss_arrays(ts[0], C, D, normalize),
                                   [r.normal(size=(3, 4))], rtol=1e-4, h=1e-5)
        assert rep.passed, rep


def test_contrastive_rejects_mismatched_sets():
    with pytest.raises(PreconditionError):
        L.contrastive_loss(Tensor(np.ones((2, 2))), [_sets([(0, [1.0, 0.0])], [(1, [0.0, 1.0])])])


# total and KL ----------------------------------------------------------------------

def test_total_loss_examples():
    assert L.total_loss(1, 1, 1, 0).total == 2
    assert L.total_loss(0.5, 1.0, -0.2, 5).total == pytest.approx(0.5, abs=1e-15)
    assert L.total_loss(0.1, 0.2, 0.3, 1).as_dict()["lambda"] == 1.0
    assert L.total_loss(0, 0, 0, 5).lam == 5.0
    with pytest.raises(ConfigError):
        L.total_loss(0, 0, 0, -0.5)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 10))
def test_total_loss_affine_in_contrastive_term(a, b, c1, c2, lam):
    t1, t2 = L.total_loss(a, b, c1, lam).total, L.total_loss(a, b, c2, lam).total
    assert t2 - t1 == pytest.approx(lam * (c2 - c1), abs=1e-9)


def test_kld_examples():
    z = np.random.default_rng(0).normal(size=(16, 3))
    assert L.kld_alignment_loss(Tensor(z), Tensor(z)).item() == pytest.approx(0.0, abs=1e-14)
    # population mean 0 / var 1 against mean 1 / var 1, per dimension
    src = np.array([[-1.0, -1.0], [1.0, 1.0]])
    tgt = src + 1.0
    assert L.kld_alignment_loss(Tensor(src), Tensor(tgt)).item() == pytest.approx(2 * 0.5, abs=1e-14)


def _kl_oracle(a, b):
    ms, mt, vs, vt = a.mean(0), b.mean(0), np.maximum(a.var(0), 1e-6), np.maximum(b.var(0), 1e-6)
    return float(0.5 * np.sum(np.log(vt / vs) + (vs + (ms - mt) ** 2) / vt - 1))


@given(st.integers(0, 2**32 - 1))
def test_kld_matches_closed_form_and_is_nonnegative(seed):
    r = np.random.default_rng(seed)
    a = r.normal(r.normal(), r.uniform(0.1, 3), size=(8, 3))
    b = r.normal(r.normal(), r.uniform(0.1, 3), size=(9, 3))
    got = L.kld_alignment_loss(Tensor(a), Tensor(b)).item()
    assert got == pytest.approx(_kl_oracle(a, b), rel=1e-10, abs=1e-12)
    assert got >= -1e-12


def test_kld_gradient():
    r = np.random.default_rng(4)
    rep = nc.finite_diff_check(lambda ts: L.kld_alignment_loss(ts[0], ts[1]),
                               [r.normal(size=(6, 3)), r.normal(size=(5, 3)) + 1], rtol=1e-4, h=1e-5)
    assert rep.passed, rep
