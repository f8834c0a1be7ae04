import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cat_uda import numcore as nc
from cat_uda.numcore import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_affine_examples():
    assert nc.affine([[1, 2]], np.zeros((2, 2)), [0, 0]).data.tolist() == [[0, 0]]
    assert nc.affine([[1, 0]], np.eye(2), [0, 0]).data.tolist() == [[1, 0]]
    assert nc.affine([[1, 2]], [[1, 0], [0, 1]], [3, 4]).data.tolist() == [[4, 6]]


def test_affine_shape_errors_name_axes():
    with pytest.raises(nc.DimensionError, match="axis 1"):
        nc.affine(np.ones((1, 3)), np.ones((2, 2)), np.ones(2))
    with pytest.raises(nc.DimensionError, match="b axis 0"):
        nc.affine(np.ones((1, 2)), np.ones((2, 2)), np.ones(3))


def test_relu_examples():
    assert nc.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
    assert not nc.relu(Tensor(-np.arange(1.0, 6.0))).data.any()
    x = Tensor([3.0], requires_grad=True)
    nc.relu(x).backward(np.array([5.0]))
    assert x.grad.tolist() == [5.0]


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, -0.0], requires_grad=True)
    nc.relu(x).backward(np.array([1.0, 1.0]))
    assert x.grad.tolist() == [0.0, 0.0]


def test_softmax_examples():
    assert nc.softmax(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]
    assert nc.softmax(Tensor([[1000.0, 1000.0]])).data.tolist() == [[0.5, 0.5]]
    np.testing.assert_allclose(nc.softmax(Tensor([[math.log(1), math.log(3)]])).data, [[0.25, 0.75]],
                               rtol=0, atol=1e-15)


@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_rows_sum_to_one_and_shift_invariant(logits, c):
    p = nc.softmax(Tensor(logits)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(nc.softmax(Tensor(logits + c)).data, p, rtol=0, atol=1e-10)


def test_cosine_examples():
    assert nc.cosine_similarity([1, 0], [0, 1]) == 0
    assert nc.cosine_similarity([1, 0], [2, 0]) == 1
    assert nc.cosine_similarity([1, 0], [-3, 0]) == -1
    with pytest.raises(nc.DegenerateInputError):
        nc.cosine_similarity([0, 0], [1, 0])


nonzero_vec = arrays(np.float64, 4, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(nonzero_vec, nonzero_vec, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(a, b, alpha, beta):
    assert abs(nc.cosine_similarity(a, b) - nc.cosine_similarity(alpha * a, beta * b)) <= 1e-12


def test_grl_forward_is_bitwise_identity():
    x = np.array([1.0, 2.0, 3.0])
    assert nc.grl_forward(Tensor(x)).data.tobytes() == x.tobytes()
    assert nc.grl_forward(Tensor(np.empty((0,)))).data.shape == (0,)
    weird = np.array([-0.0, 1e-308, np.pi])
    assert nc.grl_forward(Tensor(weird), 0.3).data.tobytes() == weird.tobytes()


def test_grl_backward_examples():
    assert nc.grl_backward([1.0, 2.0], 1.0).tolist() == [-1.0, -2.0]
    assert nc.grl_backward([2.0], 0.5).tolist() == [-1.0]
    assert not nc.grl_backward([3.0, -4.0], 0.0).any()
    with pytest.raises(nc.ConfigError):
        nc.grl_backward([1.0], -0.1)
    with pytest.raises(nc.ConfigError):
        nc.grl_forward(Tensor([1.0]), -1.0)


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite), st.floats(0, 10))
def test_grl_backward_linear(c1, c2, mu):
    assert np.array_equal(nc.grl_backward(c1 + c2, mu), -mu * (c1 + c2))
    np.testing.assert_allclose(nc.grl_backward(c1 + c2, mu), nc.grl_backward(c1, mu) + nc.grl_backward(c2, mu),
                               rtol=1e-15, atol=1e-12)


def test_grl_node_reverses_cotangent():
    x = Tensor([1.0, -2.0], requires_grad=True)
    nc.grl_forward(x, 0.7).backward(np.array([2.0, 3.0]))
    assert x.grad.tolist() == [-0.7 * 2.0, -0.7 * 3.0]


# vector-Jacobian products against central differences ------------------------------

def _unary(op):
    return lambda ts: nc.sum_(nc.mul(op(ts[0]), ts[1]))


GRL_W = np.array([0.5, -1.5, 2.0, 0.25])

PRIMITIVES = {
    "affine": (lambda ts: nc.sum_(nc.mul(nc.affine(ts[0], ts[1], ts[2]), ts[3])),
               lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=2), r.normal(size=(3, 2))]),
    "relu": (_unary(nc.relu), lambda r: [r.normal(size=(3, 4)) + np.sign(r.normal(size=(3, 4))) * 0.05,
                                          r.normal(size=(3, 4))]),
    "tanh": (_unary(nc.tanh), lambda r: [r.normal(size=5), r.normal(size=5)]),
    "sigmoid": (_unary(nc.sigmoid), lambda r: [3 * r.normal(size=5), r.normal(size=5)]),
    "exp": (_unary(nc.exp), lambda r: [r.normal(size=5), r.normal(size=5)]),
    "log": (_unary(nc.log), lambda r: [r.uniform(0.5, 3, size=5), r.normal(size=5)]),
    "softmax": (_unary(nc.softmax), lambda r: [r.normal(size=(2, 4)), r.normal(size=(2, 4))]),
    "log_softmax": (_unary(nc.log_softmax), lambda r: [r.normal(size=(2, 4)), r.normal(size=(2, 4))]),
    "norm": (lambda ts: nc.sum_(nc.mul(nc.norm(ts[0], axis=1), ts[1])),
             lambda r: [r.normal(size=(3, 4)), r.normal(size=3)]),
    "div": (lambda ts: nc.sum_(nc.div(ts[0], ts[1])), lambda r: [r.normal(size=(3, 2)), r.uniform(0.5, 2, size=(3, 1))]),
    "mul_broadcast": (lambda ts: nc.sum_(nc.mul(ts[0], ts[1])), lambda r: [r.normal(size=(3, 2)), r.normal(size=2)]),
    "sub_broadcast": (lambda ts: nc.sum_(nc.mul(nc.sub(nc.reshape(ts[0], (3, 1, 2)), ts[1]), ts[2])),
                      lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 4, 2)), r.normal(size=(3, 4, 2))]),
    "concat": (lambda ts: nc.sum_(nc.mul(nc.concat([ts[0], ts[1]]), ts[2])),
               lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3)), r.normal(size=(3, 3))]),
    "take": (lambda ts: nc.sum_(nc.mul(nc.take_along_rows(ts[0], np.array([2, 0, 1])), ts[1])),
             lambda r: [r.normal(size=(3, 3)), r.normal(size=3)]),
    "mean_axis": (lambda ts: nc.sum_(nc.mul(nc.mean(ts[0], axis=0), ts[1])),
                  lambda r: [r.normal(size=(4, 3)), r.normal(size=3)]),
    "clamp": (_unary(lambda t: nc.clamp(t, -0.5, 0.5)),
              lambda r: [r.choice([-1, 1], size=6) * r.uniform(0.05, 0.45, size=6)
                         + r.choice([0, 1], size=6) * r.choice([-1, 1], size=6), r.normal(size=6)]),
    "grl": (lambda ts: nc.sum_(nc.mul(nc.grl_forward(ts[0], 0.8), GRL_W)), lambda r: [r.normal(size=4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_vjp_matches_finite_differences(name):
    fn, sample = PRIMITIVES[name]
    r = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        arrays_ = sample(r)
        if name == "grl":
            rep = nc.finite_diff_check(fn, arrays_, rtol=1e-4, h=1e-5,
                                       reference_fn=lambda ts: nc.sum_(nc.mul(ts[0], GRL_W)), scale=-0.8)
        else:
            rep = nc.finite_diff_check(fn, arrays_, rtol=1e-4, h=1e-5)
        worst = max(worst, rep.max_rel_error)
        assert rep.passed, (name, rep)
    assert worst <= 1e-4


def test_finite_diff_check_quadratic():
    rep = nc.finite_diff_check(lambda ts: nc.mul(nc.sum_(nc.mul(ts[0], ts[0])), 0.5), [np.array([3.0])])
    assert rep.passed
    np.testing.assert_allclose(nc.analytic_grads(lambda ts: nc.mul(nc.sum_(nc.mul(ts[0], ts[0])), 0.5),
                                                 [np.array([3.0])])[0], [3.0])


def test_finite_diff_check_flags_corrupted_vjp():
    def bad_square(x):
        xd = x.data
        return Tensor(xd * xd, _parents=(x,), _backward=lambda g: (1.1 * 2 * xd * g,))

    rep = nc.finite_diff_check(lambda ts: nc.sum_(bad_square(ts[0])), [np.array([0.3, -1.2, 2.0])])
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.1 / 1.1, rel=1e-6)


def test_finite_diff_check_detects_nondeterminism():
    calls = iter(range(10**6))
    with pytest.raises(nc.OracleError):
        nc.finite_diff_check(lambda ts: nc.add(nc.sum_(ts[0]), float(next(calls))), [np.ones(2)])


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(nc.ConfigError):
        nc.finite_diff_check(lambda ts: nc.sum_(ts[0]), [np.ones(2)], h=0)


def test_backward_accumulates_over_shared_subexpressions():
    x = Tensor([2.0], requires_grad=True)
    y = nc.mul(x, x)
    nc.sum_(nc.add(y, y)).backward()
    assert x.grad.tolist() == [8.0]
