import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepcrs.numerics import (DimensionError, NumericalError, Tensor, check_gradients, cross_entropy, l2_normalize,
                              layer_norm, log_softmax, matmul, no_grad, segment_sum, softmax, tanh, tsum)


def test_softmax_matches_mpmath():
    x = [1.0, 2.0, 3.0]
    mpmath.mp.dps = 40
    z = sum(mpmath.e ** v for v in x)
    want = np.array([float(mpmath.e ** v / z) for v in x])
    got = softmax(Tensor(np.array(x))).data
    np.testing.assert_allclose(got, want, rtol=1e-14)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([[1000.0, 1001.0, 1002.0]])
    np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x - 1000)).data, rtol=1e-14)


def test_softmax_mask_and_errors():
    out = softmax(Tensor(np.array([[1.0, 5.0, 2.0]])), mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out.sum(), 1.0)
    with pytest.raises(DimensionError):
        softmax(Tensor(np.ones((1, 2))), mask=np.zeros((1, 2), bool))
    with pytest.raises(NumericalError):
        softmax(Tensor(np.array([np.nan, 1.0])))


def test_log_softmax_consistent():
    x = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_allclose(np.exp(log_softmax(Tensor(x)).data), softmax(Tensor(x)).data, rtol=1e-12)


def test_cross_entropy_by_hand():
    logits = np.array([[2.0, 0.0], [0.0, 2.0]])
    # label smoothing 0.1 over 2 classes: targets 0.95 / 0.05
    t = np.array([[0.95, 0.05], [0.05, 0.95]])
    mpmath.mp.dps = 30
    lse = mpmath.log(mpmath.e ** 2 + 1)
    want = float(0.95 * (lse - 2) + 0.05 * lse)
    assert abs(cross_entropy(Tensor(logits), t).item() - want) < 1e-14


def test_l2_normalize_zero_row_stays_finite():
    out = l2_normalize(Tensor(np.zeros((2, 3)))).data
    assert np.all(out == 0)


def test_layer_norm_moments():
    x = np.random.default_rng(1).normal(3, 2, size=(4, 16))
    y = layer_norm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)


def test_segment_sum_matches_loop():
    rng = np.random.default_rng(2)
    vals = rng.normal(size=(30, 4))
    seg = rng.integers(0, 7, size=30)
    want = np.zeros((7, 4))
    for i, s in enumerate(seg):
        want[s] += vals[i]
    np.testing.assert_allclose(segment_sum(Tensor(vals), seg, 7).data, want, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_segment_sum_order_independent_bitwise(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    vals = rng.normal(size=(n, 3)).astype(np.float32)
    seg = rng.integers(0, 5, size=n)
    perm = rng.permutation(n)
    a = segment_sum(Tensor(vals), seg, 5).data
    b = segment_sum(Tensor(vals[perm]), seg[perm], 5).data
    assert a.tobytes() == b.tobytes()


def test_segment_sum_gradient():
    rng = np.random.default_rng(3)
    seg = np.array([0, 2, 2, 1, 0])
    probe = rng.normal(size=(3, 2))
    rep = check_gradients(lambda v: tsum(segment_sum(v, seg, 3) * probe), [Tensor(rng.normal(size=(5, 2)))],
                          tolerance=1e-6)
    assert rep.passed, str(rep)


def test_composite_gradient_check():
    rng = np.random.default_rng(4)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    t = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])

    def f(a_, b_):
        return cross_entropy(tanh(matmul(layer_norm(a_), b_)), t) + tsum(l2_normalize(a_))
    rep = check_gradients(f, [a, b], step=1e-5, tolerance=1e-6)
    assert rep.passed, str(rep)


def test_check_gradients_catches_wrong_backward():
    from stepcrs.numerics import make_op

    def bad(x):
        return make_op(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2
    rep = check_gradients(lambda x: tsum(bad(x)), [Tensor(np.array([1.0, -2.0]))])
    assert not rep.passed and rep.failures


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = tsum(x * 2.0)
    assert not y.requires_grad


def test_broadcast_backward_shapes():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    tsum(x + b).backward()
    assert b.grad.shape == (1, 4)
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))
