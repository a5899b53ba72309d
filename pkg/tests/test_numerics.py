import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coupled_qk.numerics import (
    NonFiniteError,
    Rng,
    SingularMatrixError,
    Tensor,
    backward,
    concat,
    cross_entropy,
    det,
    embedding,
    finite_diff_grad,
    jacobian_of,
    log,
    lu_factor,
    matmul,
    no_grad,
    relative_error,
    repeat,
    rng_normal,
    rng_uniform_int,
    rotate_pairs,
    rsqrt,
    sigmoid,
    silu,
    singular_values,
    slogdet,
    softmax,
    sqrt,
    swap_last,
    tsum,
)
from coupled_qk.numerics import mean as tmean


def grad_of(fn, x):
    t = Tensor(x, requires_grad=True)
    backward(fn(t))
    return t.grad


def check_op(fn, x, tol=1e-6):
    auto = grad_of(fn, x)
    num = finite_diff_grad(lambda a: fn(Tensor(a)), x)
    assert relative_error(auto, num) < tol


# -- backward ---------------------------------------------------------------


def test_quadratic_gradient():
    g = grad_of(lambda x: tsum(x * x), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(g, [2, 4, 6], rtol=0, atol=0)


def test_softmax_sum_has_zero_gradient():
    g = grad_of(lambda x: tsum(softmax(x)), np.array([0.3, -1.2, 2.0, 0.5]))
    assert np.abs(g).max() < 1e-15


def test_three_layer_mlp_matches_finite_differences():
    rng = Rng(1)
    w1, w2, w3 = rng.normal_np((5, 7)), rng.normal_np((7, 6)), rng.normal_np((6, 1))
    x = rng.normal_np((4, 5))

    def loss_w2(w):
        h = silu(Tensor(x) @ Tensor(w1))
        h = sigmoid(h @ w)
        return tsum((h @ Tensor(w3)) ** 2)

    check_op(loss_w2, w2)


def test_backward_rejects_non_scalar_and_untaped():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)
    with pytest.raises(RuntimeError):
        backward(tsum(Tensor(np.ones(3))))


def test_backward_consumes_graph():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x
    loss = tsum(y)
    backward(loss)
    assert loss._parents == () and y._parents == ()


def test_gradients_accumulate_across_uses():
    g = grad_of(lambda x: tsum(x * 3.0 + x * x), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [5.0, -1.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor(np.array([0.0])))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0])) / 0.0
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


# -- per-op gradient properties -----------------------------------------------

finite = st.floats(-3, 3, allow_nan=False, width=64)
vec = arrays(np.float64, st.integers(2, 6), elements=finite)
mat = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)), elements=finite)
positive = arrays(np.float64, st.integers(2, 6), elements=st.floats(0.2, 4, width=64))

UNARY = {
    "exp": lambda t: t.exp(),
    "sigmoid": sigmoid,
    "silu": silu,
    "square": lambda t: t * t,
    "neg_sub": lambda t: 1.0 - t,
    "softmax": lambda t: softmax(t) * np.arange(1.0, t.shape[-1] + 1),
    "mean": lambda t: tmean(t, axis=-1, keepdims=True) * t,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(x=mat)
def test_unary_ops_match_finite_differences(name, x):
    op = UNARY[name]
    check_op(lambda t: tsum(op(t) * np.cos(np.arange(t.size).reshape(t.shape))), x)


@settings(max_examples=15, deadline=None)
@given(x=positive)
def test_positive_domain_ops(x):
    for op in (log, sqrt, rsqrt, lambda t: t ** 1.5, lambda t: 2.0 / t):
        check_op(lambda t: tsum(op(t) * np.arange(1.0, t.size + 1)), x)


@settings(max_examples=15, deadline=None)
@given(a=mat, seed=st.integers(0, 100))
def test_matmul_and_broadcast_gradients(a, seed):
    rng = Rng(seed)
    b = rng.normal_np((a.shape[1], 3))
    bias = rng.normal_np(3)
    check_op(lambda t: tsum(matmul(t, Tensor(b)) ** 2), a)
    check_op(lambda t: tsum((Tensor(a) @ t + Tensor(bias)) ** 2), b)
    check_op(lambda t: tsum((Tensor(a) @ Tensor(b) * t) ** 2), bias)


def test_shape_ops_gradients():
    rng = Rng(3)
    x = rng.normal_np((2, 3, 4))
    w = rng.normal_np((2, 3, 4))
    check_op(lambda t: tsum(swap_last(t) * np.swapaxes(w, -1, -2)), x)
    check_op(lambda t: tsum(t.reshape(6, 4) ** 2 * w.reshape(6, 4)), x)
    check_op(lambda t: tsum(t[:, 1:, ::2] ** 2), x)
    check_op(lambda t: tsum(repeat(t, 2, axis=1) ** 2 * np.arange(6.0)[None, :, None]), x)
    check_op(lambda t: tsum(concat([t, t * 2.0], axis=-1) ** 2), x)
    check_op(lambda t: tsum(t.transpose(2, 0, 1) * np.transpose(w, (2, 0, 1))), x)


def test_embedding_gradient_scatters():
    w = Rng(4).normal_np((5, 3))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    check_op(lambda t: tsum(embedding(t, ids) ** 2), w)
    g = grad_of(lambda t: tsum(embedding(t, ids)), w)
    np.testing.assert_array_equal(g[:, 0], [2, 1, 2, 0, 1])


def test_cross_entropy_gradient_and_value():
    rng = Rng(5)
    z = rng.normal_np((2, 3, 7))
    tg = rng.integers(0, 7, size=(2, 3))
    mask = np.array([[True, False, True], [False, True, True]])
    check_op(lambda t: cross_entropy(t, tg, mask), z)
    lse = np.log(np.exp(z).sum(-1))
    picked = np.take_along_axis(z, tg[..., None], -1)[..., 0]
    expect = (lse - picked)[mask].mean()
    assert abs(cross_entropy(Tensor(z), tg, mask).item() - expect) < 1e-12


def test_rotate_pairs_gradient():
    rng = Rng(6)
    x = rng.normal_np((3, 4))
    ang = rng.normal_np((3, 2))
    check_op(lambda t: tsum(rotate_pairs(t, np.cos(ang), np.sin(ang)) * np.arange(12.0).reshape(3, 4)), x)


# -- softmax / matmul properties -------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(x=mat, c=st.floats(-50, 50, width=64))
def test_softmax_rows_and_shift_invariance(x, c):
    p = softmax(Tensor(x)).data
    assert np.abs(p.sum(-1) - 1).max() < 1e-12
    q = softmax(Tensor(x + c)).data
    assert np.abs(p - q).max() < 1e-12


def test_masked_softmax_zeroes_exactly():
    mask = np.tril(np.ones((4, 4), dtype=bool))
    p = softmax(Tensor(Rng(0).normal_np((4, 4))), mask=mask).data
    assert (p[~mask] == 0).all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5), k=st.integers(1, 5), m=st.integers(1, 5))
def test_matmul_matches_triple_loop_on_integers(seed, n, k, m):
    rng = Rng(seed)
    a = rng.integers(-9, 10, size=(n, k)).astype(float)
    b = rng.integers(-9, 10, size=(k, m)).astype(float)
    naive = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                naive[i, j] += a[i, t] * b[t, j]
    assert np.array_equal((Tensor(a) @ Tensor(b)).data, naive)


# -- finite differences and Jacobians --------------------------------------------


def test_finite_diff_examples():
    g = finite_diff_grad(lambda a: (a**2).sum(), np.array([1.0, 2.0]), h=1e-5)
    assert np.abs(g - [2, 4]).max() < 1e-8
    assert np.array_equal(finite_diff_grad(lambda a: 3.0, np.ones(4)), np.zeros(4))


def test_finite_diff_rejects_non_finite():
    with pytest.raises(Exception):
        finite_diff_grad(lambda a: np.log(a).sum(), np.array([0.0, 1.0]))


def test_jacobian_identity_and_linear():
    x = Rng(2).normal_np(5)
    np.testing.assert_allclose(jacobian_of(lambda t: t * 1.0, x, cross_check=True), np.eye(5), atol=1e-9)
    W = Rng(3).normal_np((4, 5))
    J = jacobian_of(lambda t: Tensor(W) @ t, x, cross_check=True)
    np.testing.assert_allclose(J, W, atol=1e-12)
    np.testing.assert_allclose(jacobian_of(lambda t: Tensor(W) @ t, x, method="fd"), W, atol=1e-8)


def test_jacobian_errors():
    with pytest.raises(ValueError):
        jacobian_of(lambda t: t, np.ones((2, 2)))
    with pytest.raises(ValueError):
        jacobian_of(lambda t: t, np.ones(200))
    with pytest.raises(ValueError):
        jacobian_of(lambda t: t, np.ones(3), method="bogus")


# -- linear algebra -----------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_lu_determinant_matches_numpy(seed, n):
    a = Rng(seed).normal_np((n, n))
    sign, logabs = slogdet(a)
    ref_sign, ref_log = np.linalg.slogdet(a)
    assert sign == ref_sign
    assert abs(logabs - ref_log) < 1e-10
    assert abs(det(a) - np.linalg.det(a)) <= 1e-10 * max(1.0, abs(np.linalg.det(a)))


def test_lu_reconstructs_permuted_matrix():
    a = Rng(9).normal_np((6, 6))
    lu, perm, _ = lu_factor(a)
    L = np.tril(lu, -1) + np.eye(6)
    U = np.triu(lu)
    np.testing.assert_allclose(L @ U, a[perm], atol=1e-12)


def test_singular_matrix_raises():
    with pytest.raises(SingularMatrixError):
        lu_factor(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_huge_determinant_via_log_accumulation():
    a = np.diag(np.full(40, 1e10))
    sign, logabs = slogdet(a)
    assert sign == 1 and abs(logabs - 40 * math.log(1e10)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 9), n=st.integers(1, 9))
def test_jacobi_svd_matches_lapack(seed, m, n):
    a = Rng(seed).normal_np((m, n))
    ours = singular_values(a)
    ref = np.linalg.svd(a, compute_uv=False)
    assert np.abs(ours[: len(ref)] - ref).max() < 1e-10 * max(1.0, ref[0])


# -- rng -----------------------------------------------------------------------------


def test_rng_determinism_and_streams():
    a = rng_normal(Rng(42), (3, 4)).data
    b = rng_normal(Rng(42), (3, 4)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(Rng(42).split("x").normal_np(4), Rng(42).split("y").normal_np(4))
    assert not np.array_equal(Rng(42).split(1).normal_np(4), Rng(42).split(1).split(1).normal_np(4))


def test_rng_normal_statistics():
    x = Rng(7).normal_np(1_000_000)
    assert abs(x.mean()) < 0.01


def test_rng_uniform_int_range_and_errors():
    rng = Rng(8)
    xs = [rng_uniform_int(rng, 0, 64) for _ in range(2000)]
    assert min(xs) >= 0 and max(xs) < 64
    with pytest.raises(ValueError):
        rng.uniform_int(3, 3)


def test_rng_state_roundtrip():
    rng = Rng(11)
    rng.normal_np(5)
    state = rng.get_state()
    a = rng.normal_np(7)
    other = Rng(0)
    other.set_state(state)
    assert np.array_equal(a, other.normal_np(7))
