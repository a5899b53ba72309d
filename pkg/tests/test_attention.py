import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupled_qk import attention as attn
from coupled_qk import diagnostics as diag
from coupled_qk.attention import AttentionVariant, CouplingNetwork
from coupled_qk.numerics import Rng, Tensor, backward, finite_diff_grad, relative_error, tsum
from coupled_qk.verify import attention_invariants, leapfrog_roundtrip_error


def linear_force(q):
    return -q


def rand_qkv(seed, B=2, H=2, T=5, d=4):
    rng = Rng(seed)
    return rng.normal_np((B, H, T, d)), rng.normal_np((B, H, T, d)), rng.normal_np((B, H, T, d))


# -- variant config ---------------------------------------------------------------


def test_variant_validation():
    for n in range(attn.MAX_STEPS + 1):
        AttentionVariant("coupled_leapfrog", n_steps=n)
    with pytest.raises(ValueError):
        AttentionVariant("coupled_euler", n_steps=8)
    with pytest.raises(ValueError):
        AttentionVariant("coupled_euler", n_steps=-1)
    with pytest.raises(ValueError):
        AttentionVariant("linear")
    with pytest.raises(ValueError):
        AttentionVariant("gqa").kv_heads(6)
    with pytest.raises(ValueError):
        AttentionVariant("diff").check(2, 5)
    assert AttentionVariant("gqa").kv_heads(8) == 2
    assert AttentionVariant("gqa", gqa_group=2).kv_heads(2) == 1


# -- sdpa -------------------------------------------------------------------------


def test_single_token_attends_to_itself():
    V = np.array([[[[1.5, -2.0, 0.25]]]])
    out, w = attn.sdpa(np.ones((1, 1, 1, 3)), np.ones((1, 1, 1, 3)), V)
    assert w.data.tolist() == [[[[1.0]]]]
    assert np.array_equal(out.data, V)


def test_zero_scores_give_uniform_causal_rows():
    T = 6
    z = np.zeros((1, 1, T, 4))
    _, w = attn.sdpa(z, z, Rng(0).normal_np((1, 1, T, 4)))
    for i in range(T):
        row = w.data[0, 0, i]
        np.testing.assert_allclose(row[: i + 1], 1.0 / (i + 1), rtol=0, atol=1e-15)
        assert abs(diag.attention_entropy(w.data[0, 0], i) - math.log(i + 1)) < 1e-12


def test_two_by_two_hand_case():
    Q = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    _, w = attn.sdpa(Q, Q, Q)
    s = 1 / math.sqrt(2)
    row1 = np.exp([0.0, s]) / np.exp([0.0, s]).sum()
    np.testing.assert_allclose(w.data[0, 0, 1], row1, rtol=0, atol=1e-15)
    np.testing.assert_allclose(w.data[0, 0, 0], [1.0, 0.0], rtol=0, atol=0)


def test_sdpa_errors():
    with pytest.raises(ValueError):
        attn.sdpa(np.zeros((1, 1, 2, 0)), np.zeros((1, 1, 2, 0)), np.zeros((1, 1, 2, 1)))
    q = np.zeros((1, 1, 3, 2))
    with pytest.raises(ValueError):
        attn.sdpa(q, q, q, mask=attn.causal_mask(4))


def test_causality_and_row_sums():
    r = attention_invariants(seed=3)
    assert r["upper_max"] == 0.0
    assert r["value_grad_leak"] == 0.0
    assert r["row_sum_err"] < 1e-10
    assert r["diff_row_sum_err"] < 1e-10
    assert r["gqa_err"] < 1e-12


# -- integrator steps ----------------------------------------------------------------


def test_euler_linear_force_example():
    q, k = attn.coupled_step_euler(np.array([1.0]), np.array([0.0]), 0.1, linear_force)
    assert q.tolist() == [1.0] and abs(k[0] + 0.1) < 1e-15


def test_leapfrog_linear_force_example():
    q, k = attn.coupled_step_leapfrog(np.array([1.0]), np.array([0.0]), 0.1, linear_force)
    assert abs(q[0] - 0.995) < 1e-15
    assert abs(k[0] + 0.09975) < 1e-15


@pytest.mark.parametrize("step", [attn.coupled_step_euler, attn.coupled_step_leapfrog])
def test_zero_coupling_is_pure_drift(step):
    rng = Rng(1)
    q, k = rng.normal_np((2, 3)), rng.normal_np((2, 3))
    f = CouplingNetwork(np.zeros((3, 3)), np.zeros((3, 3)))
    q1, k1 = step(q, k, 0.3, f)
    assert np.array_equal(k1, k)
    np.testing.assert_allclose(q1, q + 0.3 * k, rtol=0, atol=1e-15)


def test_euler_evaluates_force_at_old_query():
    calls = []

    def f(q):
        calls.append(np.array(q))
        return -q

    q0 = np.array([2.0])
    attn.coupled_step_euler(q0, np.array([1.0]), 0.5, f)
    assert len(calls) == 1 and np.array_equal(calls[0], q0)


def test_evolve_qk_composition_and_identity():
    rng = Rng(2)
    Q, K = rng.normal_np((1, 2, 3, 4)), rng.normal_np((1, 2, 3, 4))
    f = diag.random_coupling(rng, 4)
    f = CouplingNetwork(f.w1.data, f.w2.data)
    tau = np.log([0.1, 0.3])
    q0, k0 = attn.evolve_qk(Q, K, "coupled_euler", 0, tau, f)
    assert q0 is Q and k0 is K
    q2, k2 = attn.evolve_qk(Tensor(Q), Tensor(K), "coupled_euler", 2, Tensor(tau), f)
    dt = np.exp(tau).reshape(1, 2, 1, 1)
    a, b = attn.coupled_step_euler(Q, K, dt, f)
    a, b = attn.coupled_step_euler(a, b, dt, f)
    np.testing.assert_allclose(q2.data, a, rtol=0, atol=1e-14)
    np.testing.assert_allclose(k2.data, b, rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        attn.evolve_qk(Q, K, "coupled_euler", -1, tau, f)
    with pytest.raises(ValueError):
        attn.evolve_qk(Q, K, "standard", 1, tau, f)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_leapfrog_time_reversal(seed):
    assert leapfrog_roundtrip_error(seed) < 1e-10


def test_euler_drift_composition_with_zero_coupling():
    rng = Rng(4)
    Q, K = rng.normal_np((1, 2, 3, 4)), rng.normal_np((1, 2, 3, 4))
    f = CouplingNetwork(np.zeros((4, 4)), np.zeros((4, 4)))
    tau = np.log([0.2, 0.05])
    for n in range(5):
        q, k = attn.evolve_qk(Tensor(Q), Tensor(K), "coupled_euler", n, Tensor(tau), f)
        dt = np.exp(tau).reshape(1, 2, 1, 1)
        assert np.array_equal(k.data, K)
        np.testing.assert_allclose(q.data, Q + n * dt * K, rtol=0, atol=1e-14)


def test_gradients_flow_through_steps_and_tau():
    rng = Rng(5)
    Q, K, V = rand_qkv(5, B=1, T=4)
    w1, w2 = rng.normal_np((4, 4), 0, 0.5), rng.normal_np((4, 4), 0, 0.5)
    tau0 = np.log([0.1, 0.4])
    weights = rng.normal_np((1, 2, 4, 4))

    def loss(tau, kind):
        f = CouplingNetwork(Tensor(w1), Tensor(w2))
        q, k = attn.evolve_qk(Tensor(Q), Tensor(K), kind, 3, tau, f)
        out, _ = attn.sdpa(q, k, Tensor(V))
        return tsum(out * weights)

    for kind in attn.COUPLED_KINDS:
        t = Tensor(tau0, requires_grad=True)
        backward(loss(t, kind))
        num = finite_diff_grad(lambda a: loss(Tensor(a), kind), tau0)
        assert relative_error(t.grad, num) < 1e-6


# -- mlp-only -------------------------------------------------------------------------


def test_mlp_only_examples():
    rng = Rng(6)
    Q = rng.normal_np((1, 2, 3, 4))
    zero = CouplingNetwork(np.zeros((4, 4)), np.zeros((4, 4)))
    assert np.array_equal(attn.mlp_only_transform(Q, zero), Q)
    w1, w2 = rng.normal_np((4, 4)), rng.normal_np((4, 4))
    f = CouplingNetwork(w1, w2)
    direct = np.zeros_like(Q)
    for idx in np.ndindex(Q.shape[:-1]):
        h = Q[idx] @ w1
        direct[idx] = (h / (1 + np.exp(-h))) @ w2
    np.testing.assert_allclose(attn.mlp_only_transform(Q, f) - Q, direct, rtol=1e-12, atol=1e-12)


def test_mlp_only_key_gradient_matches_standard():
    Q, K, V = rand_qkv(7)
    rng = Rng(8)
    f = CouplingNetwork(Tensor(rng.normal_np((4, 4))), Tensor(rng.normal_np((4, 4))))
    Qm = attn.mlp_only_transform(Tensor(Q), f)
    w = rng.normal_np(V.shape)
    k1 = Tensor(K, requires_grad=True)
    backward(tsum(attn.sdpa(Qm.data, k1, V)[0] * w))
    k2 = Tensor(K, requires_grad=True)
    backward(tsum(attn.sdpa(Tensor(Qm.data), k2, V)[0] * w))
    assert np.array_equal(k1.grad, k2.grad)


# -- gqa ----------------------------------------------------------------------------


def test_gqa_single_kv_head_broadcasts():
    rng = Rng(9)
    Q = rng.normal_np((2, 4, 5, 3))
    K, V = rng.normal_np((2, 1, 5, 3)), rng.normal_np((2, 1, 5, 3))
    out, _ = attn.gqa_attention(Q, K, V)
    ref, _ = attn.sdpa(Q, np.broadcast_to(K, Q.shape), np.broadcast_to(V, Q.shape))
    assert np.abs(out.data - ref.data).max() < 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), group=st.sampled_from([1, 2, 4]), kv=st.integers(1, 3))
def test_gqa_equals_replicated_sdpa(seed, group, kv):
    rng = Rng(seed)
    H = kv * group
    Q = rng.normal_np((1, H, 4, 2))
    K, V = rng.normal_np((1, kv, 4, 2)), rng.normal_np((1, kv, 4, 2))
    out, _ = attn.gqa_attention(Q, K, V)
    ref, _ = attn.sdpa(Q, np.repeat(K, group, axis=1), np.repeat(V, group, axis=1))
    assert np.abs(out.data - ref.data).max() < 1e-12


def test_gqa_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        attn.gqa_attention(np.zeros((1, 3, 2, 2)), np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 2)))


# -- differential attention ------------------------------------------------------------


def test_diff_lambda_zero_is_first_subhead_sdpa():
    Q, K, V = rand_qkv(10)
    out, w = attn.diff_attention(Q, K, V, lam=np.zeros(2))
    ref, rw = attn.sdpa(Q[..., :2], K[..., :2], V)
    assert np.array_equal(w.data, rw.data)
    assert np.abs(out.data - ref.data).max() < 1e-15


def test_diff_perfect_cancellation():
    Q, K, V = rand_qkv(11)
    Q = np.concatenate([Q[..., :2], Q[..., :2]], -1)
    K = np.concatenate([K[..., :2], K[..., :2]], -1)
    out, w = attn.diff_attention(Q, K, V, lam=np.ones(2))
    assert np.abs(out.data).max() == 0.0 and np.abs(w.data).max() == 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), lam=st.floats(0.0, 1.0))
def test_diff_rows_sum_to_one_minus_lambda(seed, lam):
    Q, K, V = rand_qkv(seed)
    _, w = attn.diff_attention(Q, K, V, lam=np.array([lam, lam / 2]))
    sums = w.data.sum(-1)
    assert np.abs(sums[:, 0] - (1 - lam)).max() < 1e-10
    assert np.abs(sums[:, 1] - (1 - lam / 2)).max() < 1e-10


def test_diff_rejects_odd_width():
    with pytest.raises(ValueError):
        attn.diff_attention(np.zeros((1, 1, 2, 3)), np.zeros((1, 1, 2, 3)), np.zeros((1, 1, 2, 3)))


def test_lambda_init_values():
    assert attn.lambda_init(0) == pytest.approx(0.2, abs=1e-15)
    assert abs(attn.lambda_init(1) - 0.35551) < 1e-5
    vals = [attn.lambda_init(i) for i in range(60)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert abs(vals[-1] - 0.8) < 1e-7
    with pytest.raises(ValueError):
        attn.lambda_init(-1)


def test_variant_gradients_match_finite_differences():
    Q, K, V = rand_qkv(12, B=1, T=4)
    w = Rng(13).normal_np((1, 2, 4, 4))
    lam0 = np.array([0.3, 0.6])
    cases = {
        "sdpa_q": (lambda a: attn.sdpa(a, K, V)[0], Q),
        "sdpa_k": (lambda a: attn.sdpa(Q, a, V)[0], K),
        "gqa_v": (lambda a: attn.gqa_attention(Q, a, a)[0], V[:, :1]),
        "diff_lam": (lambda a: attn.diff_attention(Q, K, V, lam=a)[0], lam0),
        "diff_q": (lambda a: attn.diff_attention(a, K, V, lam=lam0)[0], Q),
    }
    for name, (fn, x) in cases.items():
        t = Tensor(x, requires_grad=True)
        backward(tsum(fn(t) * w))
        num = finite_diff_grad(lambda a: tsum(fn(Tensor(a)) * w), x)
        assert relative_error(t.grad, num) < 1e-6, name
