"""Attention mechanisms: standard, coupled QK dynamics (leapfrog / Euler),
MLP-only, grouped-query and differential attention.

All per-head tensors are laid out ``[batch, heads, seq, d_k]``. The step
functions only use ``+``, ``*`` and the coupling callable, so they work on
plain ndarrays as well as on :class:`~coupled_qk.numerics.Tensor`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .numerics import Tensor, as_tensor, exp, matmul, repeat, silu, softmax, swap_last
from .numerics.tensor import silu_np

KINDS = ("standard", "coupled_leapfrog", "coupled_euler", "mlp_only", "gqa", "diff")
COUPLED_KINDS = ("coupled_leapfrog", "coupled_euler")
MAX_STEPS = 7


@dataclass(frozen=True)
class AttentionVariant:
    kind: str = "standard"
    n_steps: int = 3
    dt_init: float = 0.1
    gqa_group: int = 4  # query heads per KV head

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= self.n_steps <= MAX_STEPS:
            raise ValueError(f"n_steps must be in [0, {MAX_STEPS}], got {self.n_steps}")
        if self.dt_init <= 0:
            raise ValueError("dt_init must be positive")
        if self.gqa_group < 1:
            raise ValueError("gqa_group must be >= 1")

    @property
    def coupled(self) -> bool:
        return self.kind in COUPLED_KINDS

    @property
    def has_coupling_net(self) -> bool:
        return self.kind in COUPLED_KINDS or self.kind == "mlp_only"

    def kv_heads(self, n_heads: int) -> int:
        if self.kind != "gqa":
            return n_heads
        if n_heads % self.gqa_group:
            raise ValueError(
                f"gqa needs n_heads ({n_heads}) divisible by group size ({self.gqa_group})"
            )
        return n_heads // self.gqa_group

    def check(self, n_heads: int, d_k: int) -> None:
        self.kv_heads(n_heads)
        if self.kind == "diff" and d_k % 2:
            raise ValueError(f"diff attention needs an even d_k, got {d_k}")

    def to_dict(self) -> dict:
        return asdict(self)


def causal_mask(seq_len: int) -> np.ndarray:
    """Boolean ``[seq, seq]`` mask, True where query i may attend key j (j <= i)."""
    return np.tril(np.ones((seq_len, seq_len), dtype=bool))


def _check_mask(mask, t_q, t_k):
    if mask is None:
        return causal_mask(t_k)[-t_q:]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (t_q, t_k):
        raise ValueError(f"mask shape {mask.shape} does not match scores ({t_q}, {t_k})")
    return mask


def sdpa(Q: Tensor, K: Tensor, V: Tensor, mask=None, scale: Optional[float] = None):
    """softmax(Q K^T / sqrt(d_k) + mask) V. Returns ``(output, weights)``."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    d_k = Q.shape[-1]
    if d_k == 0:
        raise ValueError("d_k must be positive")
    mask = _check_mask(mask, Q.shape[-2], K.shape[-2])
    if scale is None:
        scale = 1.0 / math.sqrt(d_k)
    scores = matmul(Q, swap_last(K)) * scale
    weights = softmax(scores, mask=mask)
    return matmul(weights, V), weights


# ---------------------------------------------------------------------------
# Coupled dynamics
# ---------------------------------------------------------------------------


class CouplingNetwork:
    """f(q) = SiLU(q W1) W2 on row vectors; two d_k x d_k matrices, no biases.

    Weights are shared across heads within a layer and applied at every
    (batch, head, position) independently.
    """

    def __init__(self, w1, w2):
        self.w1 = w1
        self.w2 = w2

    def __call__(self, q):
        if isinstance(q, Tensor) or isinstance(self.w1, Tensor):
            return matmul(silu(matmul(as_tensor(q), as_tensor(self.w1))), as_tensor(self.w2))
        return silu_np(q @ self.w1) @ self.w2

    @property
    def n_params(self) -> int:
        return int(np.size(_raw(self.w1)) + np.size(_raw(self.w2)))


def _raw(w):
    return w.data if isinstance(w, Tensor) else np.asarray(w)


def coupled_step_euler(q, k, dt, f: Callable):
    """Forward Euler: both updates read the time-t state (f at the OLD q)."""
    return q + dt * k, k + dt * f(q)


def coupled_step_leapfrog(q, k, dt, f: Callable):
    """Kick-drift-kick Stormer-Verlet step."""
    half = 0.5 * dt
    k_half = k + half * f(q)
    q_next = q + dt * k_half
    k_next = k_half + half * f(q_next)
    return q_next, k_next


STEP_FUNCTIONS = {
    "coupled_euler": coupled_step_euler,
    "coupled_leapfrog": coupled_step_leapfrog,
}


def step_sizes(tau: Tensor) -> Tensor:
    """Per-head dt = exp(tau), shaped to broadcast over [batch, heads, seq, d_k]."""
    tau = as_tensor(tau)
    return exp(tau).reshape(1, tau.shape[0], 1, 1)


def evolve_qk(Q, K, kind: str, n_steps: int, tau, f: Callable):
    """Apply ``n_steps`` coupled updates with per-head dt = exp(tau)."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if kind not in STEP_FUNCTIONS:
        raise ValueError(f"evolve_qk needs a coupled kind, got {kind!r}")
    if n_steps == 0:
        return Q, K
    step = STEP_FUNCTIONS[kind]
    dt = step_sizes(tau)
    for _ in range(n_steps):
        Q, K = step(Q, K, dt, f)
    return Q, K


def mlp_only_transform(Q, f: Callable):
    """Residual MLP on queries only: Q + f(Q). Keys are left alone."""
    return Q + f(Q)


# ---------------------------------------------------------------------------
# Published baselines
# ---------------------------------------------------------------------------


def repeat_kv(x: Tensor, group: int) -> Tensor:
    """Expand KV heads so query head h reads KV head h // group."""
    return x if group == 1 else repeat(as_tensor(x), group, axis=1)


def gqa_attention(Q, K, V, mask=None):
    """Grouped-query attention: K, V carry ``H / group`` heads."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    n_heads, n_kv = Q.shape[1], K.shape[1]
    if n_kv == 0 or n_heads % n_kv or V.shape[1] != n_kv:
        raise ValueError(f"query heads ({n_heads}) not divisible by KV heads ({n_kv})")
    group = n_heads // n_kv
    return sdpa(Q, repeat_kv(K, group), repeat_kv(V, group), mask)


def diff_attention(Q, K, V, mask=None, lam=None):
    """Differential attention with per-head ``lam``.

    Heads split into halves of width d_s = d_k / 2; the effective weights are
    softmax(Q1 K1^T / sqrt(d_s)) - lam * softmax(Q2 K2^T / sqrt(d_s)), applied
    to the full-width V. Returns ``(output, effective_weights)``.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    d_k = Q.shape[-1]
    if d_k % 2:
        raise ValueError(f"diff attention needs an even d_k, got {d_k}")
    d_s = d_k // 2
    mask = _check_mask(mask, Q.shape[-2], K.shape[-2])
    scale = 1.0 / math.sqrt(d_s)
    a1 = softmax(matmul(Q[..., :d_s], swap_last(K[..., :d_s])) * scale, mask=mask)
    a2 = softmax(matmul(Q[..., d_s:], swap_last(K[..., d_s:])) * scale, mask=mask)
    lam = as_tensor(0.0 if lam is None else lam)
    if lam.ndim == 1:
        lam = lam.reshape(1, lam.shape[0], 1, 1)
    weights = a1 - lam * a2
    return matmul(weights, V), weights


def lambda_init(layer_index: int) -> float:
    """Initial differential-attention lambda for layer ``layer_index`` (0-based)."""
    if layer_index < 0:
        raise ValueError("layer index must be non-negative")
    return 0.8 - 0.6 * math.exp(-0.3 * layer_index)
