"""Self-contained invariant suite behind ``cqk verify``.

Each check returns a :class:`CheckResult`; :func:`run_checks` runs them all
and never lets one crashing check hide the others.
"""

from __future__ import annotations

import math
import time
import traceback
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import attention as attn
from . import diagnostics as diag
from .attention import AttentionVariant, CouplingNetwork
from .model import Model, ModelConfig, count_params, preset
from .numerics import Rng, Tensor, backward, no_grad

TABLE9_DELTAS = {
    "coupled_leapfrog": 65_600,
    "coupled_euler": 65_600,
    "diff": 64,
    "gqa": 57_197_568 - 60_343_296,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def nano_config(kind: str = "standard", n_steps: int = 3, positional: str = "learned",
                seq_len: int = 16, vocab: int = 64) -> ModelConfig:
    """d=32, H=2, L=2 micro model; GQA uses 2 query heads per KV head."""
    variant = AttentionVariant(kind=kind, n_steps=n_steps, gqa_group=2)
    return preset("nano", vocab, seq_len, variant, positional)


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------


def check_param_ledger() -> CheckResult:
    std = count_params(preset("small")).total
    lines, ok = [], True
    for kind, expected in TABLE9_DELTAS.items():
        ledger = count_params(preset("small", variant=AttentionVariant(kind=kind)))
        delta = ledger.total - std
        good = delta == expected
        if kind != "gqa":
            good = good and ledger.variant_specific == expected
        ok &= good
        lines.append(f"{kind} {delta:+,d}")
    return CheckResult("param_ledger", ok, "; ".join(lines))


def check_symplecticity(integrators: Optional[Dict[str, diag.Integrator]] = None) -> CheckResult:
    """Declared-symplectic integrators must have unit step determinant, others must not."""
    integrators = integrators or diag.INTEGRATORS
    ok, lines = True, []
    for name, integ in integrators.items():
        if integ.symplectic:
            worst = 0.0
            for d_k in (2, 4, 8):
                res = diag.symplecticity_check(integ, None, None, d_k, 100, Rng(11).split(d_k))
                worst = max(worst, res["max_abs_dev"])
            good = worst < 1e-8
            lines.append(f"{name}: max|det-1|={worst:.2e} (need <1e-8)")
        else:
            res = diag.symplecticity_check(integ, None, 0.1, 4, 100, Rng(12))
            good = res["min_abs_dev"] > 1e-6
            lines.append(f"{name}: min|det-1|={res['min_abs_dev']:.2e} (need >1e-6)")
        ok &= good
    # scalar harmonic case for Euler: det = 1 + dt^2
    dt = 0.1
    det = diag.step_determinant(integrators["euler"], diag.harmonic_force, dt,
                                np.array([0.3]), np.array([-0.7]))
    good = abs(det - (1 + dt * dt)) < 1e-12
    ok &= good
    lines.append(f"euler f=-q det={det:.15f}")
    return CheckResult("symplecticity", ok, "; ".join(lines))


def leapfrog_roundtrip_error(seed: int, n_steps: int = 7) -> float:
    """Max-norm error of n leapfrog steps followed by n steps with dt negated."""
    rng = Rng(seed).split("reverse")
    B, H, T, d = 2, 2, 5, 8
    f = diag.random_coupling(rng, d)
    f = CouplingNetwork(f.w1.data, f.w2.data)
    dt = np.exp(rng.normal_np((1, H, 1, 1), math.log(0.1), 0.3))
    q0, k0 = rng.normal_np((B, H, T, d)), rng.normal_np((B, H, T, d))
    q, k = q0, k0
    for _ in range(n_steps):
        q, k = attn.coupled_step_leapfrog(q, k, dt, f)
    for _ in range(n_steps):
        q, k = attn.coupled_step_leapfrog(q, k, -dt, f)
    return float(max(np.abs(q - q0).max(), np.abs(k - k0).max()))


def check_reversibility() -> CheckResult:
    errs = [leapfrog_roundtrip_error(s) for s in (0, 1, 2)]
    return CheckResult("reversibility", max(errs) < 1e-10, f"max err {max(errs):.2e} (need <1e-10)")


def check_energy() -> CheckResult:
    dt = 0.1
    eu = diag.energy_trace("euler", dt, 100, [1.0], [0.0])
    exact = [eu[0] * (1 + dt * dt) ** n for n in range(101)]
    eu_err = max(abs(a - b) / b for a, b in zip(eu, exact))
    lf = diag.energy_trace("leapfrog", dt, 10_000, [1.0], [0.0])
    lf_err = max(abs(h - lf[0]) / lf[0] for h in lf)
    ok = eu_err < 1e-10 and lf_err < dt * dt
    return CheckResult("energy", ok, f"euler rel err {eu_err:.1e}; leapfrog drift {lf_err:.2e} (< {dt*dt})")


def check_identity_limit() -> CheckResult:
    tokens = Rng(5).integers(0, 64, size=(2, 16))
    with no_grad():
        ref = Model(nano_config("standard"), seed=3).forward(tokens).data
        same = []
        for kind in attn.COUPLED_KINDS:
            out = Model(nano_config(kind, n_steps=0), seed=3).forward(tokens).data
            same.append(np.array_equal(out, ref))
    rng = Rng(6)
    f = CouplingNetwork(np.zeros((4, 4)), np.zeros((4, 4)))
    q, k = rng.normal_np((1, 2, 3, 4)), rng.normal_np((1, 2, 3, 4))
    tau = np.log([0.1, 0.2])
    dt = np.exp(tau).reshape(1, 2, 1, 1)
    q1, k1 = q, k
    for _ in range(3):
        q1, k1 = attn.coupled_step_euler(q1, k1, dt, f)
    k_same = np.array_equal(k1, k)
    drift = np.abs(q1 - (q + 3 * dt * k)).max()
    ok = all(same) and k_same and drift < 1e-14
    return CheckResult("identity_limit", ok,
                       f"n_steps=0 bit-equal {same}; zero-f K unchanged {k_same}; drift err {drift:.1e}")


def check_grad(kinds=attn.KINDS, max_coords: Optional[int] = 48) -> CheckResult:
    worst, lines, ok = 0.0, [], True
    for kind in kinds:
        rep = diag.grad_check_model(nano_config(kind), 1e-4, seed=0, max_coords=max_coords)
        worst = max(worst, rep["worst_rel_err"])
        ok &= rep["passed"]
        lines.append(f"{kind} {rep['worst_rel_err']:.1e}")
    return CheckResult("grad_check", ok, "; ".join(lines))


def attention_invariants(seed: int = 0) -> dict:
    """Numbers behind the attention invariant check (also used by tests)."""
    rng = Rng(seed).split("attn-invariants")
    B, H, T, d = 2, 4, 7, 6
    mask = attn.causal_mask(T)
    out = {}
    Q, K = rng.normal_np((B, H, T, d)), rng.normal_np((B, H, T, d))
    V = Tensor(rng.normal_np((B, H, T, d)), requires_grad=True)
    o, w = attn.sdpa(Q, K, V, mask)
    out["upper_max"] = float(np.abs(w.data[..., ~mask]).max())
    out["row_sum_err"] = float(np.abs(w.data.sum(-1) - 1).max())
    # d out_i / d V_j must vanish for j > i
    leak = 0.0
    for i in range(T):
        V.grad = None
        Vt = V
        oo, _ = attn.sdpa(Q, K, Vt, mask)
        backward(oo[:, :, i, :].sum())
        leak = max(leak, float(np.abs(V.grad[:, :, i + 1:, :]).max(initial=0.0)))
    out["value_grad_leak"] = leak
    lam = np.array([0.2, 0.35, 0.5, 0.8])
    _, wd = attn.diff_attention(Q, K, Tensor(V.data), mask, lam)
    out["diff_row_sum_err"] = float(np.abs(wd.data.sum(-1) - (1 - lam)[None, :, None]).max())
    Kg, Vg = rng.normal_np((B, 1, T, d)), rng.normal_np((B, 1, T, d))
    og, _ = attn.gqa_attention(Q, Kg, Vg, mask)
    orep, _ = attn.sdpa(Q, np.repeat(Kg, H, axis=1), np.repeat(Vg, H, axis=1), mask)
    out["gqa_err"] = float(np.abs(og.data - orep.data).max())
    return out


def check_attention() -> CheckResult:
    r = attention_invariants()
    ok = (r["upper_max"] == 0.0 and r["value_grad_leak"] == 0.0 and r["row_sum_err"] < 1e-10
          and r["diff_row_sum_err"] < 1e-10 and r["gqa_err"] < 1e-12)
    detail = ", ".join(f"{k}={v:.1e}" for k, v in r.items())
    return CheckResult("attention_invariants", ok, detail)


def check_analysis_oracles() -> CheckResult:
    one_hot = np.eye(5)
    uniform = np.full((1, 7), 1 / 7)
    e1 = diag.attention_entropy(one_hot, 2)
    e2 = abs(diag.attention_entropy(uniform, 0) - math.log(7))
    r1 = abs(diag.effective_rank(np.eye(9)) - 9)
    u, v = Rng(8).normal_np(6), Rng(9).normal_np(6)
    r2 = abs(diag.effective_rank(np.outer(u, v)) - 1)
    A = Rng(10).normal_np((6, 6))
    r3 = abs(diag.effective_rank(A) - diag.effective_rank(3.7 * A))
    ok = e1 == 0 and e2 < 1e-12 and r1 < 1e-9 and r2 < 1e-9 and r3 < 1e-9
    return CheckResult("analysis_oracles", ok,
                       f"H(one-hot)={e1}, |H(unif)-ln7|={e2:.1e}, rank errs {r1:.1e},{r2:.1e}, scale {r3:.1e}")


def rope_shift_gap(positional: str, kind: str = "standard", shift: int = 5, seed: int = 0) -> float:
    """Max |attention logit change| when every position is shifted by ``shift``."""
    cfg = nano_config(kind, positional=positional, seq_len=32)
    model = Model(cfg, seed=seed)
    tokens = Rng(seed).split("rope").integers(0, 64, size=(2, 12))
    mask = attn.causal_mask(12)
    with no_grad():
        model.forward(tokens, pos_offset=0, record=True)
        a = [s[..., mask] for s in model.last_trace["scores"]]
        model.forward(tokens, pos_offset=shift, record=True)
        b = [s[..., mask] for s in model.last_trace["scores"]]
    return max(float(np.abs(x - y).max()) for x, y in zip(a, b))


def check_rope() -> CheckResult:
    gaps = {k: rope_shift_gap("rope", k) for k in ("standard", "coupled_leapfrog", "diff")}
    learned = rope_shift_gap("learned")
    ok = max(gaps.values()) < 1e-10 and learned > 1e-3
    return CheckResult("rope_shift", ok,
                       f"rope max gap {max(gaps.values()):.1e}; learned gap {learned:.1e}")


CHECKS: List[Callable[[], CheckResult]] = [
    check_param_ledger,
    check_symplecticity,
    check_reversibility,
    check_energy,
    check_identity_limit,
    check_attention,
    check_analysis_oracles,
    check_rope,
    check_grad,
]


def run_checks(checks=None) -> List[CheckResult]:
    results = []
    for fn in checks or CHECKS:
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as err:  # a crashing check is a failed check
            name = getattr(fn, "__name__", "check").replace("check_", "")
            res = CheckResult(name, False, f"error: {err!r}\n{traceback.format_exc(limit=3)}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  status  time    detail"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name.ljust(width)}  {status}    {r.seconds:5.1f}s  {r.detail}")
    return "\n".join(lines)
