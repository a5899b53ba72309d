"""Attention and integrator diagnostics: entropy, effective rank, step-map
Jacobian determinants, harmonic energy traces, attention dumps and
full-model gradient checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import attention as attn
from .attention import CouplingNetwork
from .model import Model, ModelConfig, count_params, init_params
from .numerics import (
    Rng,
    Tensor,
    backward,
    concat,
    finite_diff_grad,
    jacobian_of,
    no_grad,
    relative_error,
    singular_values,
    slogdet,
)

ROW_SUM_TOL = 1e-6


# ---------------------------------------------------------------------------
# Entropy and effective rank
# ---------------------------------------------------------------------------


def _row_entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def attention_entropy(A: np.ndarray, row_index: int) -> float:
    """Shannon entropy (nats) of one attention row, with 0 log 0 = 0."""
    row = np.asarray(A, dtype=np.float64)[row_index]
    if abs(row.sum() - 1.0) > ROW_SUM_TOL:
        raise ValueError(f"row {row_index} sums to {row.sum():.9f}, not 1")
    return float(_row_entropy(row))


def layer_mean_entropy(A: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean row entropy over every row of ``A[..., T, T]`` (batch, heads, queries).

    Entries outside ``mask`` (default causal) must be zero.
    """
    A = np.asarray(A, dtype=np.float64)
    T = A.shape[-1]
    mask = attn.causal_mask(T)[-A.shape[-2]:] if mask is None else np.asarray(mask, dtype=bool)
    if np.abs(np.where(mask, 0.0, A)).max(initial=0.0) > 0:
        raise ValueError("attention mass found on masked positions")
    sums = A.sum(axis=-1)
    if np.abs(sums - 1.0).max() > ROW_SUM_TOL:
        raise ValueError("attention rows do not sum to 1")
    return float(_row_entropy(A).mean())


def effective_rank(A: np.ndarray) -> float:
    """Participation ratio (sum s)^2 / sum s^2 of the singular values of ``A``."""
    s = singular_values(np.asarray(A, dtype=np.float64))
    denom = float(np.sum(s * s))
    if denom == 0.0:
        raise ValueError("effective rank of an all-zero matrix is undefined")
    return float(np.sum(s) ** 2 / denom)


def mean_effective_rank(weights: np.ndarray) -> float:
    """Average effective rank over every ``[T, T]`` slice of ``weights``."""
    mats = np.asarray(weights).reshape(-1, *weights.shape[-2:])
    return float(np.mean([effective_rank(m) for m in mats]))


# ---------------------------------------------------------------------------
# Integrators: symplecticity and energy
# ---------------------------------------------------------------------------


@dataclass
class Integrator:
    name: str
    step: Callable
    symplectic: bool


INTEGRATORS: Dict[str, Integrator] = {
    "leapfrog": Integrator("leapfrog", attn.coupled_step_leapfrog, True),
    "euler": Integrator("euler", attn.coupled_step_euler, False),
}


def _integrator(which) -> Integrator:
    if isinstance(which, Integrator):
        return which
    key = which.replace("coupled_", "")
    if key not in INTEGRATORS:
        raise ValueError(f"unknown integrator {which!r}")
    return INTEGRATORS[key]


def step_map(integrator, f: Callable, dt: float, d: int) -> Callable:
    """The one-step phase-space map z=(q, k) -> (q', k') on flat vectors."""
    step = _integrator(integrator).step

    def phi(z: Tensor) -> Tensor:
        q, k = z[:d], z[d:]
        q1, k1 = step(q.reshape(1, d), k.reshape(1, d), dt, f)
        return concat([q1.reshape(d), k1.reshape(d)])

    return phi


def step_jacobian(integrator, f: Callable, dt: float, q: np.ndarray, k: np.ndarray, **kw) -> np.ndarray:
    d = q.shape[-1]
    return jacobian_of(step_map(integrator, f, dt, d), np.concatenate([q, k]), **kw)


def step_determinant(integrator, f: Callable, dt: float, q: np.ndarray, k: np.ndarray) -> float:
    sign, logabs = slogdet(step_jacobian(integrator, f, dt, q, k))
    return sign * math.exp(logabs)


def random_coupling(rng: Rng, d_k: int, std: Optional[float] = None) -> CouplingNetwork:
    std = 1.0 / math.sqrt(d_k) if std is None else std
    return CouplingNetwork(Tensor(rng.normal_np((d_k, d_k), 0, std)),
                           Tensor(rng.normal_np((d_k, d_k), 0, std)))


def symplecticity_check(
    integrator,
    weights=None,
    dt: Optional[float] = 0.1,
    d_k: int = 4,
    n_samples: int = 100,
    rng: Optional[Rng] = None,
) -> dict:
    """Determinants of the one-step Jacobian at random phase-space points.

    ``weights`` is a ``(w1, w2)`` pair or a callable force; ``None`` draws
    fresh random coupling weights per sample. ``dt=None`` draws dt
    uniformly from (0, 1] per sample.
    """
    if 2 * d_k > 64:
        raise ValueError("symplecticity_check is limited to 2*d_k <= 64")
    rng = rng or Rng(0)
    dets = []
    for i in range(n_samples):
        r = rng.split(i)
        if weights is None:
            f = random_coupling(r, d_k)
        elif callable(weights):
            f = weights
        else:
            f = CouplingNetwork(Tensor(weights[0]), Tensor(weights[1]))
        step_dt = float(1.0 - r.uniform()) if dt is None else dt
        q = r.normal_np(d_k)
        k = r.normal_np(d_k)
        dets.append(step_determinant(integrator, f, step_dt, q, k))
    dets = np.array(dets)
    dev = np.abs(dets - 1.0)
    return {
        "integrator": _integrator(integrator).name,
        "n_samples": n_samples,
        "d_k": d_k,
        "max_abs_dev": float(dev.max()),
        "min_abs_dev": float(dev.min()),
        "dets": dets.tolist(),
    }


def harmonic_force(q):
    return -q


def energy(q, k) -> float:
    q, k = np.asarray(q), np.asarray(k)
    return 0.5 * float(np.sum(q * q) + np.sum(k * k))


def energy_trace(integrator, dt: float, n_steps: int, q0, k0) -> List[float]:
    """H = (|q|^2 + |k|^2)/2 after each step under f(q) = -q; entry 0 is H0."""
    step = _integrator(integrator).step
    q = np.array(q0, dtype=np.float64)
    k = np.array(k0, dtype=np.float64)
    trace = [energy(q, k)]
    for _ in range(n_steps):
        q, k = step(q, k, dt, harmonic_force)
        trace.append(energy(q, k))
    return trace


# ---------------------------------------------------------------------------
# Attention dumps
# ---------------------------------------------------------------------------


def write_pgm(path, matrix: np.ndarray) -> None:
    """8-bit binary PGM, linearly mapping [min(0, m), max(m)] to [0, 255]."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = min(0.0, float(m.min())), float(m.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.rint((m - lo) * scale), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def dump_attention(
    model: Model,
    tokens: np.ndarray,
    out_dir,
    layers: Optional[Sequence[int]] = None,
    heads: Optional[Sequence[int]] = None,
    sample: int = 0,
) -> List[Path]:
    """CSV + PGM of the attention matrix for each selected (layer, head)."""
    cfg = model.cfg
    layers = list(range(cfg.n_layers)) if layers is None else list(layers)
    heads = list(range(cfg.n_heads)) if heads is None else list(heads)
    for l in layers:
        if not 0 <= l < cfg.n_layers:
            raise IndexError(f"layer {l} out of range [0, {cfg.n_layers})")
    for h in heads:
        if not 0 <= h < cfg.n_heads:
            raise IndexError(f"head {h} out of range [0, {cfg.n_heads})")
    with no_grad():
        model.forward(tokens, record=True)
    weights = model.attention_weights()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for l in layers:
        for h in heads:
            A = np.tril(weights[l][sample, h]) + 0.0  # exact zeros above the diagonal, no -0.0
            stem = out / f"attn_L{l}_H{h}"
            lines = [",".join(repr(float(x)) for x in row) for row in A]
            Path(f"{stem}.csv").write_text("\n".join(lines) + "\n")
            write_pgm(f"{stem}.pgm", A)
            files += [Path(f"{stem}.csv"), Path(f"{stem}.pgm")]
    return files


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def grad_check_model(
    cfg: ModelConfig,
    tolerance: float = 1e-4,
    seed: int = 0,
    max_coords: Optional[int] = 48,
    batch_size: int = 2,
    h: float = 1e-5,
    perturb: float = 0.05,
    params: Optional[Dict[str, Tensor]] = None,
) -> dict:
    """Autodiff vs central differences for every parameter tensor.

    Tensors with more than ``max_coords`` entries are checked on a seeded
    sample of coordinates that always includes the largest-|grad| ones;
    ``max_coords=None`` checks every coordinate. The per-group error is the
    max-norm relative error over the checked coordinates.
    """
    rng = Rng(seed).split("gradcheck")
    if params is None:
        params = init_params(cfg, seed)
        # move away from the symmetric init so no derivative is trivially zero
        for name, p in params.items():
            p.data = p.data + rng.split(name).normal_np(p.shape, 0.0, perturb)
    model = Model(cfg, params)
    T = cfg.max_seq_len
    tokens = rng.integers(0, cfg.vocab_size, size=(batch_size, T))
    targets = rng.integers(0, cfg.vocab_size, size=(batch_size, T))

    model.zero_grad()
    backward(model.loss(tokens, targets))
    groups = {}
    failing = []
    for name, p in model.params.items():
        auto = p.grad if p.grad is not None else np.zeros_like(p.data)
        original = p.data

        def f(arr, p=p):
            p.data = arr
            return model.loss(tokens, targets)

        if max_coords is None or p.size <= max_coords:
            idx = np.arange(p.size)
        else:
            top = np.argsort(-np.abs(auto).reshape(-1), kind="stable")[: max_coords // 4]
            rest = rng.split(name).permutation(p.size)[:max_coords]
            idx = np.unique(np.concatenate([top, rest]))[:max_coords + max_coords // 4]
        numeric = finite_diff_grad(f, original, h=h, indices=idx)
        p.data = original
        err = relative_error(auto.reshape(-1)[idx], numeric.reshape(-1)[idx])
        groups[name] = {"rel_err": err, "checked": int(idx.size), "size": int(p.size)}
        if not err < tolerance:
            failing.append(name)
    worst = max(g["rel_err"] for g in groups.values())
    return {
        "variant": cfg.variant.kind,
        "tolerance": tolerance,
        "worst_rel_err": worst,
        "passed": not failing,
        "failing": failing,
        "groups": groups,
    }


# ---------------------------------------------------------------------------
# Whole-model report
# ---------------------------------------------------------------------------

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["variant", "seq_len", "n_sequences", "entropy", "effective_rank",
                 "max_entropy", "jacobian_dets", "energy_trace", "param_ledger"],
    "properties": {
        "variant": {"type": "string"},
        "seq_len": {"type": "integer", "minimum": 1},
        "n_sequences": {"type": "integer", "minimum": 1},
        "max_entropy": {"type": "number"},
        "entropy": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "effective_rank": {"type": "array", "items": {"type": "number", "minimum": 1}},
        "jacobian_dets": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "number"}},
        },
        "energy_trace": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
        },
        "param_ledger": {
            "type": "object",
            "required": ["components", "total", "variant_specific"],
            "properties": {
                "components": {"type": "object", "additionalProperties": {"type": "integer"}},
                "total": {"type": "integer"},
                "variant_specific": {"type": "integer"},
            },
        },
        "dumps": {"type": "array", "items": {"type": "string"}},
    },
}


def analyze(
    model: Model,
    tokens: np.ndarray,
    jacobian_samples: int = 8,
    energy_steps: int = 100,
    seed: int = 0,
) -> dict:
    """Per-layer entropy / effective rank on ``tokens`` plus integrator checks.

    Jacobian determinants use the model's own coupling weights and step
    sizes when it has them, otherwise seeded random weights with dt = 0.1.
    """
    cfg = model.cfg
    with no_grad():
        model.forward(tokens, record=True)
    weights = model.attention_weights()
    T = weights[0].shape[-1]
    entropy = [layer_mean_entropy(w) if cfg.variant.kind != "diff" else _diff_entropy(w)
               for w in weights]
    ranks = [mean_effective_rank(w) for w in weights]

    rng = Rng(seed).split("analyze")
    dets: Dict[str, List[float]] = {}
    dt = cfg.variant.dt_init
    for name in INTEGRATORS:
        samples = []
        for l in range(cfg.n_layers):
            lp = model.layer_params(l)
            if "coupling.w1" in lp:
                f = CouplingNetwork(Tensor(lp["coupling.w1"].data), Tensor(lp["coupling.w2"].data))
                dts = np.exp(lp["tau"].data) if "tau" in lp else np.full(cfg.n_heads, dt)
            else:
                f = random_coupling(rng.split(l), cfg.d_k)
                dts = np.full(cfg.n_heads, dt)
            for i in range(jacobian_samples):
                r = rng.split(f"{name}.{l}.{i}")
                q, k = r.normal_np(cfg.d_k), r.normal_np(cfg.d_k)
                samples.append(step_determinant(name, f, float(dts[i % len(dts)]), q, k))
        dets[name] = samples
    energy_traces = {
        name: [[float(i), h] for i, h in enumerate(energy_trace(name, dt, energy_steps, [1.0], [0.0]))]
        for name in INTEGRATORS
    }
    return {
        "variant": cfg.variant.kind,
        "seq_len": int(T),
        "n_sequences": int(np.asarray(tokens).reshape(-1, T).shape[0]),
        "max_entropy": math.log(T),
        "entropy": entropy,
        "effective_rank": ranks,
        "jacobian_dets": dets,
        "energy_trace": energy_traces,
        "param_ledger": count_params(cfg).to_dict(),
    }


def _diff_entropy(w: np.ndarray) -> float:
    # differential weights are signed and sum to 1 - lambda; report entropy of the
    # renormalised positive part so the value stays comparable across variants
    pos = np.clip(w, 0.0, None)
    pos = pos / pos.sum(axis=-1, keepdims=True)
    return float(_row_entropy(pos).mean())


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
