"""Decoder-only transformer backbone hosting any attention variant.

Block recipe: pre-norm RMSNorm, SwiGLU FFN, tied input/output embeddings,
learned absolute positions (or RoPE). Weight matrices are stored
``[in, out]`` and applied as ``x @ W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import attention as attn
from .attention import AttentionVariant, CouplingNetwork
from .numerics import (
    Rng,
    Tensor,
    cross_entropy,
    embedding,
    matmul,
    mean,
    rotate_pairs,
    rsqrt,
    silu,
    swap_last,
)

RMS_EPS = 1e-6
INIT_STD = 0.02
ROPE_BASE = 10000.0

# (d_model, n_heads, n_layers, d_ff)
PRESETS = {
    "nano": (32, 2, 2, 128),
    "micro": (64, 2, 2, 256),
    "tiny": (256, 4, 6, 1024),
    "small": (512, 8, 8, 2048),
    "medium": (768, 12, 12, 3072),
    "large": (1024, 16, 24, 4096),
}

POSITIONAL = ("learned", "rope")


@dataclass
class ModelConfig:
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    positional: str = "learned"
    variant: AttentionVariant = field(default_factory=AttentionVariant)

    def __post_init__(self):
        if isinstance(self.variant, dict):
            self.variant = AttentionVariant(**self.variant)
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "vocab_size", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.positional not in POSITIONAL:
            raise ValueError(f"positional must be one of {POSITIONAL}")
        self.variant.check(self.n_heads, self.d_k)
        if self.positional == "rope":
            width = self.d_k // 2 if self.variant.kind == "diff" else self.d_k
            if width % 2:
                raise ValueError("rope needs an even rotation width per (sub-)head")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "positional": self.positional,
            "variant": self.variant.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["variant"] = AttentionVariant(**d.get("variant", {}))
        return cls(**d)


def preset(
    name: str,
    vocab_size: int = 50257,
    max_seq_len: int = 512,
    variant: Optional[AttentionVariant] = None,
    positional: str = "learned",
) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    d, h, n, ff = PRESETS[name]
    return ModelConfig(d, h, n, ff, vocab_size, max_seq_len, positional, variant or AttentionVariant())


# ---------------------------------------------------------------------------
# Parameter layout and accounting
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Ordered parameter name -> shape. This order is the init order."""
    d, dk, H = cfg.d_model, cfg.d_k, cfg.n_heads
    kv = cfg.variant.kv_heads(H) * dk
    shapes = {"tok_emb": (cfg.vocab_size, d)}
    if cfg.positional == "learned":
        shapes["pos_emb"] = (cfg.max_seq_len, d)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, kv)
        shapes[p + "wv"] = (d, kv)
        shapes[p + "wo"] = (d, d)
        if cfg.variant.has_coupling_net:
            shapes[p + "coupling.w1"] = (dk, dk)
            shapes[p + "coupling.w2"] = (dk, dk)
        if cfg.variant.coupled:
            shapes[p + "tau"] = (H,)
        if cfg.variant.kind == "diff":
            shapes[p + "lam"] = (H,)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w_gate"] = (d, cfg.d_ff)
        shapes[p + "w_up"] = (d, cfg.d_ff)
        shapes[p + "w_down"] = (cfg.d_ff, d)
    shapes["final_norm"] = (d,)
    return shapes


VARIANT_SUFFIXES = ("coupling.w1", "coupling.w2", "tau", "lam")

_COMPONENT = {
    "tok_emb": "embedding",
    "pos_emb": "positional",
    "attn_norm": "norms",
    "ffn_norm": "norms",
    "final_norm": "norms",
    "wq": "attention",
    "wk": "attention",
    "wv": "attention",
    "wo": "attention",
    "coupling.w1": "coupling",
    "coupling.w2": "coupling",
    "tau": "step_size",
    "lam": "lambda",
    "w_gate": "ffn",
    "w_up": "ffn",
    "w_down": "ffn",
}


def component_of(name: str) -> str:
    for suffix, comp in _COMPONENT.items():
        if name == suffix or name.endswith("." + suffix):
            return comp
    raise KeyError(name)


def is_variant_specific(name: str) -> bool:
    return any(name.endswith("." + s) for s in VARIANT_SUFFIXES)


@dataclass
class ParamLedger:
    components: Dict[str, int]
    total: int
    variant_specific: int

    def to_dict(self) -> dict:
        return {"components": dict(self.components), "total": self.total,
                "variant_specific": self.variant_specific}


def count_params(cfg: ModelConfig) -> ParamLedger:
    """Exact parameter counts from shapes (no allocation)."""
    comps: Dict[str, int] = {}
    specific = 0
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        comp = component_of(name)
        comps[comp] = comps.get(comp, 0) + n
        if is_variant_specific(name):
            specific += n
    return ParamLedger(comps, sum(comps.values()), specific)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int) -> Dict[str, Tensor]:
    """Initialise every parameter from its own named RNG stream.

    Streams are keyed by parameter name, so two variants sharing a seed get
    bit-identical backbone weights whatever extra parameters they carry.
    """
    root = Rng(seed)
    resid_std = INIT_STD / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        comp = component_of(name)
        leaf = name.rsplit(".", 1)[-1]
        if comp == "norms":
            data = np.ones(shape)
        elif comp == "step_size":
            data = np.full(shape, math.log(cfg.variant.dt_init))
        elif comp == "lambda":
            layer = int(name.split(".")[1])
            data = np.full(shape, attn.lambda_init(layer))
        else:
            std = resid_std if leaf in ("wo", "w_down") else INIT_STD
            data = root.split(name).normal_np(shape, 0.0, std)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    if x.shape[-1] == 0:
        raise ValueError("rmsnorm of a zero-length vector")
    if gain.shape[-1] != x.shape[-1]:
        raise ValueError("gain length must equal the feature dimension")
    return x * rsqrt(mean(x * x, axis=-1, keepdims=True) + eps) * gain


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    if w_gate.shape != w_up.shape or w_down.shape != w_gate.shape[::-1]:
        raise ValueError("SwiGLU weight shapes do not conform")
    return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_down)


def rope_tables(positions: np.ndarray, width: int, repeats: int = 1):
    """cos/sin tables ``[seq, repeats * width / 2]`` for pair rotations.

    With ``repeats`` > 1 the frequency ladder restarts for each sub-block of
    ``width`` dims (used for diff attention's sub-heads).
    """
    if width % 2:
        raise ValueError("rope needs an even dimension")
    inv_freq = ROPE_BASE ** (-np.arange(0, width, 2) / width)
    inv_freq = np.tile(inv_freq, repeats)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(Q: Tensor, K: Tensor, positions: np.ndarray, width: Optional[int] = None):
    """Rotate (2i, 2i+1) pairs of Q and K by pos * 10000^(-2i/width)."""
    d = Q.shape[-1]
    if d % 2:
        raise ValueError("rope needs an even d_k")
    width = width or d
    cos, sin = rope_tables(positions, width, d // width)
    return rotate_pairs(Q, cos, sin), rotate_pairs(K, cos, sin)


def _heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def attention_forward(
    x: Tensor,
    lp: Dict[str, Tensor],
    cfg: ModelConfig,
    mask: np.ndarray,
    positions: np.ndarray,
    trace: Optional[dict] = None,
):
    """Multi-head attention sublayer for one layer (input already normalised)."""
    variant = cfg.variant
    H, dk = cfg.n_heads, cfg.d_k
    B, T, _ = x.shape
    q = _heads(matmul(x, lp["wq"]), H)
    kv_heads = variant.kv_heads(H)
    k = _heads(matmul(x, lp["wk"]), kv_heads)
    v = _heads(matmul(x, lp["wv"]), kv_heads)

    if variant.coupled:
        f = CouplingNetwork(lp["coupling.w1"], lp["coupling.w2"])
        q, k = attn.evolve_qk(q, k, variant.kind, variant.n_steps, lp["tau"], f)
    elif variant.kind == "mlp_only":
        q = attn.mlp_only_transform(q, CouplingNetwork(lp["coupling.w1"], lp["coupling.w2"]))

    if cfg.positional == "rope":
        width = dk // 2 if variant.kind == "diff" else dk
        q, k = apply_rope(q, k, positions, width)

    if variant.kind == "gqa":
        out, weights = attn.gqa_attention(q, k, v, mask)
    elif variant.kind == "diff":
        out, weights = attn.diff_attention(q, k, v, mask, lp["lam"])
    else:
        out, weights = attn.sdpa(q, k, v, mask)

    if trace is not None:
        trace.setdefault("weights", []).append(weights.data)
        if variant.kind == "diff":
            ds = dk // 2
            scores = (q.data[..., :ds] @ np.swapaxes(k.data[..., :ds], -1, -2)) / math.sqrt(ds)
        else:
            kk = attn.repeat_kv(k, H // kv_heads).data
            scores = (q.data @ np.swapaxes(kk, -1, -2)) / math.sqrt(dk)
        trace.setdefault("scores", []).append(scores)

    merged = out.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
    return matmul(merged, lp["wo"]), weights


def block_forward(x: Tensor, lp: Dict[str, Tensor], cfg: ModelConfig, mask, positions, trace=None):
    """Pre-norm block: x + Attn(norm(x)), then x + FFN(norm(x))."""
    a, weights = attention_forward(rmsnorm(x, lp["attn_norm"]), lp, cfg, mask, positions, trace)
    x = x + a
    h = rmsnorm(x, lp["ffn_norm"])
    x = x + swiglu_ffn(h, lp["w_gate"], lp["w_up"], lp["w_down"])
    return x, weights


class Model:
    def __init__(self, cfg: ModelConfig, params: Optional[Dict[str, Tensor]] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        expected = param_shapes(cfg)
        if list(self.params) != list(expected):
            missing = set(expected) ^ set(self.params)
            raise ValueError(f"parameter set does not match config: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")
        self.last_trace: Optional[dict] = None

    def layer_params(self, i: int) -> Dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def forward(self, tokens, pos_offset: int = 0, record: bool = False) -> Tensor:
        """Logits ``[batch, seq, vocab]`` for integer ``tokens`` ``[batch, seq]``."""
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.dtype.kind not in "iu":
            raise TypeError("tokens must be integers")
        B, T = tokens.shape
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        positions = pos_offset + np.arange(T)
        if cfg.positional == "learned" and pos_offset + T > cfg.max_seq_len:
            raise ValueError(f"sequence length {pos_offset + T} exceeds max_seq_len {cfg.max_seq_len}")
        if cfg.positional == "rope" and T > cfg.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")

        x = embedding(self.params["tok_emb"], tokens)
        if cfg.positional == "learned":
            x = x + embedding(self.params["pos_emb"], positions)
        mask = attn.causal_mask(T)
        trace = {} if record else None
        for i in range(cfg.n_layers):
            x, _ = block_forward(x, self.layer_params(i), cfg, mask, positions, trace)
        x = rmsnorm(x, self.params["final_norm"])
        logits = matmul(x, swap_last(self.params["tok_emb"]))
        self.last_trace = trace
        return logits

    __call__ = forward

    def loss(self, tokens, targets, mask=None) -> Tensor:
        return cross_entropy(self.forward(tokens), targets, mask)

    def attention_weights(self) -> List[np.ndarray]:
        if not self.last_trace:
            raise RuntimeError("run forward(record=True) first")
        return self.last_trace["weights"]

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}
