"""Synthetic multi-query associative recall (MQAR) and byte-level corpus windows.

MQAR vocabulary layout for vocab size V: token 0 is padding, keys are
``1 .. V/2 - 1`` and values are ``V/2 .. V - 1``. A sequence holds
``num_pairs`` (key, value) pairs with distinct keys, then ``num_queries``
keys drawn from the bound ones, then padding. The target at a query
position is the value bound to that key.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from .numerics import Rng

PAD = 0


@dataclass(frozen=True)
class MQARSpec:
    num_pairs: int
    seq_len: int
    num_queries: int
    vocab_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_pairs < 1 or self.num_queries < 1:
            raise ValueError("num_pairs and num_queries must be >= 1")
        if 2 * self.num_pairs + self.num_queries > self.seq_len:
            raise ValueError(
                f"capacity: 2*{self.num_pairs} pairs + {self.num_queries} queries "
                f"exceeds seq_len {self.seq_len}"
            )
        if self.vocab_size < 4 or self.vocab_size % 2:
            raise ValueError("vocab_size must be an even number >= 4")
        if self.num_pairs > len(self.key_alphabet):
            raise ValueError(
                f"key alphabet ({len(self.key_alphabet)}) smaller than num_pairs ({self.num_pairs})"
            )

    @property
    def key_alphabet(self) -> np.ndarray:
        return np.arange(1, self.vocab_size // 2)

    @property
    def value_alphabet(self) -> np.ndarray:
        return np.arange(self.vocab_size // 2, self.vocab_size)

    @property
    def active_len(self) -> int:
        """Positions up to and including the last query."""
        return 2 * self.num_pairs + self.num_queries

    def to_dict(self) -> dict:
        return asdict(self)


DIFFICULTY = {
    "easy": dict(num_pairs=4, seq_len=64, num_queries=4),
    "medium": dict(num_pairs=8, seq_len=128, num_queries=8),
    "hard": dict(num_pairs=16, seq_len=256, num_queries=16),
}


def mqar_preset(name: str, seed: int = 0, vocab_size: int = 64) -> MQARSpec:
    if name not in DIFFICULTY:
        raise ValueError(f"unknown MQAR difficulty {name!r}; expected one of {list(DIFFICULTY)}")
    return MQARSpec(vocab_size=vocab_size, seed=seed, **DIFFICULTY[name])


@dataclass
class MQARBatch:
    tokens: np.ndarray  # [batch, seq] int64
    targets: np.ndarray  # [batch, seq] int64, 0 where mask is False
    loss_mask: np.ndarray  # [batch, seq] bool

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def trimmed(self) -> "MQARBatch":
        """Drop trailing positions after the last loss-masked one.

        A causal model's logits at masked positions do not depend on later
        tokens, so loss and accuracy are unchanged.
        """
        cols = np.nonzero(self.loss_mask.any(axis=0))[0]
        end = int(cols[-1]) + 1 if cols.size else self.tokens.shape[1]
        return MQARBatch(self.tokens[:, :end], self.targets[:, :end], self.loss_mask[:, :end])

    def to_jsonl(self) -> Iterator[str]:
        for t, y, m in zip(self.tokens, self.targets, self.loss_mask):
            yield json.dumps({"tokens": t.tolist(), "targets": y.tolist(), "mask": m.tolist()})


def mqar_generate(spec: MQARSpec, batch_size: int, rng: Rng) -> MQARBatch:
    """Draw ``batch_size`` MQAR sequences from ``rng``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    P, Qn, T = spec.num_pairs, spec.num_queries, spec.seq_len
    keys_pool, values_pool = spec.key_alphabet, spec.value_alphabet
    tokens = np.full((batch_size, T), PAD, dtype=np.int64)
    targets = np.zeros((batch_size, T), dtype=np.int64)
    mask = np.zeros((batch_size, T), dtype=bool)
    for b in range(batch_size):
        keys = rng.choice(keys_pool, P, replace=False)
        values = rng.choice(values_pool, P, replace=True)
        tokens[b, 0 : 2 * P : 2] = keys
        tokens[b, 1 : 2 * P : 2] = values
        which = rng.integers(0, P, size=Qn)
        qpos = slice(2 * P, 2 * P + Qn)
        tokens[b, qpos] = keys[which]
        targets[b, qpos] = values[which]
        mask[b, qpos] = True
    return MQARBatch(tokens, targets, mask)


def batch_rng(seed: int, index: int, split: str = "train") -> Rng:
    """Stream for batch ``index`` of ``split``; train and eval never overlap."""
    return Rng(seed).split(split).split(index)


def mqar_batch(spec: MQARSpec, batch_size: int, index: int, split: str = "train") -> MQARBatch:
    """Deterministic batch for (spec, spec.seed, index, split)."""
    return mqar_generate(spec, batch_size, batch_rng(spec.seed, index, split))


def mqar_accuracy(logits, batch: MQARBatch) -> float:
    """Fraction of masked positions whose argmax equals the target.

    Ties resolve to the lowest token id (``np.argmax`` picks the first).
    """
    z = logits.data if hasattr(logits, "data") and not isinstance(logits, np.ndarray) else logits
    z = np.asarray(z)
    if z.shape[:2] != batch.tokens.shape:
        raise ValueError(f"logits {z.shape[:2]} do not cover batch {batch.tokens.shape}")
    n = int(batch.loss_mask.sum())
    if n == 0:
        raise ValueError("mqar_accuracy with an empty loss mask")
    pred = np.argmax(z, axis=-1)
    return float(((pred == batch.targets) & batch.loss_mask).sum() / n)


def scan_targets(tokens: np.ndarray, spec: MQARSpec) -> tuple:
    """Recover (targets, mask) by scanning tokens with an explicit key->value map."""
    keys = set(spec.key_alphabet.tolist())
    targets = np.zeros_like(tokens)
    mask = np.zeros(tokens.shape, dtype=bool)
    for b, row in enumerate(tokens.tolist()):
        bound = {}
        i = 0
        while i < 2 * spec.num_pairs:
            bound[row[i]] = row[i + 1]
            i += 2
        for j in range(i, len(row)):
            tok = row[j]
            if tok in keys and tok in bound:
                targets[b, j] = bound[tok]
                mask[b, j] = True
    return targets, mask


# ---------------------------------------------------------------------------
# Byte corpus
# ---------------------------------------------------------------------------

BYTE_VOCAB = 256


class ByteCorpus:
    def __init__(self, path: str):
        self.path = os.fspath(path)
        with open(self.path, "rb") as fh:
            self.data = np.frombuffer(fh.read(), dtype=np.uint8).astype(np.int64)

    def __len__(self) -> int:
        return self.data.size


def corpus_windows(corpus, seq_len: int, batch_size: int, rng: Rng) -> MQARBatch:
    """Uniform random contiguous windows; targets are inputs shifted by one.

    ``corpus`` is a :class:`ByteCorpus` or a path.
    """
    if not isinstance(corpus, ByteCorpus):
        corpus = ByteCorpus(corpus)
    n = len(corpus)
    if n < seq_len + 1:
        raise ValueError(f"corpus has {n} bytes; need at least seq_len+1 = {seq_len + 1}")
    starts = rng.integers(0, n - seq_len, size=batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    win = corpus.data[idx]
    return MQARBatch(win[:, :-1].copy(), win[:, 1:].copy(), np.ones((batch_size, seq_len), dtype=bool))


@dataclass(frozen=True)
class CorpusSpec:
    path: str
    seq_len: int = 64
    seed: int = 0
    holdout: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def parse_task(text: str, seed: int = 0, seq_len: Optional[int] = None):
    """``mqar:easy`` / ``mqar:medium`` / ``mqar:hard`` or ``corpus:<path>``."""
    kind, _, arg = text.partition(":")
    if kind == "mqar":
        return mqar_preset(arg or "easy", seed=seed)
    if kind == "corpus":
        if not arg:
            raise ValueError("corpus task needs a path: corpus:<path>")
        return CorpusSpec(arg, seq_len or 64, seed)
    raise ValueError(f"unknown task {text!r}; expected mqar:<difficulty> or corpus:<path>")
