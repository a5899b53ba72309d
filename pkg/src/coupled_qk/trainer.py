"""Deterministic training: AdamW, warmup + cosine schedule, global-norm clipping.

Batches are a pure function of (task seed, split, batch index), so a run's
only mutable state is the step counter, parameters and Adam moments. That is
what the checkpoint stores, and resuming from it replays the uninterrupted
run bit-for-bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .model import Model, ModelConfig, component_of
from .numerics import NonFiniteError, Tensor, backward, cross_entropy, no_grad
from .tasks import (
    ByteCorpus,
    CorpusSpec,
    MQARBatch,
    MQARSpec,
    batch_rng,
    corpus_windows,
    mqar_accuracy,
    mqar_batch,
)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "split", "loss", "accuracy", "lr", "grad_norm")
NO_DECAY = ("embedding", "positional", "norms", "step_size", "lambda")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_peak: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 500
    total_steps: int = 3000
    batch_size: int = 64
    eval_every: int = 500
    eval_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.total_steps <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("total_steps, batch_size and eval_every must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must satisfy 0 <= warmup_steps < total_steps")
        if self.lr_peak < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("lr_peak and weight_decay must be >= 0, clip_norm > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eval_size <= 0:
            raise ValueError("eval_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    step: int
    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    history: List[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: Dict[str, np.ndarray]) -> "TrainState":
        return cls(
            0,
            params,
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


# ---------------------------------------------------------------------------
# Optimiser pieces
# ---------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float):
    """Scale all grads by max_norm / ||g|| when the global L2 norm exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def decays(name: str) -> bool:
    return component_of(name) not in NO_DECAY


def adamw_step(state: TrainState, grads: Dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> TrainState:
    """One AdamW update in place: decoupled decay, then bias-corrected Adam."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in state.params.items():
        g = grads[name]
        if cfg.weight_decay and decays(name):
            p -= lr * cfg.weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    state.step = t
    return state


# ---------------------------------------------------------------------------
# Tasks as seen by the trainer
# ---------------------------------------------------------------------------


class MQARTrainTask:
    def __init__(self, spec: MQARSpec):
        self.spec = spec
        self.vocab_size = spec.vocab_size
        self.seq_len = spec.seq_len
        self.has_accuracy = True

    def describe(self) -> dict:
        return {"kind": "mqar", **self.spec.to_dict()}

    def train_batch(self, index: int, batch_size: int) -> MQARBatch:
        return mqar_batch(self.spec, batch_size, index, "train").trimmed()

    def eval_batches(self, size: int, batch_size: int):
        done, i = 0, 0
        while done < size:
            n = min(batch_size, size - done)
            yield mqar_batch(self.spec, n, i, "eval").trimmed()
            done += n
            i += 1


class CorpusTrainTask:
    """Byte-level LM; the last ``holdout`` fraction of the file is held out."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.vocab_size = 256
        self.seq_len = spec.seq_len
        self.has_accuracy = False
        full = ByteCorpus(spec.path)
        cut = int(len(full) * (1.0 - spec.holdout))
        self.train = ByteCorpus.__new__(ByteCorpus)
        self.train.path, self.train.data = full.path, full.data[:cut]
        self.held = ByteCorpus.__new__(ByteCorpus)
        self.held.path, self.held.data = full.path, full.data[cut:]
        if len(self.held) < spec.seq_len + 1:
            self.held = self.train

    def describe(self) -> dict:
        return {"kind": "corpus", **self.spec.to_dict()}

    def train_batch(self, index: int, batch_size: int) -> MQARBatch:
        return corpus_windows(self.train, self.spec.seq_len, batch_size,
                              batch_rng(self.spec.seed, index, "train"))

    def eval_batches(self, size: int, batch_size: int):
        done, i = 0, 0
        while done < size:
            n = min(batch_size, size - done)
            yield corpus_windows(self.held, self.spec.seq_len, n, batch_rng(self.spec.seed, i, "eval"))
            done += n
            i += 1


def make_task(spec):
    if isinstance(spec, MQARSpec):
        return MQARTrainTask(spec)
    if isinstance(spec, CorpusSpec):
        return CorpusTrainTask(spec)
    raise TypeError(f"unsupported task spec {type(spec).__name__}")


# ---------------------------------------------------------------------------
# Evaluation and the loop
# ---------------------------------------------------------------------------


def evaluate(model: Model, task, size: int, batch_size: int) -> dict:
    """Mean masked cross-entropy and (MQAR) accuracy over the held-out stream."""
    total_loss, total_hit, total_n = 0.0, 0.0, 0
    with no_grad():
        for batch in task.eval_batches(size, batch_size):
            logits = model.forward(batch.tokens)
            n = int(batch.loss_mask.sum())
            total_loss += cross_entropy(logits, batch.targets, batch.loss_mask).item() * n
            if task.has_accuracy:
                total_hit += mqar_accuracy(logits.data, batch) * n
            total_n += n
    out = {"loss": total_loss / total_n}
    out["accuracy"] = total_hit / total_n if task.has_accuracy else None
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path, rows: List[dict]) -> None:
    lines = [",".join(METRIC_FIELDS)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(k)) for k in METRIC_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path) -> List[dict]:
    rows = []
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        rows.append(dict(zip(header, line.split(","))))
    return rows


def save_state(path, model: Model, state: TrainState, cfg: TrainConfig, task) -> None:
    header = {
        "config": model.cfg.to_dict(),
        "train": cfg.to_dict(),
        "task": task.describe(),
        "step": state.step,
        "history": state.history,
    }
    arrays = dict(state.params)
    arrays.update({f"adam_m/{k}": a for k, a in state.m.items()})
    arrays.update({f"adam_v/{k}": a for k, a in state.v.items()})
    save_checkpoint(path, header, arrays)


def load_state(path, model: Model) -> TrainState:
    header, arrays = load_checkpoint(path)
    if header["config"] != model.cfg.to_dict():
        raise ValueError("checkpoint config does not match the model")
    for name, p in model.params.items():
        p.data = arrays[name].copy()
    params = {k: p.data for k, p in model.params.items()}
    m = {k: arrays[f"adam_m/{k}"].copy() for k in params} if f"adam_m/{next(iter(params))}" in arrays else None
    v = {k: arrays[f"adam_v/{k}"].copy() for k in params} if m is not None else None
    if m is None:
        state = TrainState.fresh(params)
        state.step = int(header.get("step", 0))
        return state
    return TrainState(int(header["step"]), params, m, v, list(header.get("history", [])))


def load_model(path) -> Model:
    header, arrays = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    params = {}
    from .model import param_shapes

    for name in param_shapes(cfg):
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name}")
        params[name] = Tensor(arrays[name], requires_grad=True, name=name)
    return Model(cfg, params)


def _dump_batch(run_dir, step: int, batch: MQARBatch, err: Exception) -> Optional[Path]:
    if run_dir is None:
        return None
    path = Path(run_dir) / f"diverged_step{step}.json"
    path.write_text(json.dumps({
        "step": step,
        "error": str(err),
        "tokens": batch.tokens.tolist(),
        "targets": batch.targets.tolist(),
        "mask": batch.loss_mask.tolist(),
    }))
    return path


def train(
    model: Model,
    task,
    cfg: TrainConfig,
    run_dir=None,
    resume_from=None,
    stop_at: Optional[int] = None,
    progress: bool = False,
):
    """Train ``model`` on ``task``; returns ``(state, metric_rows)``.

    ``task`` is an MQARSpec / CorpusSpec or an already wrapped task.
    ``stop_at`` ends the loop early (after that many total steps) without
    altering the schedule, which is how interrupted runs are simulated.
    """
    if isinstance(task, (MQARSpec, CorpusSpec)):
        task = make_task(task)
    if task.vocab_size > model.cfg.vocab_size:
        raise ValueError("task vocabulary exceeds model vocabulary")
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_state(resume_from, model)
    else:
        state = TrainState.fresh({k: p.data for k, p in model.params.items()})
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)

    while state.step < end:
        step = state.step
        batch = task.train_batch(step, cfg.batch_size)
        model.zero_grad()
        try:
            logits = model.forward(batch.tokens)
            loss = cross_entropy(logits, batch.targets, batch.loss_mask)
            backward(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in model.params.items()}
            grads, gnorm = clip_grad_norm(grads, cfg.clip_norm)
            lr = lr_at(step + 1, cfg)
            adamw_step(state, grads, lr, cfg)
        except NonFiniteError as err:
            dump = _dump_batch(run_dir, step + 1, batch, err)
            raise TrainingDiverged(f"non-finite values at step {step + 1} ({err}); batch dumped to {dump}") from err
        acc = mqar_accuracy(logits.data, batch) if task.has_accuracy else None
        state.history.append({"step": state.step, "split": "train", "loss": loss.item(),
                              "accuracy": acc, "lr": lr, "grad_norm": gnorm})

        if state.step % cfg.eval_every == 0 or state.step == cfg.total_steps:
            ev = evaluate(model, task, cfg.eval_size, cfg.batch_size)
            state.history.append({"step": state.step, "split": "eval", "loss": ev["loss"],
                                  "accuracy": ev["accuracy"], "lr": lr, "grad_norm": None})
            if progress:
                acc_s = "" if ev["accuracy"] is None else f" acc={ev['accuracy']:.4f}"
                log.info("step %d eval loss=%.4f%s", state.step, ev["loss"], acc_s)
            if ckpt_dir is not None:
                save_state(ckpt_dir / f"step_{state.step:07d}.cqkl", model, state, cfg, task)
                write_metrics(run_dir / "metrics.csv", state.history)

    if run_dir is not None:
        write_metrics(run_dir / "metrics.csv", state.history)
        if state.step == cfg.total_steps:
            save_state(run_dir / "final.cqkl", model, state, cfg, task)
    return state, state.history
