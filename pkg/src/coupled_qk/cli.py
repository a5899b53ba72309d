"""Command line interface: ``cqk {train,eval,verify,analyze,ablate,mqar-gen,params}``.

Exit codes: 0 success, 1 verification/property failure, 2 usage or config error.
"""

from __future__ import annotations

import os

_threads = os.environ.get("CQK_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402
from dataclasses import fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import attention as attn  # noqa: E402
from . import diagnostics as diag  # noqa: E402
from .attention import AttentionVariant  # noqa: E402
from .model import PRESETS, Model, ModelConfig, count_params, preset  # noqa: E402
from .tasks import MQARSpec, mqar_batch, parse_task  # noqa: E402
from .trainer import TrainConfig, evaluate, load_model, make_task, train  # noqa: E402

log = logging.getLogger("coupled_qk")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

ALIASES = {"euler": "coupled_euler", "leapfrog": "coupled_leapfrog"}
VARIANT_CHOICES = attn.KINDS + tuple(ALIASES)


def variant_kind(name: str) -> str:
    return ALIASES.get(name, name)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run configuration (strict JSON schema + flag overrides)
# ---------------------------------------------------------------------------

RUN_KEYS = {"model", "variant", "task", "train", "out", "seed"}
MODEL_KEYS = {"preset", "d_model", "n_heads", "n_layers", "d_ff", "positional"}
VARIANT_KEYS = {f.name for f in fields(AttentionVariant)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def validate_run_config(cfg: dict) -> dict:
    """Check the merged run config; returns it with defaults filled in."""
    _reject_unknown(cfg, RUN_KEYS, "run config")
    for key in ("task", "out"):
        if cfg.get(key) in (None, ""):
            raise ConfigError(f"missing required field '{key}'")
    cfg.setdefault("seed", 0)
    cfg.setdefault("model", {"preset": "micro"})
    cfg.setdefault("variant", {})
    cfg.setdefault("train", {})
    _reject_unknown(cfg["model"], MODEL_KEYS, "model")
    _reject_unknown(cfg["variant"], VARIANT_KEYS, "variant")
    _reject_unknown(cfg["train"], TRAIN_KEYS, "train")
    cfg["train"]["seed"] = cfg["seed"]
    if "kind" in cfg["variant"]:
        cfg["variant"]["kind"] = variant_kind(cfg["variant"]["kind"])
    try:
        build_task(cfg)
        build_model_config(cfg)
        TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg


def build_task(cfg: dict):
    return parse_task(cfg["task"], seed=cfg["seed"])


def build_model_config(cfg: dict) -> ModelConfig:
    m = dict(cfg["model"])
    name = m.pop("preset", "micro")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    d, h, n, ff = PRESETS[name]
    task = build_task(cfg)
    if isinstance(task, MQARSpec):
        vocab, seq = task.vocab_size, task.seq_len
    else:
        vocab, seq = 256, task.seq_len
    return ModelConfig(
        d_model=m.get("d_model", d),
        n_heads=m.get("n_heads", h),
        n_layers=m.get("n_layers", n),
        d_ff=m.get("d_ff", ff),
        vocab_size=vocab,
        max_seq_len=seq,
        positional=m.get("positional", "learned"),
        variant=AttentionVariant(**cfg["variant"]),
    )


def merge_flags(cfg: dict, args) -> dict:
    cfg = json.loads(json.dumps(cfg))  # deep copy
    for key in ("model", "variant", "train"):
        cfg.setdefault(key, {})
    if args.preset is not None:
        cfg["model"]["preset"] = args.preset
    if args.positional is not None:
        cfg["model"]["positional"] = args.positional
    if args.variant is not None:
        cfg["variant"]["kind"] = variant_kind(args.variant)
    if args.n_steps is not None:
        cfg["variant"]["n_steps"] = args.n_steps
    if args.gqa_group is not None:
        cfg["variant"]["gqa_group"] = args.gqa_group
    if args.task is not None:
        cfg["task"] = args.task
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag, key in (("steps", "total_steps"), ("lr", "lr_peak"), ("batch_size", "batch_size"),
                      ("warmup", "warmup_steps"), ("eval_every", "eval_every"),
                      ("eval_size", "eval_size"), ("weight_decay", "weight_decay")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg["train"][key] = val
    return cfg


def load_run_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err


def prepare_run_dir(out: Path, force: bool, resume: bool = False) -> None:
    if out.exists() and any(out.iterdir()) and not resume:
        if not force:
            raise ConfigError(f"run directory {out} is not empty (use --force or a fresh directory)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def run_training(cfg: dict, resume=None, progress: bool = True) -> dict:
    """Execute a validated run config; returns the final eval metrics."""
    out = Path(cfg["out"])
    model_cfg = build_model_config(cfg)
    tcfg = TrainConfig(**cfg["train"])
    task = make_task(build_task(cfg))
    model = Model(model_cfg, seed=cfg["seed"])
    train(model, task, tcfg, run_dir=out, resume_from=resume, progress=progress)
    final = evaluate(model, task, tcfg.eval_size, tcfg.batch_size)
    report = {"final_eval": final, "param_ledger": count_params(model_cfg).to_dict(),
              "steps": tcfg.total_steps}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return final


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    base = load_run_config(args.config) if args.config else {}
    cfg = validate_run_config(merge_flags(base, args))
    out = Path(cfg["out"])
    prepare_run_dir(out, args.force, resume=args.resume is not None)
    text = json.dumps(cfg, indent=2, sort_keys=True)
    archived = out / "config.json"
    if args.resume is not None and archived.exists():
        if json.loads(archived.read_text()) != cfg:
            raise ConfigError(f"resume config differs from the archived {archived}")
    else:
        archived.write_text(text)
    final = run_training(cfg, resume=args.resume)
    print(json.dumps({"run_dir": str(out), **final}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    from .checkpoint import load_checkpoint

    header, _ = load_checkpoint(args.checkpoint)
    task_text = args.task or _task_text(header)
    spec = parse_task(task_text, seed=args.seed if args.seed is not None else header.get("train", {}).get("seed", 0))
    task = make_task(spec)
    res = evaluate(model, task, args.eval_size, args.batch_size)
    print(json.dumps(res))
    return EXIT_OK


def _task_text(header: dict) -> str:
    t = header.get("task")
    if not t:
        raise ConfigError("checkpoint has no task; pass --task")
    if t["kind"] == "mqar":
        for name, params in __import__("coupled_qk.tasks", fromlist=["DIFFICULTY"]).DIFFICULTY.items():
            if all(t.get(k) == v for k, v in params.items()):
                return f"mqar:{name}"
        raise ConfigError("checkpoint task is not a named MQAR preset; pass --task")
    return f"corpus:{t['path']}"


def cmd_verify(args) -> int:
    from .verify import CHECKS, format_table, run_checks

    checks = CHECKS
    if args.only:
        wanted = set(args.only.split(","))
        checks = [c for c in CHECKS if c.__name__.replace("check_", "") in wanted]
        if not checks:
            raise ConfigError(f"no checks match {args.only!r}")
    results = run_checks(checks)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print("all checks passed")
    return EXIT_OK


def _int_list(text):
    if text is None or text == "":
        return None
    return [int(x) for x in text.split(",") if x != ""]


def cmd_analyze(args) -> int:
    from .checkpoint import load_checkpoint

    model = load_model(args.checkpoint)
    header, _ = load_checkpoint(args.checkpoint)
    task_text = args.task or _task_text(header)
    spec = parse_task(task_text, seed=header.get("train", {}).get("seed", 0))
    if isinstance(spec, MQARSpec):
        if spec.vocab_size > model.cfg.vocab_size or spec.seq_len > model.cfg.max_seq_len:
            raise ConfigError("task does not fit the checkpoint's model config")
        tokens = mqar_batch(spec, args.n_seq, 0, "eval").tokens
    else:
        if model.cfg.vocab_size < 256:
            raise ConfigError("corpus task needs a byte-vocabulary model")
        tokens = make_task(spec).eval_batches(args.n_seq, args.n_seq).__next__().tokens
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = diag.analyze(model, tokens)
    files = diag.dump_attention(model, tokens, out / "attention",
                                _int_list(args.layers), _int_list(args.heads))
    report["dumps"] = [str(p.relative_to(out)) for p in files]
    diag.write_report(report, out / "report.json")
    print(json.dumps({"report": str(out / "report.json"), "entropy": report["entropy"],
                      "effective_rank": report["effective_rank"]}))
    return EXIT_OK


def _ablate_cell(job):
    cfg = job
    try:
        final = run_training(cfg, progress=False)
        return {"ok": True, **final}
    except Exception as err:  # recorded in the summary; the grid keeps going
        return {"ok": False, "error": f"{type(err).__name__}: {err}"}


def cmd_ablate(args) -> int:
    variants = [variant_kind(v.strip()) for v in (args.variants or "").split(",") if v.strip()]
    seeds = _int_list(args.seeds) or []
    n_steps = _int_list(args.n_steps) or [AttentionVariant().n_steps]
    if not variants or not seeds:
        raise ConfigError("empty grid: give at least one --variants entry and one --seeds entry")
    if args.task is None:
        raise ConfigError("missing required field 'task'")
    for v in variants:
        if v not in attn.KINDS:
            raise ConfigError(f"unknown variant {v!r}")
    out = Path(args.out)
    prepare_run_dir(out, args.force)
    cells, jobs = [], []
    for v in variants:
        for n in (n_steps if v in attn.COUPLED_KINDS else [None]):
            for s in seeds:
                variant = {"kind": v}
                if n is not None:
                    variant["n_steps"] = n
                if args.gqa_group is not None:
                    variant["gqa_group"] = args.gqa_group
                train_cfg = {"total_steps": args.steps}
                for flag, key in (("lr", "lr_peak"), ("batch_size", "batch_size"),
                                  ("warmup", "warmup_steps"), ("eval_every", "eval_every"),
                                  ("eval_size", "eval_size")):
                    if getattr(args, flag) is not None:
                        train_cfg[key] = getattr(args, flag)
                name = f"{v}" + (f"_n{n}" if n is not None else "") + f"_s{s}"
                model = {"preset": args.preset}
                if args.positional is not None:
                    model["positional"] = args.positional
                cfg = {"model": model, "variant": variant, "task": args.task,
                       "train": train_cfg, "out": str(out / name), "seed": s}
                cfg = validate_run_config(cfg)
                Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
                (Path(cfg["out"]) / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
                cells.append((v, n, s, name))
                jobs.append(cfg)
    workers = max(1, args.workers)
    cap = os.environ.get("CQK_THREADS")
    if cap:
        workers = min(workers, max(1, int(cap)))
    if workers == 1:
        results = [_ablate_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_cell, jobs))

    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "n_steps", "seed", "status", "eval_loss", "accuracy", "error"])
        for (v, n, s, _), r in zip(cells, results):
            w.writerow([v, "" if n is None else n, s, "ok" if r["ok"] else "failed",
                        repr(r.get("loss", "")) if r["ok"] else "",
                        "" if not r["ok"] or r.get("accuracy") is None else repr(r["accuracy"]),
                        r.get("error", "")])

    groups = {}
    for (v, n, s, _), r in zip(cells, results):
        groups.setdefault((v, n), []).append(r)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "n_steps", "n_seeds", "n_failed", "eval_loss_mean", "eval_loss_std",
                    "accuracy_mean", "accuracy_std"])
        for (v, n), rs in groups.items():
            good = [r for r in rs if r["ok"]]
            losses = [r["loss"] for r in good]
            accs = [r["accuracy"] for r in good if r.get("accuracy") is not None]
            w.writerow([v, "" if n is None else n, len(rs), len(rs) - len(good),
                        *_mean_std(losses), *_mean_std(accs)])
    print((out / "summary.csv").read_text(), end="")
    return EXIT_OK if all(r["ok"] for r in results) else EXIT_FAIL


def _mean_std(xs):
    if not xs:
        return "", ""
    arr = np.array(xs, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return f"{arr.mean():.6f}", f"{std:.6f}"


def cmd_mqar_gen(args) -> int:
    from .tasks import mqar_preset

    spec = mqar_preset(args.difficulty, seed=args.seed)
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for i in range(args.n_batches):
            batch = mqar_batch(spec, args.batch_size, i, args.split)
            for line in batch.to_jsonl():
                sink.write(line + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def cmd_params(args) -> int:
    variant = AttentionVariant(kind=variant_kind(args.variant), gqa_group=args.gqa_group or 4)
    cfg = preset(args.preset, args.vocab, args.seq_len, variant, args.positional or "learned")
    ledger = count_params(cfg)
    base = count_params(preset(args.preset, args.vocab, args.seq_len, AttentionVariant(),
                               args.positional or "learned"))
    delta = ledger.total - base.total
    if args.json:
        print(json.dumps({**ledger.to_dict(), "delta_vs_standard": delta}, indent=2))
        return EXIT_OK
    for name, n in ledger.components.items():
        print(f"{name:12s} {n:>14,d}")
    print(f"{'total':12s} {ledger.total:>14,d}")
    print(f"{'variant':12s} {ledger.variant_specific:>14,d}")
    print(f"{'vs standard':12s} {delta:>+14,d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_model_flags(p, with_task=True):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--variant", choices=VARIANT_CHOICES)
    p.add_argument("--n-steps", type=int, dest="n_steps")
    p.add_argument("--gqa-group", type=int, dest="gqa_group")
    p.add_argument("--positional", choices=("learned", "rope"))
    if with_task:
        p.add_argument("--task", help="mqar:easy|mqar:medium|mqar:hard or corpus:<path>")


def _add_train_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--warmup", type=int)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--eval-size", type=int, dest="eval_size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cqk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="JSON run config; flags override its values")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--resume", help="checkpoint to resume from (inside the same run directory)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-size", type=int, default=1024, dest="eval_size")
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--only", help="comma-separated subset of check names")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze", help="entropy / rank / attention dumps for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task")
    p.add_argument("--out", required=True)
    p.add_argument("--layers", help="comma-separated layer indices (default all)")
    p.add_argument("--heads", help="comma-separated head indices (default all)")
    p.add_argument("--n-seq", type=int, default=8, dest="n_seq")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="grid of variants x n_steps x seeds")
    p.add_argument("--variants", help="comma-separated attention kinds")
    p.add_argument("--n-steps", dest="n_steps", help="comma-separated step counts (coupled kinds)")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--task")
    p.add_argument("--preset", default="micro", choices=sorted(PRESETS))
    p.add_argument("--gqa-group", type=int, dest="gqa_group")
    p.add_argument("--positional", choices=("learned", "rope"))
    _add_train_flags(p)
    p.set_defaults(steps=3000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("mqar-gen", help="dump MQAR batches as JSON lines")
    p.add_argument("--difficulty", default="easy", choices=("easy", "medium", "hard"))
    p.add_argument("--batch-size", type=int, default=4, dest="batch_size")
    p.add_argument("--n-batches", type=int, default=1, dest="n_batches")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", choices=("train", "eval"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_mqar_gen)

    p = sub.add_parser("params", help="parameter ledger for a preset and variant")
    p.add_argument("--preset", default="small", choices=sorted(PRESETS))
    p.add_argument("--variant", default="standard", choices=VARIANT_CHOICES)
    p.add_argument("--gqa-group", type=int, dest="gqa_group")
    p.add_argument("--positional", choices=("learned", "rope"))
    p.add_argument("--vocab", type=int, default=50257)
    p.add_argument("--seq-len", type=int, default=512, dest="seq_len")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"cqk {args.command}: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, IndexError, FileNotFoundError) as err:
        print(f"cqk {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
