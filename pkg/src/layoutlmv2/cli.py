"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, bad input files), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from contextlib import ExitStack
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import numerics as nx
from .doc_model import load_corpus, load_funsd, save_corpus
from .errors import ValidationError
from .model import ModelConfig
from .synth_corpus import FAMILIES, GenConfig, generate
from .pretrain import PretrainTasks
from .training import (TASKS, Checkpoint, TrainConfig, evaluate, evaluate_pretrain, finetune_loop, grad_check,
                       predict, pretrain_loop)

log = logging.getLogger("layoutlmv2")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _on_off(text: str) -> bool:
    if text.lower() in ("on", "true", "1", "yes"):
        return True
    if text.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with gen/train/model sections; flags win")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--precision", choices=("single", "double"), default="single")
    common.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="layoutlmv2", description="Desk-scale multi-modal document encoder.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic corpus")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--family", choices=FAMILIES)

    p = sub.add_parser("pretrain", parents=[common], help="MVLM/TIA/TIM pre-training")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--tasks", help="comma list of mvlm,tia,tim")
    p.add_argument("--spatial-bias", type=_on_off, help="on/off")
    p.add_argument("--preset", choices=("tiny", "base", "micro"))
    p.add_argument("--lr", type=float)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a task head")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--eval-data", type=Path)
    p.add_argument("--checkpoint", type=Path, help="initial checkpoint prefix (random init if omitted)")
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--spatial-bias", type=_on_off)
    p.add_argument("--preset", choices=("tiny", "base", "micro"))
    p.add_argument("--lr", type=float)

    for name, help_ in (("eval", "metrics JSON on stdout"), ("predict", "dump per-example predictions")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--task", choices=TASKS, required=True)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--coords", type=int, default=10, help="sampled entries per parameter")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path}: {exc}") from None
    unknown = set(raw) - {"gen", "train", "model"}
    if unknown:
        raise ValidationError(f"config file {path}: unknown sections {sorted(unknown)}")
    for name, cls in (("gen", GenConfig), ("train", TrainConfig), ("model", ModelConfig)):
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ValidationError(f"config file {path}: section {name!r} must be an object")
        bad = set(section) - {f.name for f in fields(cls)}
        if bad:
            raise ValidationError(f"config file {path}: unknown {name} keys {sorted(bad)}")
    return raw


def _merge(cls, section: dict, overrides: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    for k in ("channels", "value_words"):
        if isinstance(merged.get(k), list):
            merged[k] = tuple(merged[k])
    return cls(**merged)


def _train_config(args, cfg: dict) -> TrainConfig:
    return _merge(TrainConfig, cfg.get("train", {}), {
        "seed": args.seed, "max_steps": getattr(args, "steps", None), "epochs": getattr(args, "epochs", None),
        "tasks": getattr(args, "tasks", None), "spatial_bias": getattr(args, "spatial_bias", None),
        "preset": getattr(args, "preset", None), "lr": getattr(args, "lr", None)})


def _model_config(train: TrainConfig, cfg: dict) -> ModelConfig:
    section = dict(cfg.get("model", {}))
    if "channels" in section:
        section["channels"] = tuple(section["channels"])
    base = ModelConfig.preset(train.preset)
    return base.with_(**section) if section else base


def _corpus(path: Path):
    if path.is_file() and path.suffix == ".json":
        # a single FUNSD annotation file, image alongside with the same stem
        img = next((p for p in (path.with_suffix(e) for e in (".png", ".jpg", ".pgm")) if p.exists()), None)
        return [load_funsd(path, img)]
    if not path.is_dir():
        raise ValidationError(f"data path {path} does not exist")
    docs = load_corpus(path)
    if not docs:
        raise ValidationError(f"no documents in {path}")
    return docs


def _require_out(args) -> Path:
    if args.out is None:
        raise ValidationError(f"{args.command} needs --out")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _guard_checkpoint(prefix: Path, force: bool) -> None:
    if Checkpoint.exists(prefix) and not force:
        raise ValidationError(f"checkpoint {prefix} exists; pass --force to overwrite")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "start") and hasattr(o, "category"):
        return {"start": o.start, "end": o.end, "category": o.category}
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_run_manifest(out: Path, args, resolved: dict) -> Path:
    canonical = json.dumps(resolved, sort_keys=True, default=str)
    manifest = {
        "command": args.command,
        "seed": args.seed,
        "config": resolved,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "precision": args.precision,
        "threads": args.threads,
        "versions": {"layoutlmv2": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    path = out / f"run_manifest.{args.command}.json"
    path.write_text(_dump(manifest) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args, cfg: dict) -> int:
    out = _require_out(args)
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    gen = _merge(GenConfig, cfg.get("gen", {}), {"seed": args.seed, "family": args.family})
    docs = generate(gen, args.n)
    paths = save_corpus(docs, out)
    files = {}
    for p in paths:
        files[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    (out / "manifest.json").write_text(_dump({"count": len(docs), "seed": gen.seed, "files": files}) + "\n",
                                       encoding="utf-8")
    write_run_manifest(out, args, {"gen": asdict(gen), "n": args.n})
    print(f"wrote {len(docs)} documents to {out}")
    return EXIT_OK


def cmd_pretrain(args, cfg: dict) -> int:
    out = _require_out(args)
    prefix = out / "pretrain"
    _guard_checkpoint(prefix, args.force)
    train = _train_config(args, cfg)
    if train.max_steps is None and train.epochs is None:
        train.max_steps = 300
    mcfg = _model_config(train, cfg)
    docs = _corpus(args.data)
    res = pretrain_loop(docs, train, mcfg, curves_path=out / "pretrain.curves.csv")
    res.checkpoint.save(prefix)
    # switched-off tasks evaluate to NaN; JSON gets null instead
    metrics = {k: (None if v != v else v)
               for k, v in evaluate_pretrain(res.model, res.vocab, docs, tasks=PretrainTasks.parse(train.tasks)).items()}
    (out / "pretrain.metrics.json").write_text(_dump(metrics) + "\n", encoding="utf-8")
    write_run_manifest(out, args, {"train": train.to_dict(), "model": mcfg.to_dict()})
    last = res.curves[-1] if res.curves else {}
    print(_dump({"checkpoint": str(prefix), "steps": len(res.curves), "final": last, "metrics": metrics}))
    return EXIT_OK


def cmd_finetune(args, cfg: dict) -> int:
    out = _require_out(args)
    prefix = out / args.task
    _guard_checkpoint(prefix, args.force)
    train = _train_config(args, cfg)
    if train.max_steps is None and train.epochs is None:
        train.epochs = 5
    init = Checkpoint.load(args.checkpoint) if args.checkpoint else None
    mcfg = None if init else _model_config(train, cfg)
    docs = _corpus(args.data)
    eval_docs = _corpus(args.eval_data) if args.eval_data else []
    res = finetune_loop(args.task, docs, train, init, eval_docs, mcfg)
    res.checkpoint.save(prefix)
    metrics = {"train": res.train_metrics, "eval": res.eval_metrics}
    (out / f"{args.task}.metrics.json").write_text(_dump(metrics) + "\n", encoding="utf-8")
    write_run_manifest(out, args, {"train": train.to_dict(), "model": res.model.config.to_dict(), "task": args.task})
    print(_dump({"checkpoint": str(prefix), **metrics}))
    return EXIT_OK


def _restore_for_task(args):
    ckpt = Checkpoint.load(args.checkpoint)
    meta = ckpt.manifest.get("heads", {}).get(args.task)
    if meta is None:
        raise ValidationError(f"checkpoint {args.checkpoint} has no {args.task} head")
    model, vocab = ckpt.restore()
    return model, vocab, meta


def cmd_eval(args, cfg: dict) -> int:
    model, vocab, meta = _restore_for_task(args)
    docs = _corpus(args.data)
    metrics = evaluate(model, vocab, args.task, docs, meta)
    print(_dump(metrics))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_run_manifest(args.out, args, {"task": args.task, "checkpoint": str(args.checkpoint)})
    return EXIT_OK


def cmd_predict(args, cfg: dict) -> int:
    out = _require_out(args)
    model, vocab, meta = _restore_for_task(args)
    preds = predict(model, vocab, args.task, _corpus(args.data), meta)
    path = out / f"predictions.{args.task}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p, sort_keys=True, default=_json_default) + "\n")
    write_run_manifest(out, args, {"task": args.task, "checkpoint": str(args.checkpoint)})
    print(f"wrote {len(preds)} predictions to {path}")
    return EXIT_OK


def cmd_grad_check(args, cfg: dict) -> int:
    out = _require_out(args)
    mcfg = ModelConfig.micro().with_(**cfg.get("model", {})) if cfg.get("model") else ModelConfig.micro()
    report = grad_check(mcfg, seed=args.seed or 0, tolerance=args.tolerance, coords_per_param=args.coords)
    (out / "grad_check.json").write_text(_dump(report.to_dict()) + "\n", encoding="utf-8")
    write_run_manifest(out, args, {"model": mcfg.to_dict(), "tolerance": args.tolerance})
    for g, err in sorted(report.groups.items()):
        print(f"{'ok  ' if err < report.tolerance else 'FAIL'} {g:22s} {err:.3e}")
    if not report.passed:
        print("failing parameters: " + ", ".join(report.failures()), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"gen-corpus": cmd_gen_corpus, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "predict": cmd_predict, "grad-check": cmd_grad_check}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = _load_config(args.config)
        if args.seed is None:
            args.seed = cfg.get("train", {}).get("seed", cfg.get("gen", {}).get("seed", 0))
        with ExitStack() as stack:
            stack.enter_context(threadpool_limits(limits=args.threads))
            stack.enter_context(nx.precision(args.precision))
            return COMMANDS[args.command](args, cfg)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers everything else
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
