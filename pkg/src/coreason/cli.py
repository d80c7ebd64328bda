"""Command-line interface.

Subcommands cover the whole workflow: gen-data, train, eval, join,
predict, gradcheck, ablate, and report. Config files are plain key-value
text (``key = value`` per line, ``#`` comments); metrics logs are
line-delimited JSON records; report paths render delimited tables plus
matplotlib figures. Exit code 0 only on full success — any deliberate
error prints one line to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields, replace
from typing import get_type_hints

import numpy as np

from .ablate import ABLATION_VARIANTS, run_ablation
from .attention import record_attention
from .checkpoint import load_checkpoint
from .errors import ConfigError, CoreasonError, InputError, ParseError
from .gradcheck import model_grad_check
from .metrics import (frechet_bounds, join_qar, load_predictions,
                      save_predictions)
from .model import Model, ModelConfig
from .report import attention_heatmaps_figure, render_report
from .taskdata import (GeneratorConfig, generate_dataset, load_dataset,
                       save_dataset)
from .train import TrainConfig, evaluate, train


def parse_kv_file(path: str) -> dict[str, str]:
    """``key = value`` per line; blank lines and ``#`` comments ignored."""
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ParseError(f"{path}:{lineno}: expected 'key = value', "
                                 f"got {line.strip()!r}")
            key, value = stripped.split("=", 1)
            key = key.strip()
            if not key:
                raise ParseError(f"{path}:{lineno}: empty key")
            if key in raw:
                raise ParseError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value.strip()
    return raw


_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False,
               "1": True, "0": False}


def coerce_config(cls, raw: dict[str, str], path: str) -> dict:
    """Convert raw strings to the dataclass field types of ``cls``."""
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"{path}: unknown keys for {cls.__name__}: "
                          f"{sorted(extra)}")
    out: dict = {}
    for key, text in raw.items():
        typ = hints[key]
        try:
            if typ is bool:
                if text.lower() not in _BOOL_WORDS:
                    raise ValueError(f"not a boolean: {text!r}")
                out[key] = _BOOL_WORDS[text.lower()]
            elif typ is int:
                out[key] = int(text)
            elif typ is float:
                out[key] = float(text)
            else:
                out[key] = text
        except ValueError as e:
            raise ConfigError(f"{path}: key {key!r}: {e}") from e
    return out


def load_model_config(path: str) -> ModelConfig:
    return ModelConfig.from_dict(coerce_config(ModelConfig,
                                               parse_kv_file(path), path))


def load_train_config(path: str) -> TrainConfig:
    return TrainConfig(**coerce_config(TrainConfig, parse_kv_file(path),
                                       path))


def load_generator_config(path: str) -> GeneratorConfig:
    return GeneratorConfig.from_dict(
        coerce_config(GeneratorConfig, parse_kv_file(path), path))


def _load_examples(path: str, d_obj: int | None = None):
    examples, header = load_dataset(path)
    if d_obj is not None and int(header["d_obj"]) != d_obj:
        raise ConfigError(f"{path} carries d_obj={header['d_obj']} but the "
                          f"model expects d_obj={d_obj}")
    return examples


def _report_line(report) -> str:
    return (f"subtask={report.subtask} accuracy={report.accuracy:.4f} "
            f"mAP={report.map:.4f} loss={report.loss:.4f} "
            f"examples={report.example_count}")


def cmd_gen_data(args) -> int:
    config = load_generator_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    examples = generate_dataset(config)
    save_dataset(examples, args.out, d_obj=config.d_obj)
    print(f"wrote {len(examples)} examples to {args.out} "
          f"(kind={config.question_kind}, seed={config.seed})")
    return 0


def cmd_train(args) -> int:
    model_config = replace(load_model_config(args.model_config),
                           subtask=args.subtask)
    train_config = load_train_config(args.train_config)
    train_data = _load_examples(args.data, model_config.d_obj)
    eval_data = _load_examples(args.eval_data, model_config.d_obj) \
        if args.eval_data else []
    model = Model(model_config, seed=args.model_seed)
    started = time.time()
    result = train(model, train_data, eval_data, train_config,
                   out_dir=args.out)
    elapsed = time.time() - started
    written = render_report(args.out, history=result.history)
    epochs_run = len(result.history)
    line = (f"trained {epochs_run} epochs in {elapsed:.1f}s; "
            f"checkpoint {result.checkpoint_path}")
    if result.final is not None:
        line += f"; final {_report_line(result.final)}"
    if result.stopped_early:
        line += " (stopped early)"
    print(line)
    for path in written:
        print(f"report: {path}")
    return 0


def _restore(checkpoint_path: str) -> Model:
    return load_checkpoint(checkpoint_path).restore_model()


def cmd_eval(args) -> int:
    model = _restore(args.checkpoint)
    if args.subtask and args.subtask != model.config.subtask:
        raise InputError(f"checkpoint was trained for subtask "
                         f"{model.config.subtask!r}, not {args.subtask!r}")
    data = _load_examples(args.data, model.config.d_obj)
    report, records = evaluate(model, data)
    print(_report_line(report))
    if args.preds:
        save_predictions(records, args.preds)
        print(f"predictions: {args.preds}")
    return 0


def cmd_join(args) -> int:
    qa = load_predictions(args.qa_preds)
    qar = load_predictions(args.qar_preds)
    joint = join_qar(qa, qar)
    acc_qa = sum(r.pred == r.gold for r in qa) / len(qa)
    acc_qar = sum(r.pred == r.gold for r in qar) / len(qar)
    low, high = frechet_bounds(acc_qa, acc_qar)
    print(f"qa_accuracy={acc_qa:.4f} qar_accuracy={acc_qar:.4f} "
          f"joint_accuracy={joint:.4f} bounds=[{low:.4f}, {high:.4f}]")
    return 0


def cmd_predict(args) -> int:
    model = _restore(args.checkpoint)
    data = _load_examples(args.data, model.config.d_obj)
    report, records = evaluate(model, data)
    if args.out:
        save_predictions(records, args.out)
        print(f"predictions: {args.out}")
    else:
        for r in records:
            print(json.dumps(r.to_dict(), sort_keys=True))
    if args.emit_attention:
        os.makedirs(args.emit_attention, exist_ok=True)
        from . import tensor as T
        for ex in data[:args.attention_examples]:
            with T.no_grad(), record_attention() as recs:
                model.forward(model.embed(ex), "eval", label="attn")
            arrays = {f"{i:02d}.{rec.label}": rec.weights
                      for i, rec in enumerate(recs)}
            base = os.path.join(args.emit_attention, ex.id)
            np.savez(base + ".npz", **arrays)
            attention_heatmaps_figure(recs, base + ".png")
            print(f"attention: {base}.npz {base}.png")
    print(_report_line(report))
    return 0


def cmd_gradcheck(args) -> int:
    if args.model_config:
        config = load_model_config(args.model_config)
    else:
        config = ModelConfig(d_model=8, h=2, n_blocks=2, memory_capacity=4,
                             d_obj=6)
    started = time.time()
    report = model_grad_check(config, n_objects=args.objects,
                              n_tokens=args.tokens, seed=args.seed,
                              max_coords_per_tensor=args.coords)
    elapsed = time.time() - started
    ok = report.ok(args.tol)
    print(f"{report.summary()} in {elapsed:.1f}s; "
          f"{'OK' if ok else 'FAIL'} at tol {args.tol:g}")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    model_config = replace(load_model_config(args.model_config),
                           subtask=args.subtask)
    train_config = load_train_config(args.train_config)
    train_data = _load_examples(args.data, model_config.d_obj)
    eval_data = _load_examples(args.eval_data, model_config.d_obj)
    variants = args.variant or list(ABLATION_VARIANTS)
    report = run_ablation(variants, model_config, train_config, train_data,
                          eval_data, model_seed=args.model_seed)
    print(report.to_text())
    if args.out:
        accuracies = {row.name: row.report.accuracy for row in report.rows}
        for path in render_report(args.out, ablation=accuracies):
            print(f"report: {path}")
    return 0


def cmd_report(args) -> int:
    history = None
    if args.metrics:
        with open(args.metrics, encoding="utf-8") as f:
            history = [json.loads(line) for line in f if line.strip()]
        if not history:
            raise ParseError(f"{args.metrics}: no metrics records")
    eval_rows = None
    if args.preds:
        eval_rows = [r.to_dict() for r in load_predictions(args.preds)]
        for row in eval_rows:
            row["scores"] = " ".join(f"{s:.6g}" for s in row["scores"])
    written = render_report(args.out, history=history, eval_rows=eval_rows)
    for path in written:
        print(f"report: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coreason",
        description="Grounded multiple-choice reasoning over text and "
                    "object features")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True,
                   help="generator config (key = value lines)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--eval-data", default=None,
                   help="held-out dataset evaluated each epoch")
    p.add_argument("--subtask", required=True, choices=("qa", "qar"))
    p.add_argument("--out", required=True,
                   help="run directory (checkpoint, metrics, figures)")
    p.add_argument("--model-seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subtask", default=None, choices=("qa", "qar"),
                   help="must match the checkpoint's subtask")
    p.add_argument("--preds", default=None,
                   help="write per-example prediction records here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("join", help="joint accuracy from two runs")
    p.add_argument("--qa-preds", required=True)
    p.add_argument("--qar-preds", required=True)
    p.set_defaults(fn=cmd_join)

    p = sub.add_parser("predict", help="score a dataset, optionally "
                                       "dumping attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None,
                   help="prediction records file (default: stdout)")
    p.add_argument("--emit-attention", default=None, metavar="DIR",
                   help="dump per-layer attention matrices here")
    p.add_argument("--attention-examples", type=int, default=1)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--model-config", default=None,
                   help="default: the tiny double-precision probe config")
    p.add_argument("--coords", type=int, default=3,
                   help="coordinates sampled per tensor")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--tokens", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare variants")
    p.add_argument("--variant", action="append",
                   choices=list(ABLATION_VARIANTS),
                   help="repeatable; default: all variants")
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--subtask", default="qa", choices=("qa", "qar"))
    p.add_argument("--out", default=None,
                   help="directory for the comparison table and figure")
    p.add_argument("--model-seed", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render tables and figures from "
                                      "run artifacts")
    p.add_argument("--metrics", default=None, help="metrics.jsonl path")
    p.add_argument("--preds", default=None, help="prediction records path")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CoreasonError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
