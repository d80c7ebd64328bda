"""Training and evaluation loops.

Batches are gradient accumulation over single-example forwards: each loss
is pre-scaled by 1/batch_size, gradients sum across the batch, then one
clipped optimizer step runs. Memory cells receive one write per batch
(the mean of the batch's reduced summaries) and reset at epoch starts, so
an epoch's examples never see a previous epoch's history.

All schedule randomness comes from counter-based streams derived from the
training seed (stream 2 orders examples, stream 3 drives dropout), so two
runs with the same seed and data produce bitwise-identical metrics logs
and checkpoints. Metrics lines deliberately carry no timestamps.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericError
from .metrics import MetricsReport, PredRecord, accuracy, \
    mean_average_precision
from .model import ForwardTrace, Model
from .optim import Adam, clip_global_norm
from .taskdata import SceneExample
from .tensor import RngState


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    clip_norm: float = 1.0
    precision: str = "float32"
    early_stop_accuracy: float = 0.0  # 0 disables early stopping
    checkpoint_every: int = 0         # epochs between checkpoints; 0 = final only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs {self.epochs} and batch size "
                              f"{self.batch_size} must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision {self.precision!r} not one of "
                              f"('float32', 'float64')")
        if not 0.0 <= self.early_stop_accuracy <= 1.0:
            raise ConfigError(f"early-stop accuracy "
                              f"{self.early_stop_accuracy} outside [0, 1]")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    final: MetricsReport | None = None
    stopped_early: bool = False
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def _gold(example: SceneExample, subtask: str) -> int:
    return example.answer_label if subtask == "qa" \
        else example.rationale_label


def evaluate(model: Model, data: list[SceneExample],
             use_memory: bool | None = None
             ) -> tuple[MetricsReport, list[PredRecord]]:
    """Deterministic eval-mode pass; returns the report and per-example
    score records (ids preserved for the joint protocol)."""
    subtask = model.config.subtask
    records = []
    losses = []
    with T.no_grad():
        for ex in data:
            emb = model.embed(ex)
            logits = model.forward(emb, "eval", use_memory=use_memory)
            gold = _gold(ex, subtask)
            losses.append(T.cross_entropy(logits, gold).item())
            scores = [float(s) for s in logits.data]
            records.append(PredRecord(id=ex.id, scores=scores,
                                      pred=int(np.argmax(logits.data)),
                                      gold=gold))
    report = MetricsReport(
        subtask=subtask,
        accuracy=accuracy([r.pred for r in records],
                          [r.gold for r in records]),
        map=mean_average_precision([r.scores for r in records],
                                   [r.gold for r in records]),
        loss=float(np.mean(losses)),
        example_count=len(records),
    )
    return report, records


def train(model: Model, train_data: list[SceneExample],
          eval_data: list[SceneExample], config: TrainConfig,
          out_dir: str | None = None) -> TrainResult:
    """Run the full loop; returns history plus the final eval report.

    With ``out_dir`` set, per-epoch metrics append to metrics.jsonl and
    checkpoints land in the same directory (checkpoint.bin holds the
    latest good state). A non-finite loss aborts with NumericError and
    leaves the previous checkpoint in place.
    """
    if not train_data:
        raise ConfigError("training needs at least one example")
    subtask = model.config.subtask
    order_rng = RngState(config.seed, 2)
    dropout_rng = RngState(config.seed, 3)
    opt = Adam(model.parameters(), lr=config.lr)
    result = TrainResult()
    metrics_path = ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")
        # a fresh run must not append to a stale log
        if os.path.exists(metrics_path):
            os.remove(metrics_path)
        result.metrics_path = metrics_path
        result.checkpoint_path = ckpt_path

    def checkpoint(epoch: int, step: int) -> None:
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, model, optimizer=opt,
                            rng_state=order_rng.get_state(),
                            step=step, epoch=epoch)

    with T.precision(config.precision):
        step = 0
        for epoch in range(config.epochs):
            model.reset_memory()
            perm = order_rng.permutation(len(train_data))
            loss_sum = 0.0
            correct = 0
            traces: list[ForwardTrace] = []
            model.zero_grad()
            pending = 0

            def flush() -> None:
                nonlocal pending, traces
                clip_global_norm(model.parameters(), config.clip_norm)
                opt.step()
                model.zero_grad()
                model.write_memory(traces)
                traces = []
                pending = 0

            for idx in perm:
                ex = train_data[int(idx)]
                emb = model.embed(ex)
                tr = ForwardTrace()
                logits = model.forward(emb, "train", rng=dropout_rng,
                                       trace=tr)
                gold = _gold(ex, subtask)
                loss = T.cross_entropy(logits, gold)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, step {step}; "
                        f"aborting with the last checkpoint retained")
                T.scale(loss, 1.0 / config.batch_size).backward()
                loss_sum += value
                correct += int(int(np.argmax(logits.data)) == gold)
                traces.append(tr)
                pending += 1
                step += 1
                if pending == config.batch_size:
                    flush()
            if pending:
                flush()

            report, _ = evaluate(model, eval_data) if eval_data \
                else (None, None)
            row = {"epoch": epoch,
                   "train_loss": loss_sum / len(train_data),
                   "train_accuracy": correct / len(train_data)}
            if report is not None:
                row["eval_loss"] = report.loss
                row["eval_accuracy"] = report.accuracy
                row["eval_map"] = report.map
            result.history.append(row)
            if metrics_path is not None:
                with open(metrics_path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(row, sort_keys=True) + "\n")
            cadence = config.checkpoint_every
            if cadence and (epoch + 1) % cadence == 0:
                checkpoint(epoch, step)
            if report is not None and config.early_stop_accuracy > 0 \
                    and report.accuracy >= config.early_stop_accuracy:
                result.stopped_early = True
                break

        checkpoint(epoch, step)
        if eval_data:
            result.final, _ = evaluate(model, eval_data)
    return result
