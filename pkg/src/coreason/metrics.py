"""Evaluation metrics: accuracy, mean average precision over 4-way
rankings, and the joint Q->AR protocol."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ParseError


@dataclass
class PredRecord:
    """One scored example: candidate scores, the argmax, and the gold."""
    id: str
    scores: list[float]
    pred: int
    gold: int

    def to_dict(self) -> dict:
        return {"id": self.id, "scores": self.scores, "pred": self.pred,
                "gold": self.gold}

    @classmethod
    def from_dict(cls, d: dict) -> "PredRecord":
        return cls(id=d["id"], scores=[float(s) for s in d["scores"]],
                   pred=int(d["pred"]), gold=int(d["gold"]))


def accuracy(preds, golds) -> float:
    preds = list(preds)
    golds = list(golds)
    if len(preds) != len(golds):
        raise InputError(f"{len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise InputError("accuracy of an empty prediction set")
    return float(sum(int(p == g) for p, g in zip(preds, golds)) / len(preds))


def average_precision(scores, gold: int) -> float:
    """AP with a single relevant candidate = 1 / rank of the gold under
    descending scores; score ties resolve toward the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or not 0 <= gold < s.shape[0]:
        raise InputError(f"gold {gold} outside scores of shape {s.shape}")
    order = np.argsort(-s, kind="stable")
    rank = int(np.nonzero(order == gold)[0][0]) + 1
    return 1.0 / rank


def mean_average_precision(score_rows, golds) -> float:
    rows = list(score_rows)
    golds = list(golds)
    if len(rows) != len(golds):
        raise InputError(f"{len(rows)} score rows vs {len(golds)} golds")
    if not rows:
        raise InputError("mAP of an empty prediction set")
    return float(np.mean([average_precision(r, g)
                          for r, g in zip(rows, golds)]))


def save_predictions(records: list[PredRecord], path: str) -> str:
    """One JSON record per line, in evaluation order."""
    if not records:
        raise InputError("no prediction records to save")
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def load_predictions(path: str) -> list[PredRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(PredRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError,
                    ValueError) as e:
                raise ParseError(f"{path}:{lineno}: bad prediction record: "
                                 f"{e}") from e
    if not records:
        raise ParseError(f"{path}: no prediction records")
    return records


def frechet_bounds(acc_a: float, acc_b: float) -> tuple[float, float]:
    """Range the both-correct rate can occupy given the two marginal
    accuracies: [max(0, a+b-1), min(a, b)]."""
    return max(0.0, acc_a + acc_b - 1.0), min(acc_a, acc_b)


def join_qar(qa_records: list[PredRecord],
             qar_records: list[PredRecord]) -> float:
    """Joint accuracy: an example counts iff both its answer and its
    rationale predictions are correct. Records align by example id."""
    if len(qa_records) != len(qar_records):
        raise InputError(f"{len(qa_records)} answer records vs "
                         f"{len(qar_records)} rationale records")
    if not qa_records:
        raise InputError("joint accuracy of an empty prediction set")
    by_id = {r.id: r for r in qar_records}
    if len(by_id) != len(qar_records):
        raise InputError("duplicate ids in rationale records")
    hits = 0
    for qa in qa_records:
        qar = by_id.get(qa.id)
        if qar is None:
            raise InputError(f"example {qa.id} missing from rationale "
                             f"records")
        hits += int(qa.pred == qa.gold and qar.pred == qar.gold)
    return hits / len(qa_records)


@dataclass
class MetricsReport:
    subtask: str
    accuracy: float
    map: float
    loss: float
    example_count: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise InputError(f"accuracy {self.accuracy} outside [0, 1]")
        if not 0.0 <= self.map <= 1.0:
            raise InputError(f"mAP {self.map} outside [0, 1]")
        if self.example_count < 1:
            raise InputError("a metrics report needs at least one example")

    def to_dict(self) -> dict:
        d = {"subtask": self.subtask, "accuracy": self.accuracy,
             "mAP": self.map, "loss": self.loss,
             "examples": self.example_count}
        d.update(self.extra)
        return d
