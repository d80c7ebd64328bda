"""Ablation harness: trains architecture variants under one budget and
reports them side by side.

Every variant shares the same data, training seed, epoch count, and
batch size; only the named architectural change differs, so accuracy
deltas are attributable to the change rather than the schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import InputError
from .metrics import MetricsReport
from .model import Model, ModelConfig
from .train import TrainConfig, evaluate, train

ABLATION_VARIANTS = ("full", "no_fusion", "no_memory", "n1")


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    """Model config for one named variant, derived from ``base``."""
    if name == "full":
        return replace(base, variant="full")
    if name == "no_fusion":
        return replace(base, variant="no_fusion")
    if name == "no_memory":
        return replace(base, variant="no_memory")
    if name == "n1":
        return replace(base, variant="full", n_blocks=1)
    raise InputError(f"unknown ablation variant {name!r}; choose from "
                     f"{ABLATION_VARIANTS}")


@dataclass
class AblationRow:
    name: str
    report: MetricsReport
    history: list[dict] = field(default_factory=list)


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def accuracy_of(self, name: str) -> float:
        for row in self.rows:
            if row.name == name:
                return row.report.accuracy
        raise InputError(f"variant {name!r} not in this report")

    def to_dict(self) -> dict:
        return {row.name: row.report.to_dict() for row in self.rows}

    def to_text(self) -> str:
        lines = [f"{'variant':<12} {'accuracy':>9} {'mAP':>7} {'loss':>8}"]
        base = self.rows[0].report.accuracy if self.rows else 0.0
        for i, row in enumerate(self.rows):
            r = row.report
            delta = "" if i == 0 else f"  ({r.accuracy - base:+.3f})"
            lines.append(f"{row.name:<12} {r.accuracy:>9.3f} {r.map:>7.3f} "
                         f"{r.loss:>8.4f}{delta}")
        return "\n".join(lines)


def run_ablation(variants: list[str], base_config: ModelConfig,
                 train_config: TrainConfig, train_data, eval_data,
                 model_seed: int = 0) -> AblationReport:
    """Train each variant from scratch under the shared budget."""
    if not variants:
        raise InputError("ablation needs at least one variant")
    rows = []
    for name in variants:
        cfg = variant_config(base_config, name)
        model = Model(cfg, seed=model_seed)
        result = train(model, train_data, eval_data, train_config)
        report, _ = evaluate(model, eval_data)
        rows.append(AblationRow(name=name, report=report,
                                history=result.history))
    return AblationReport(rows=rows)
