"""Finite-difference verification of reverse-mode gradients.

``grad_check`` perturbs individual parameter coordinates and compares the
central-difference quotient against the gradient the tape produced. It is
the independent oracle for the whole autodiff stack: the forward function
under test is evaluated as a black box, so any disagreement points at a
wrong backward rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import InputError
from .tensor import RngState, Tensor, no_grad


@dataclass
class CoordResult:
    """One checked coordinate: where, and how far apart the two gradients."""
    tensor_name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Outcome of a grad_check run over a set of parameters."""
    max_rel_error: float
    checked: int
    total_coords: int
    worst: CoordResult | None
    results: list[CoordResult] = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def summary(self) -> str:
        where = ""
        if self.worst is not None:
            where = (f" (worst: {self.worst.tensor_name}{list(self.worst.index)}"
                     f" analytic={self.worst.analytic:.3e}"
                     f" numeric={self.worst.numeric:.3e})")
        return (f"checked {self.checked}/{self.total_coords} coordinates, "
                f"max rel error {self.max_rel_error:.3e}{where}")


def _rel_error(a: float, n: float, atol: float) -> float:
    """Relative disagreement with a floor: coordinates where both values
    are below ``atol`` count as exact agreement."""
    if abs(a) < atol and abs(n) < atol:
        return 0.0
    return abs(a - n) / max(abs(a), abs(n), atol)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    eps: float = 1e-5,
    atol: float = 1e-8,
    max_coords_per_tensor: int | None = None,
    rng: RngState | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the forward pass from the current parameter values
    on every call and return a scalar loss. ``params`` are (name, tensor)
    pairs whose ``data`` buffers are perturbed in place.

    When ``max_coords_per_tensor`` is set, that many coordinates per tensor
    are sampled (without replacement) using ``rng``; the report records how
    many were actually checked out of the total.
    """
    for _, p in params:
        if not p.requires_grad:
            raise InputError("grad_check parameter does not require grad")
        p.grad = None

    loss = fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params}

    if max_coords_per_tensor is not None and rng is None:
        rng = RngState(0, 0)

    results: list[CoordResult] = []
    total = sum(p.size for _, p in params)
    for name, p in params:
        flat = p.data.reshape(-1)
        n_coords = flat.size
        if max_coords_per_tensor is not None and n_coords > max_coords_per_tensor:
            coords = rng.permutation(n_coords)[:max_coords_per_tensor]
        else:
            coords = np.arange(n_coords)
        ga = analytic[name].reshape(-1)
        for c in coords:
            c = int(c)
            saved = flat[c]
            with no_grad():
                flat[c] = saved + eps
                f_plus = float(fn().data)
                flat[c] = saved - eps
                f_minus = float(fn().data)
            flat[c] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ga[c])
            idx = np.unravel_index(c, p.shape)
            results.append(CoordResult(
                tensor_name=name,
                index=tuple(int(i) for i in idx),
                analytic=a,
                numeric=numeric,
                rel_error=_rel_error(a, numeric, atol),
            ))

    worst = max(results, key=lambda r: r.rel_error) if results else None
    return GradCheckReport(
        max_rel_error=worst.rel_error if worst else 0.0,
        checked=len(results),
        total_coords=total,
        worst=worst,
        results=results,
    )


def probe_example(d_obj: int, n_objects: int = 2, n_tokens: int = 4,
                  seed: int = 0):
    """Handcrafted example small enough to differentiate exhaustively:
    ``n_tokens`` query tokens ending in a tag reference, four single-token
    answers, four three-token rationales."""
    from .taskdata import FAMILY_VALUES, SceneExample, SceneObject, Vocabulary
    if n_tokens < 2:
        raise InputError(f"probe query needs >= 2 tokens, got {n_tokens}")
    vocab = Vocabulary()
    rng = RngState(seed, 7)
    objects = [SceneObject(features=rng.normal(1.0, (d_obj,)), tag=i)
               for i in range(n_objects)]
    words = ["what", "color", "of", "after", "is"]
    query = vocab.encode(words[:n_tokens - 1]) + [vocab.tag_id(0)]
    colors = FAMILY_VALUES["color"]
    answers = [[vocab.id(colors[i])] for i in range(4)]
    rationales = [[vocab.tag_id(i % n_objects), vocab.id("is"),
                   vocab.id(colors[i])] for i in range(4)]
    return SceneExample(id="probe0", objects=objects, query=query,
                        answers=answers, answer_label=0,
                        rationales=rationales, rationale_label=0)


def model_grad_check(config, n_objects: int = 2, n_tokens: int = 4,
                     seed: int = 0, eps: float = 1e-5,
                     max_coords_per_tensor: int | None = None,
                     rng: RngState | None = None) -> GradCheckReport:
    """Differentiate the whole model end to end in double precision.

    Dropout is forced off and memory stays empty, so the loss is a smooth
    deterministic function of the parameters and central differences are
    trustworthy.
    """
    from .model import Model
    config = replace(config, dropout_ff=0.0, dropout_cls=0.0)
    with T.precision("float64"):
        model = Model(config, seed=seed)
        ex = probe_example(config.d_obj, n_objects, n_tokens, seed)
        gold = ex.answer_label if config.subtask == "qa" \
            else ex.rationale_label

        def fn() -> Tensor:
            emb = model.embed(ex)
            logits = model.forward(emb, "train", use_memory=False)
            return T.cross_entropy(logits, gold)

        return grad_check(fn, model.parameters(), eps=eps,
                          max_coords_per_tensor=max_coords_per_tensor,
                          rng=rng)
