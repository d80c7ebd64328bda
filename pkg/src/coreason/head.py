"""Prediction layer: collapse each encoded sequence to one vector, fuse
the query and response vectors, and score the four candidates.

Reduction is attention-style: a small MLP scores each position, the
softmax of those scores weights the rows. Stream fusion projects both
summary vectors and layer-norms their sum. Candidate scoring shares one
classifier across all four responses; no candidate sees another before the
final softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import _record
from .errors import ConfigError, InputError, ShapeError
from .tensor import RngState, Tensor, xavier_limit


@dataclass
class ReductionParams:
    """Two-layer scorer: d_model -> d_mid -> 1 per sequence position."""
    d_model: int
    d_mid: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, rng: RngState, d_model: int,
               d_mid: int | None = None) -> "ReductionParams":
        d_mid = d_model if d_mid is None else d_mid
        if d_mid < 1:
            raise ConfigError(f"reduction width {d_mid} must be positive")
        l1 = xavier_limit(d_model, d_mid)
        l2 = xavier_limit(d_mid, 1)
        dt = T.default_dtype()
        return cls(
            d_model=d_model, d_mid=d_mid,
            w1=Tensor(rng.uniform(-l1, l1, (d_model, d_mid)), requires_grad=True),
            b1=Tensor(np.zeros(d_mid, dtype=dt), requires_grad=True),
            w2=Tensor(rng.uniform(-l2, l2, (d_mid, 1)), requires_grad=True),
            b2=Tensor(np.zeros(1, dtype=dt), requires_grad=True),
        )

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{n}", t) for n, t in
                [("w1", self.w1), ("b1", self.b1),
                 ("w2", self.w2), ("b2", self.b2)]]


def attention_reduce(z: Tensor, params: ReductionParams,
                     label: str | None = None) -> Tensor:
    """Weighted sum of rows, weights = softmax of per-row MLP scores.

    (n, d) reduces to (d,); a stack (B, n, d) reduces each sequence
    independently to (B, d).
    """
    if z.ndim not in (2, 3) or z.shape[-2] == 0:
        raise InputError(f"attention_reduce needs a nonempty sequence (or "
                         f"stack of them), got shape {z.shape}")
    if z.shape[-1] != params.d_model:
        raise ShapeError(f"attention_reduce width {z.shape} does not match "
                         f"d_model={params.d_model}")
    scores = T.affine(T.relu(T.affine(z, params.w1, params.b1)),
                      params.w2, params.b2)
    alpha = T.softmax(T.transpose(scores), axis=-1)
    _record(label or "reduce", alpha)
    return T.reshape(T.matmul(alpha, z), z.shape[:-2] + (params.d_model,))


@dataclass
class HeadParams:
    """Stream-fusion projections plus the candidate classifier."""
    d_model: int
    classifier_width: int
    dropout_rate: float
    reduce_q: ReductionParams
    reduce_r: ReductionParams
    w_x1: Tensor
    w_x2: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    cls_w1: Tensor
    cls_b1: Tensor
    cls_w2: Tensor
    cls_b2: Tensor

    @classmethod
    def create(cls, rng: RngState, d_model: int, classifier_width: int = 1024,
               dropout_rate: float = 0.3,
               reduce_mid: int | None = None) -> "HeadParams":
        if classifier_width < 1:
            raise ConfigError(f"classifier width {classifier_width} must be "
                              f"positive")
        dt = T.default_dtype()
        lp = xavier_limit(d_model, d_model)
        l1 = xavier_limit(d_model, classifier_width)
        return cls(
            d_model=d_model, classifier_width=classifier_width,
            dropout_rate=dropout_rate,
            reduce_q=ReductionParams.create(rng, d_model, reduce_mid),
            reduce_r=ReductionParams.create(rng, d_model, reduce_mid),
            w_x1=Tensor(rng.uniform(-lp, lp, (d_model, d_model)), requires_grad=True),
            w_x2=Tensor(rng.uniform(-lp, lp, (d_model, d_model)), requires_grad=True),
            ln_gamma=Tensor(np.ones(d_model, dtype=dt), requires_grad=True),
            ln_beta=Tensor(np.zeros(d_model, dtype=dt), requires_grad=True),
            cls_w1=Tensor(rng.uniform(-l1, l1, (d_model, classifier_width)),
                          requires_grad=True),
            cls_b1=Tensor(np.zeros(classifier_width, dtype=dt), requires_grad=True),
            # zero final layer: logits start uniform, so the first updates
            # move along the discriminative gradient instead of first
            # spending epochs suppressing random init noise
            cls_w2=Tensor(np.zeros((classifier_width, 1), dtype=dt),
                          requires_grad=True),
            cls_b2=Tensor(np.zeros(1, dtype=dt), requires_grad=True),
        )

    def parameters(self, prefix: str = "head") -> list[tuple[str, Tensor]]:
        out = self.reduce_q.parameters(f"{prefix}.reduce_q")
        out += self.reduce_r.parameters(f"{prefix}.reduce_r")
        out += [(f"{prefix}.{n}", t) for n, t in
                [("w_x1", self.w_x1), ("w_x2", self.w_x2),
                 ("ln_gamma", self.ln_gamma), ("ln_beta", self.ln_beta),
                 ("cls_w1", self.cls_w1), ("cls_b1", self.cls_b1),
                 ("cls_w2", self.cls_w2), ("cls_b2", self.cls_b2)]]
        return out


def fuse_stream_rows(z_q: Tensor, z_r: Tensor, params: HeadParams) -> Tensor:
    """Row-wise stream fusion: both inputs are (B, d) row stacks and row b
    of the result fuses row b of each."""
    d = params.d_model
    if z_q.ndim != 2 or z_q.shape != z_r.shape or z_q.shape[1] != d:
        raise ShapeError(f"fuse_stream_rows expects matching (B, {d}) "
                         f"stacks, got {z_q.shape} and {z_r.shape}")
    a = T.matmul(z_q, params.w_x1)
    b = T.matmul(z_r, params.w_x2)
    return T.layer_norm(T.add(a, b), params.ln_gamma, params.ln_beta)


def fuse_streams(z_q: Tensor, z_r: Tensor, params: HeadParams) -> Tensor:
    """c = layer_norm(W_x1ᵀ z_q + W_x2ᵀ z_r), returned as a flat vector."""
    d = params.d_model
    if z_q.shape != (d,) or z_r.shape != (d,):
        raise ShapeError(f"fuse_streams expects two ({d},) vectors, got "
                         f"{z_q.shape} and {z_r.shape}")
    c = fuse_stream_rows(T.reshape(z_q, (1, d)), T.reshape(z_r, (1, d)),
                         params)
    return T.reshape(c, (d,))


def classify_rows(c: Tensor, params: HeadParams, mode: str,
                  rng=None) -> Tensor:
    """One logit per row of a (B, d) stack of fused vectors.

    Rows never mix: dropout masks are elementwise and the two affine maps
    act row-wise, so each logit depends only on its own row.
    """
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    if c.ndim != 2 or c.shape[1] != params.d_model:
        raise ShapeError(f"classify_rows expects (B, {params.d_model}), "
                         f"got {c.shape}")
    training = mode == "train"
    x = T.dropout(c, params.dropout_rate, rng, training)
    x = T.relu(T.affine(x, params.cls_w1, params.cls_b1))
    x = T.dropout(x, params.dropout_rate, rng, training)
    x = T.affine(x, params.cls_w2, params.cls_b2)
    return T.reshape(x, (c.shape[0],))


def score_candidates(fused: list[Tensor], params: HeadParams, mode: str,
                     rng=None) -> Tensor:
    """One logit per candidate; prediction = argmax of softmax(logits)."""
    if len(fused) != 4:
        raise InputError(f"expected exactly 4 candidate vectors, got "
                         f"{len(fused)}")
    return classify_rows(T.stack_rows(fused), params, mode, rng)
