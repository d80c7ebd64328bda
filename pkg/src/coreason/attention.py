"""Attention primitives: scaled dot-product, multi-head, sinusoidal
position encoding, and the position-wise feed-forward block.

Every function that produces attention weights reports them to the active
:func:`record_attention` sink (if any), so callers can audit weight
matrices anywhere in a model without threading buffers through the call
tree.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .tensor import RngState, Tensor, xavier_limit

_SINK: list["AttentionRecord"] | None = None


@dataclass
class AttentionRecord:
    """One captured weight matrix: rows are queries, columns keys.

    ``weights`` has shape (heads, n_q, n_k) for multi-head calls and
    (n_q, n_k) for single-head calls.
    """
    label: str
    weights: np.ndarray


@contextmanager
def record_attention() -> Iterator[list[AttentionRecord]]:
    """Collect every attention-weight matrix computed inside the block."""
    global _SINK
    saved = _SINK
    sink: list[AttentionRecord] = []
    _SINK = sink
    try:
        yield sink
    finally:
        _SINK = saved


def _record(label: str | None, weights: Tensor) -> None:
    if _SINK is not None:
        _SINK.append(AttentionRecord(label or "attention", weights.data.copy()))


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, label: str | None = None
) -> tuple[Tensor, Tensor]:
    """softmax(Q Kᵀ / √d) V over 2-D inputs.

    Returns the attended output and the weight matrix itself; rows of the
    weight matrix are probability distributions over the keys.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention needs 2-D Q/K/V, got "
                         f"{q.shape}/{k.shape}/{v.shape}")
    d = q.shape[1]
    if d == 0 or k.shape[0] == 0:
        raise ShapeError(f"attention over empty axis: Q {q.shape}, K {k.shape}")
    if k.shape[1] != d:
        raise ShapeError(f"Q/K feature dims differ: {q.shape} vs {k.shape}")
    if v.shape[0] != k.shape[0]:
        raise ShapeError(f"K/V lengths differ: {k.shape} vs {v.shape}")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    weights = T.softmax(scores, axis=-1)
    _record(label, weights)
    return T.matmul(weights, v), weights


@dataclass
class MultiHeadParams:
    """Projection weights for one multi-head attention block.

    ``d_in_q``/``d_in_kv`` allow the query and key/value inputs to be wider
    than ``d_model`` (the fused visual branch feeds 2·d_model features);
    they default to d_model.
    """
    h: int
    d_model: int
    d_in_q: int
    d_in_kv: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @property
    def d_k(self) -> int:
        return self.d_model // self.h

    @classmethod
    def create(cls, rng: RngState, d_model: int, h: int,
               d_in_q: int | None = None, d_in_kv: int | None = None
               ) -> "MultiHeadParams":
        if h < 1 or d_model < 1:
            raise ConfigError(f"head count {h} and model dim {d_model} "
                              f"must be positive")
        if d_model % h != 0:
            raise ConfigError(f"model dim {d_model} not divisible by "
                              f"{h} heads")
        d_in_q = d_model if d_in_q is None else d_in_q
        d_in_kv = d_model if d_in_kv is None else d_in_kv

        def w(fan_in, fan_out):
            lim = xavier_limit(fan_in, fan_out)
            return Tensor(rng.uniform(-lim, lim, (fan_in, fan_out)),
                          requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n, dtype=T.default_dtype()),
                          requires_grad=True)

        return cls(
            h=h, d_model=d_model, d_in_q=d_in_q, d_in_kv=d_in_kv,
            wq=w(d_in_q, d_model), bq=b(d_model),
            wk=w(d_in_kv, d_model), bk=b(d_model),
            wv=w(d_in_kv, d_model), bv=b(d_model),
            wo=w(d_model, d_model), bo=b(d_model),
        )

    def parameters(self, prefix: str = "mha") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{n}", t) for n, t in
                [("wq", self.wq), ("bq", self.bq), ("wk", self.wk),
                 ("bk", self.bk), ("wv", self.wv), ("bv", self.bv),
                 ("wo", self.wo), ("bo", self.bo)]]


def multi_head(q_in: Tensor, k_in: Tensor, v_in: Tensor,
               params: MultiHeadParams, label: str | None = None) -> Tensor:
    """Project, attend per head in parallel, concatenate heads in order,
    project out. Head i reads columns [i·d_k, (i+1)·d_k) of the projected
    arrays, and its output lands in the same columns of the concatenation.

    Inputs are (n, d) sequences or (batch, n, d) stacks of sequences; the
    batch axis, when present, must agree across Q/K/V.
    """
    if q_in.ndim < 2 or q_in.ndim > 3 or k_in.ndim != q_in.ndim:
        raise ShapeError(f"multi_head needs matching 2-D or 3-D inputs, got "
                         f"{q_in.shape}/{k_in.shape}")
    if q_in.shape[-2] == 0 or k_in.shape[-2] == 0:
        raise InputError("multi_head over an empty sequence")
    if q_in.shape[-1] != params.d_in_q:
        raise ShapeError(f"query width {q_in.shape} does not match "
                         f"d_in_q={params.d_in_q}")
    if k_in.shape[-1] != params.d_in_kv or v_in.shape[-1] != params.d_in_kv:
        raise ShapeError(f"key/value width {k_in.shape}/{v_in.shape} does "
                         f"not match d_in_kv={params.d_in_kv}")
    if k_in.shape[:-1] != v_in.shape[:-1]:
        raise ShapeError(f"K/V lengths differ: {k_in.shape} vs {v_in.shape}")
    lead = q_in.shape[:-2]
    if k_in.shape[:-2] != lead:
        raise ShapeError(f"Q/K batch axes differ: {q_in.shape} vs {k_in.shape}")
    n, m = q_in.shape[-2], k_in.shape[-2]
    h, dk, dm = params.h, params.d_k, params.d_model
    q = T.affine(q_in, params.wq, params.bq)
    k = T.affine(k_in, params.wk, params.bk)
    v = T.affine(v_in, params.wv, params.bv)
    qh = T.transpose(T.reshape(q, lead + (n, h, dk)), -3, -2)
    kh = T.transpose(T.reshape(k, lead + (m, h, dk)), -3, -2)
    vh = T.transpose(T.reshape(v, lead + (m, h, dk)), -3, -2)
    scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    _record(label, weights)
    ctx = T.matmul(weights, vh)
    merged = T.reshape(T.transpose(ctx, -3, -2), lead + (n, dm))
    return T.affine(merged, params.wo, params.bo)


@dataclass
class PositionalEncodingTable:
    """Fixed sinusoid table; rows are positions, columns interleave
    sin/cos at geometrically spaced frequencies."""
    max_positions: int
    d_model: int
    table: np.ndarray = field(repr=False)

    def rows(self, n: int) -> np.ndarray:
        if n > self.max_positions:
            raise ShapeError(f"{n} positions requested from a table of "
                             f"{self.max_positions}")
        return self.table[:n]


def positional_encoding(max_positions: int, d_model: int) -> PositionalEncodingTable:
    """table[p, 2i] = sin(p / 10000^(2i/d)), table[p, 2i+1] = cos(same)."""
    if d_model % 2 != 0:
        raise ConfigError(f"positional encoding needs an even model dim, "
                          f"got {d_model}")
    if max_positions < 1:
        raise ConfigError(f"max_positions {max_positions} must be positive")
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    even = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, even / d_model)
    table = np.zeros((max_positions, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return PositionalEncodingTable(max_positions, d_model,
                                   table.astype(T.default_dtype()))


def add_position(x: Tensor, table: PositionalEncodingTable,
                 gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize each row, then add the row's position code."""
    if x.ndim != 2 or x.shape[1] != table.d_model:
        raise ShapeError(f"add_position input {x.shape} does not match "
                         f"table width {table.d_model}")
    pe = Tensor(table.rows(x.shape[0]).astype(x.dtype))
    return T.add(T.layer_norm(x, gamma, beta), pe)


@dataclass
class FeedForwardParams:
    """Two affine layers with a ReLU between; dropout after the ReLU."""
    d_model: int
    d_ff: int
    dropout_rate: float
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, rng: RngState, d_model: int, d_ff: int,
               dropout_rate: float = 0.1) -> "FeedForwardParams":
        if d_ff < d_model:
            raise ConfigError(f"feed-forward width {d_ff} below model dim "
                              f"{d_model}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout rate {dropout_rate} outside [0, 1)")
        l1 = xavier_limit(d_model, d_ff)
        l2 = xavier_limit(d_ff, d_model)
        return cls(
            d_model=d_model, d_ff=d_ff, dropout_rate=dropout_rate,
            w1=Tensor(rng.uniform(-l1, l1, (d_model, d_ff)), requires_grad=True),
            b1=Tensor(np.zeros(d_ff, dtype=T.default_dtype()), requires_grad=True),
            w2=Tensor(rng.uniform(-l2, l2, (d_ff, d_model)), requires_grad=True),
            b2=Tensor(np.zeros(d_model, dtype=T.default_dtype()), requires_grad=True),
        )

    def parameters(self, prefix: str = "ff") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{n}", t) for n, t in
                [("w1", self.w1), ("b1", self.b1),
                 ("w2", self.w2), ("b2", self.b2)]]


def feed_forward(x: Tensor, params: FeedForwardParams, mode: str,
                 rng: RngState | None = None) -> Tensor:
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"feed_forward input {x.shape} does not match "
                         f"d_model={params.d_model}")
    hidden = T.relu(T.affine(x, params.w1, params.b1))
    hidden = T.dropout(hidden, params.dropout_rate, rng,
                       training=(mode == "train"))
    return T.affine(hidden, params.w2, params.b2)
