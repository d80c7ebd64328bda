"""Stacked co-attention encoder with an external memory cell.

Each of the N blocks runs both streams (query, response) through a
self-attention unit and then a guided-attention unit whose keys/values are
the *other* stream's self-attended representation. Both guided units read
only values computed from the block inputs, so the streams update in
parallel rather than one feeding the other.

The memory cell is a capacity-bounded FIFO of summary vectors. Reads
concatenate entries in write order; writes append (evicting the oldest
entry when full) and never keep gradient history. A projection of the
memory mean is injected as one extra sequence position after the stack.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import FeedForwardParams, MultiHeadParams, feed_forward, multi_head
from .errors import ConfigError, NumericError, ShapeError
from .tensor import RngState, Tensor

_ZERO_BRANCHES = False


@contextmanager
def zeroed_branches() -> Iterator[None]:
    """Test hook: make every residual branch contribute zero, so units
    degenerate to a pure layer-norm cascade."""
    global _ZERO_BRANCHES
    saved = _ZERO_BRANCHES
    _ZERO_BRANCHES = True
    try:
        yield
    finally:
        _ZERO_BRANCHES = saved


@dataclass
class UnitParams:
    """One attention unit: multi-head + feed-forward, each wrapped in a
    residual connection and layer norm."""
    mha: MultiHeadParams
    ff: FeedForwardParams
    gamma1: Tensor
    beta1: Tensor
    gamma2: Tensor
    beta2: Tensor

    @classmethod
    def create(cls, rng: RngState, d_model: int, h: int, d_ff: int,
               dropout_rate: float) -> "UnitParams":
        dt = T.default_dtype()

        def ones():
            return Tensor(np.ones(d_model, dtype=dt), requires_grad=True)

        def zeros():
            return Tensor(np.zeros(d_model, dtype=dt), requires_grad=True)

        return cls(
            mha=MultiHeadParams.create(rng, d_model, h),
            ff=FeedForwardParams.create(rng, d_model, d_ff, dropout_rate),
            gamma1=ones(), beta1=zeros(), gamma2=ones(), beta2=zeros(),
        )

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = self.mha.parameters(f"{prefix}.mha")
        out += self.ff.parameters(f"{prefix}.ff")
        out += [(f"{prefix}.gamma1", self.gamma1),
                (f"{prefix}.beta1", self.beta1),
                (f"{prefix}.gamma2", self.gamma2),
                (f"{prefix}.beta2", self.beta2)]
        return out


def _unit(x: Tensor, guide: Tensor, params: UnitParams, mode: str,
          rng: RngState | None, label: str | None) -> Tensor:
    att = multi_head(x, guide, guide, params.mha, label=label)
    if _ZERO_BRANCHES:
        att = T.scale(att, 0.0)
    h = T.layer_norm(T.add(x, att), params.gamma1, params.beta1)
    ff = feed_forward(h, params.ff, mode, rng)
    if _ZERO_BRANCHES:
        ff = T.scale(ff, 0.0)
    return T.layer_norm(T.add(h, ff), params.gamma2, params.beta2)


def self_attention_unit(x: Tensor, params: UnitParams, mode: str,
                        rng: RngState | None = None,
                        label: str | None = None) -> Tensor:
    return _unit(x, x, params, mode, rng, label)


def guided_attention_unit(x: Tensor, y: Tensor, params: UnitParams,
                          mode: str, rng: RngState | None = None,
                          label: str | None = None) -> Tensor:
    """x attends over y (keys and values); output stays aligned to x."""
    return _unit(x, y, params, mode, rng, label)


@dataclass
class CoAttentionBlockParams:
    sa_q: UnitParams
    sa_r: UnitParams
    ga_q: UnitParams
    ga_r: UnitParams

    @classmethod
    def create(cls, rng: RngState, d_model: int, h: int, d_ff: int,
               dropout_rate: float) -> "CoAttentionBlockParams":
        mk = lambda: UnitParams.create(rng, d_model, h, d_ff, dropout_rate)
        return cls(sa_q=mk(), sa_r=mk(), ga_q=mk(), ga_r=mk())

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return (self.sa_q.parameters(f"{prefix}.sa_q")
                + self.sa_r.parameters(f"{prefix}.sa_r")
                + self.ga_q.parameters(f"{prefix}.ga_q")
                + self.ga_r.parameters(f"{prefix}.ga_r"))


@dataclass
class EncoderParams:
    n_blocks: int
    blocks: list[CoAttentionBlockParams]
    mem_w: Tensor
    mem_b: Tensor

    @classmethod
    def create(cls, rng: RngState, d_model: int, h: int, d_ff: int,
               n_blocks: int, dropout_rate: float = 0.1) -> "EncoderParams":
        if n_blocks < 1:
            raise ConfigError(f"encoder needs at least one block, got "
                              f"{n_blocks}")
        lim = T.xavier_limit(d_model, d_model)
        return cls(
            n_blocks=n_blocks,
            blocks=[CoAttentionBlockParams.create(rng, d_model, h, d_ff,
                                                  dropout_rate)
                    for _ in range(n_blocks)],
            mem_w=Tensor(rng.uniform(-lim, lim, (d_model, d_model)),
                         requires_grad=True),
            mem_b=Tensor(np.zeros(d_model, dtype=T.default_dtype()),
                         requires_grad=True),
        )

    def parameters(self, prefix: str = "encoder") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, b in enumerate(self.blocks):
            out += b.parameters(f"{prefix}.block{i}")
        out += [(f"{prefix}.mem_w", self.mem_w),
                (f"{prefix}.mem_b", self.mem_b)]
        return out


def co_attention_stack(q_o: Tensor, r_o: Tensor, params: EncoderParams,
                       mode: str, rng: RngState | None = None,
                       label: str | None = None) -> tuple[Tensor, Tensor]:
    q, r = q_o, r_o
    for i, block in enumerate(params.blocks):
        p = f"{label}.block{i}" if label else None
        q_self = self_attention_unit(q, block.sa_q, mode, rng,
                                     label=f"{p}.sa_q" if p else None)
        r_self = self_attention_unit(r, block.sa_r, mode, rng,
                                     label=f"{p}.sa_r" if p else None)
        q = guided_attention_unit(q_self, r_self, block.ga_q, mode, rng,
                                  label=f"{p}.ga_q" if p else None)
        r = guided_attention_unit(r_self, q_self, block.ga_r, mode, rng,
                                  label=f"{p}.ga_r" if p else None)
    return q, r


class MemoryCell:
    """Bounded FIFO of d_model summary vectors.

    Entries are plain arrays (no tape history); order is write order, and
    the oldest entry is evicted once capacity is exceeded. ``t`` counts
    writes.
    """

    def __init__(self, capacity: int, d_model: int):
        if capacity < 1:
            raise ConfigError(f"memory capacity {capacity} must be positive")
        self.capacity = capacity
        self.d_model = d_model
        self.entries: list[np.ndarray] = []
        self.t = 0

    def __len__(self) -> int:
        return len(self.entries)

    def reset(self) -> None:
        self.entries = []
        self.t = 0

    def state(self) -> dict:
        return {"capacity": self.capacity, "d_model": self.d_model,
                "t": self.t,
                "entries": [e.tolist() for e in self.entries]}

    @classmethod
    def from_state(cls, state: dict) -> "MemoryCell":
        cell = cls(state["capacity"], state["d_model"])
        cell.t = int(state["t"])
        cell.entries = [np.asarray(e, dtype=T.default_dtype())
                        for e in state["entries"]]
        return cell


def memory_read(cell: MemoryCell) -> Tensor:
    """Stored entries as rows, oldest first; empty cell reads as 0 rows."""
    if not cell.entries:
        return Tensor(np.zeros((0, cell.d_model), dtype=T.default_dtype()))
    return Tensor(np.stack(cell.entries, axis=0))


def memory_write(cell: MemoryCell, summary: Tensor) -> MemoryCell:
    data = summary.data if isinstance(summary, Tensor) else np.asarray(summary)
    if data.shape != (cell.d_model,):
        raise ShapeError(f"memory write shape {data.shape} does not match "
                         f"d_model={cell.d_model}")
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite memory summary; training diverged")
    cell.entries.append(data.copy())
    if len(cell.entries) > cell.capacity:
        cell.entries.pop(0)
    cell.t += 1
    return cell


def inject_memory(z: Tensor, cell: MemoryCell | None,
                  params: EncoderParams) -> Tensor:
    """Append one extra position summarizing memory.

    The appended row is a learned projection of the mean of the stored
    entries; a missing or empty cell contributes a projected zero vector,
    so the sequence layout is identical with or without history. ``z`` may
    be one sequence (n, d) or a stack (B, n, d); every stacked sequence
    receives the same row.
    """
    d = z.shape[-1]
    if cell is not None and len(cell) > 0:
        mean = memory_read(cell).data.mean(axis=0)
    else:
        mean = np.zeros(d, dtype=z.dtype)
    row = T.affine(Tensor(mean.reshape(1, d).astype(z.dtype)),
                   params.mem_w, params.mem_b)
    if z.ndim == 3:
        row = T.tile_leading(row, z.shape[0])
    return T.concat([z, row], axis=-2)
