"""Model assembly: embeddings, fusion, encoder, memory, and head wired
into one forward pass over a single example.

The query stream is fused once per example; each of the four response
candidates is fused separately and co-encoded with the query, so the
query's encoded representation legitimately differs per candidate (guided
attention sees the candidate). Variants: "full" is the complete model;
"no_fusion" skips the fusion layer entirely, so the encoder sees the raw
embedded token streams and no information from the object matrix beyond
what the tokens themselves carry; "no_memory" never injects the memory
position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import (EncoderParams, MemoryCell, co_attention_stack,
                      inject_memory)
from .errors import ConfigError, InputError, StageError
from .fusion import FusionParams, fuse_stream, fuse_streams_stacked
from .head import (HeadParams, attention_reduce, classify_rows,
                   fuse_stream_rows)
from .taskdata import (EmbeddedExample, SceneExample, Vocabulary,
                       embed_example)
from .tensor import RngState, Tensor

VARIANTS = ("full", "no_fusion", "no_memory")
SUBTASKS = ("qa", "qar")


@dataclass
class ModelConfig:
    d_model: int = 64
    h: int = 4
    n_blocks: int = 2
    d_ff: int = 0  # 0 resolves to 2*d_model
    memory_capacity: int = 32
    d_obj: int = 32
    max_positions: int = 64
    dropout_ff: float = 0.1
    dropout_cls: float = 0.3
    classifier_width: int = 1024
    reduce_mid: int = 0  # 0 resolves to d_model
    embed_scale: float = 0.5
    variant: str = "full"
    subtask: str = "qa"
    memory_at_eval: bool = False

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 2 * self.d_model
        if self.reduce_mid == 0:
            self.reduce_mid = self.d_model
        for name in ("d_model", "h", "n_blocks", "d_ff", "memory_capacity",
                     "d_obj", "max_positions", "classifier_width",
                     "reduce_mid"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got "
                                  f"{getattr(self, name)}")
        if self.d_model % self.h != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by "
                              f"h={self.h}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant {self.variant!r} not one of "
                              f"{VARIANTS}")
        if self.subtask not in SUBTASKS:
            raise ConfigError(f"subtask {self.subtask!r} not one of "
                              f"{SUBTASKS}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class ForwardTrace:
    """Reduced summary rows (stacks of per-candidate vectors) kept for the
    memory write."""
    z_q: list[Tensor] = field(default_factory=list)
    z_r: list[Tensor] = field(default_factory=list)


class Model:
    """Parameters plus the two memory cells; all state lives here."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.vocab = Vocabulary()
        rng = RngState(seed, 1)
        c = config
        lim = T.xavier_limit(c.d_obj, c.d_model)
        self.embedding = Tensor(
            rng.normal(c.embed_scale / np.sqrt(c.d_model),
                       (self.vocab.size, c.d_model)), requires_grad=True)
        self.obj_w = Tensor(rng.uniform(-lim, lim, (c.d_obj, c.d_model)),
                            requires_grad=True)
        self.obj_b = Tensor(np.zeros(c.d_model, dtype=T.default_dtype()),
                            requires_grad=True)
        self.fusion = FusionParams.create(rng, c.d_model, c.h,
                                          max_positions=c.max_positions)
        self.encoder = EncoderParams.create(rng, c.d_model, c.h, c.d_ff,
                                            c.n_blocks, c.dropout_ff)
        self.head = HeadParams.create(rng, c.d_model, c.classifier_width,
                                      c.dropout_cls, c.reduce_mid)
        self.memory_q = MemoryCell(c.memory_capacity, c.d_model)
        self.memory_r = MemoryCell(c.memory_capacity, c.d_model)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embedding", self.embedding), ("obj_w", self.obj_w),
               ("obj_b", self.obj_b)]
        out += self.fusion.parameters("fusion")
        out += self.encoder.parameters("encoder")
        out += self.head.parameters("head")
        return out

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.grad = None

    def reset_memory(self) -> None:
        self.memory_q.reset()
        self.memory_r.reset()

    def embed(self, example: SceneExample) -> EmbeddedExample:
        try:
            return embed_example(example, self.vocab, self.embedding,
                                 self.obj_w, self.obj_b,
                                 subtask=self.config.subtask)
        except Exception as e:
            raise StageError("embed", e) from e

    def _query_stream(self, emb: EmbeddedExample,
                      label: str | None) -> Tensor:
        if self.config.variant == "no_fusion":
            return emb.query
        return fuse_stream(emb.query, emb.objects, self.fusion,
                           label=f"{label}.q" if label else None)

    def _response_streams(self, emb: EmbeddedExample, group: list[int],
                          label: str | None) -> Tensor:
        """Fused (B, n, d) stack over the candidates in ``group``."""
        r_stack = T.stack_rows([emb.responses[i] for i in group])
        if self.config.variant == "no_fusion":
            return r_stack
        return fuse_streams_stacked(r_stack, emb.objects, self.fusion,
                                    label=f"{label}.r" if label else None)

    def forward(self, emb: EmbeddedExample, mode: str,
                rng: RngState | None = None,
                use_memory: bool | None = None,
                trace: ForwardTrace | None = None,
                label: str | None = None) -> Tensor:
        """Logits over the 4 candidates for one embedded example.

        Equal-length candidates run as one (4, n, d) stack; ragged ones
        fall back to four single-candidate stacks. Either way the logit
        order is the candidate order.
        """
        c = self.config
        if mode not in ("train", "eval"):
            raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
        if use_memory is None:
            use_memory = mode == "train" or c.memory_at_eval
        if c.variant == "no_memory":
            use_memory = False
        if len({r.shape[0] for r in emb.responses}) == 1:
            groups = [list(range(len(emb.responses)))]
        else:
            groups = [[i] for i in range(len(emb.responses))]

        try:
            q_o = self._query_stream(emb, label)
        except Exception as e:
            raise StageError("fusion", e) from e

        fused_rows = []
        for group in groups:
            try:
                r_o = self._response_streams(emb, group, label)
            except Exception as e:
                raise StageError("fusion", e) from e
            try:
                z_q, z_r = co_attention_stack(
                    T.tile_leading(q_o, len(group)), r_o, self.encoder,
                    mode, rng, label=label)
                if c.variant != "no_memory":
                    z_q = inject_memory(
                        z_q, self.memory_q if use_memory else None,
                        self.encoder)
                    z_r = inject_memory(
                        z_r, self.memory_r if use_memory else None,
                        self.encoder)
            except Exception as e:
                raise StageError("encoder", e) from e
            try:
                zq_t = attention_reduce(
                    z_q, self.head.reduce_q,
                    label=f"{label}.reduce_q" if label else None)
                zr_t = attention_reduce(
                    z_r, self.head.reduce_r,
                    label=f"{label}.reduce_r" if label else None)
                if trace is not None:
                    trace.z_q.append(zq_t)
                    trace.z_r.append(zr_t)
                fused_rows.append(fuse_stream_rows(zq_t, zr_t, self.head))
            except Exception as e:
                raise StageError("head", e) from e
        try:
            fused = fused_rows[0] if len(fused_rows) == 1 \
                else T.concat(fused_rows, axis=0)
            return classify_rows(fused, self.head, mode, rng)
        except Exception as e:
            raise StageError("head", e) from e

    def write_memory(self, traces: list[ForwardTrace]) -> None:
        """One write per cell per batch: the mean of every reduced summary
        row the batch produced, taken as plain data (no gradient history)."""
        if self.config.variant == "no_memory":
            return
        zq = [t.data for tr in traces for t in tr.z_q]
        zr = [t.data for tr in traces for t in tr.z_r]
        if not zq:
            return
        from .encoder import memory_write
        memory_write(self.memory_q,
                     Tensor(np.concatenate(zq, axis=0).mean(axis=0)))
        memory_write(self.memory_r,
                     Tensor(np.concatenate(zr, axis=0).mean(axis=0)))
