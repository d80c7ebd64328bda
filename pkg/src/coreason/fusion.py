"""Multimodal feature fusion: merges token embeddings with object features.

Three cooperating pieces, applied per stream (the query and each response
candidate run the same pipeline with shared parameters):

1. textual branch: self-attention over the token sequence (X1);
2. visual branch: objects are normalized and position-coded (Q_ve), attend
   over X1 (weights X2, values X3), and the concatenated [Q_ve | X3] pair
   is self-attended back down to model width;
3. text-object fusion: tokens query the fused object representations.

The two token-aligned attentions (textual branch, text-object fusion) are
wrapped in residual connections with layer norm, so each token's own
content survives the fusion instead of being replaced by an attention
mixture; without the skip path the response token's identity reaches the
classifier only as a small additive perturbation and candidate
discrimination trains orders of magnitude too slowly. The visual branch
changes width (2·d_model → d_model), which precludes a residual there.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import (MultiHeadParams, PositionalEncodingTable, _record,
                        add_position, multi_head, positional_encoding)
from .errors import InputError, ShapeError
from .tensor import RngState, Tensor

_SKIP_POSITION = False


@contextmanager
def position_codes_disabled() -> Iterator[None]:
    """Test hook: object rows are normalized but get no position code, so
    fusion outputs become order-invariant in the objects."""
    global _SKIP_POSITION
    saved = _SKIP_POSITION
    _SKIP_POSITION = True
    try:
        yield
    finally:
        _SKIP_POSITION = saved


@dataclass
class FusionParams:
    """Everything the fusion layer owns.

    The visual branch attends over 2·d_model-wide rows (object code
    concatenated with its attended text summary), so its projections take
    the doubled input width.
    """
    d_model: int
    textual: MultiHeadParams
    visual: MultiHeadParams
    text_object: MultiHeadParams
    pe_table: PositionalEncodingTable
    obj_gamma: Tensor
    obj_beta: Tensor
    t_gamma: Tensor
    t_beta: Tensor
    f_gamma: Tensor
    f_beta: Tensor

    @classmethod
    def create(cls, rng: RngState, d_model: int, h: int,
               max_positions: int = 64) -> "FusionParams":
        dt = T.default_dtype()

        def ones():
            return Tensor(np.ones(d_model, dtype=dt), requires_grad=True)

        def zeros():
            return Tensor(np.zeros(d_model, dtype=dt), requires_grad=True)

        return cls(
            d_model=d_model,
            textual=MultiHeadParams.create(rng, d_model, h),
            visual=MultiHeadParams.create(rng, d_model, h,
                                          d_in_q=2 * d_model,
                                          d_in_kv=2 * d_model),
            text_object=MultiHeadParams.create(rng, d_model, h),
            pe_table=positional_encoding(max_positions, d_model),
            obj_gamma=ones(), obj_beta=zeros(),
            t_gamma=ones(), t_beta=zeros(),
            f_gamma=ones(), f_beta=zeros(),
        )

    def parameters(self, prefix: str = "fusion") -> list[tuple[str, Tensor]]:
        out = self.textual.parameters(f"{prefix}.textual")
        out += self.visual.parameters(f"{prefix}.visual")
        out += self.text_object.parameters(f"{prefix}.text_object")
        out += [(f"{prefix}.obj_gamma", self.obj_gamma),
                (f"{prefix}.obj_beta", self.obj_beta),
                (f"{prefix}.t_gamma", self.t_gamma),
                (f"{prefix}.t_beta", self.t_beta),
                (f"{prefix}.f_gamma", self.f_gamma),
                (f"{prefix}.f_beta", self.f_beta)]
        return out


@dataclass
class FusionIntermediates:
    """Stages of the visual branch kept for inspection and testing."""
    q_ve: Tensor
    x2: Tensor
    x3: Tensor


@dataclass
class FusionOutputs:
    q_o: Tensor
    r_o: list[Tensor]


def textual_branch(tokens: Tensor, params: FusionParams,
                   label: str | None = None) -> Tensor:
    """Residual self-attention over the token sequence (X1)."""
    if tokens.shape[0] == 0:
        raise InputError("textual branch got an empty token sequence")
    attended = multi_head(tokens, tokens, tokens, params.textual, label=label)
    return T.layer_norm(T.add(tokens, attended), params.t_gamma,
                        params.t_beta)


def visual_branch_detailed(
    objects: Tensor, x1: Tensor, params: FusionParams,
    label: str | None = None,
) -> tuple[Tensor, FusionIntermediates]:
    """Object pipeline with its intermediates exposed.

    Q_ve = layer_norm(objects) + position codes; X2 = softmax(Q_ve X1ᵀ/√d)
    row-wise over tokens; X3 = X2 X1; the concatenation [Q_ve | X3] is
    self-attended and projected back to d_model.
    """
    if objects.shape[0] == 0:
        raise InputError("visual branch got an empty object sequence")
    if objects.shape[1] != params.d_model or x1.shape[1] != params.d_model:
        raise ShapeError(f"visual branch widths {objects.shape}/{x1.shape} "
                         f"do not match d_model={params.d_model}")
    if _SKIP_POSITION:
        q_ve = T.layer_norm(objects, params.obj_gamma, params.obj_beta)
    else:
        q_ve = add_position(objects, params.pe_table, params.obj_gamma,
                            params.obj_beta)
    scores = T.scale(T.matmul(q_ve, T.transpose(x1)),
                     1.0 / math.sqrt(params.d_model))
    x2 = T.softmax(scores, axis=-1)
    _record(f"{label}.obj_text" if label else "fusion.obj_text", x2)
    x3 = T.matmul(x2, x1)
    f = T.concat([q_ve, x3], axis=1)
    fused = multi_head(f, f, f, params.visual,
                       label=f"{label}.visual" if label else None)
    return fused, FusionIntermediates(q_ve=q_ve, x2=x2, x3=x3)


def visual_branch(objects: Tensor, x1: Tensor, params: FusionParams,
                  label: str | None = None) -> Tensor:
    fused, _ = visual_branch_detailed(objects, x1, params, label=label)
    return fused


def text_object_fusion(x1: Tensor, v_fused: Tensor, params: FusionParams,
                       label: str | None = None) -> Tensor:
    """Tokens query the fused object rows; output stays token-aligned."""
    attended = multi_head(x1, v_fused, v_fused, params.text_object,
                          label=label)
    return T.layer_norm(T.add(x1, attended), params.f_gamma, params.f_beta)


def fuse_stream(tokens: Tensor, objects: Tensor, params: FusionParams,
                label: str | None = None) -> Tensor:
    """Full fusion pipeline for one token sequence against one scene."""
    x1 = textual_branch(tokens, params,
                        label=f"{label}.textual" if label else None)
    v_fused = visual_branch(objects, x1, params, label=label)
    return text_object_fusion(x1, v_fused, params,
                              label=f"{label}.text_object" if label else None)


def fuse_streams_stacked(tokens: Tensor, objects: Tensor,
                         params: FusionParams,
                         label: str | None = None) -> Tensor:
    """Fusion over a (B, n, d) stack of equal-length token sequences against
    one shared scene. Slice b of the result equals :func:`fuse_stream` on
    sequence b; stacking only batches the arithmetic.
    """
    if tokens.ndim != 3:
        raise ShapeError(f"stacked fusion needs (B, n, d) tokens, "
                         f"got {tokens.shape}")
    if tokens.shape[-2] == 0:
        raise InputError("stacked fusion got empty token sequences")
    if objects.shape[-1] != params.d_model or tokens.shape[-1] != params.d_model:
        raise ShapeError(f"stacked fusion widths {objects.shape}/"
                         f"{tokens.shape} do not match d_model="
                         f"{params.d_model}")
    attended = multi_head(tokens, tokens, tokens, params.textual,
                          label=f"{label}.textual" if label else None)
    x1 = T.layer_norm(T.add(tokens, attended), params.t_gamma, params.t_beta)
    if _SKIP_POSITION:
        q_ve = T.layer_norm(objects, params.obj_gamma, params.obj_beta)
    else:
        q_ve = add_position(objects, params.pe_table, params.obj_gamma,
                            params.obj_beta)
    # (n_obj, d) against (B, d, n_tok): the scene broadcasts over streams
    scores = T.scale(T.matmul(q_ve, T.transpose(x1)),
                     1.0 / math.sqrt(params.d_model))
    x2 = T.softmax(scores, axis=-1)
    _record(f"{label}.obj_text" if label else "fusion.obj_text", x2)
    x3 = T.matmul(x2, x1)
    f = T.concat([T.tile_leading(q_ve, tokens.shape[0]), x3], axis=-1)
    fused = multi_head(f, f, f, params.visual,
                       label=f"{label}.visual" if label else None)
    attended = multi_head(x1, fused, fused, params.text_object,
                          label=f"{label}.text_object" if label else None)
    return T.layer_norm(T.add(x1, attended), params.f_gamma, params.f_beta)


def fuse_example(query_tokens: Tensor, response_tokens: list[Tensor],
                 objects: Tensor, params: FusionParams,
                 label: str | None = None) -> FusionOutputs:
    """Fuse the query and each response candidate with shared parameters."""
    q_o = fuse_stream(query_tokens, objects, params,
                      label=f"{label}.q" if label else None)
    r_o = [fuse_stream(r, objects, params,
                       label=f"{label}.r{i}" if label else None)
           for i, r in enumerate(response_tokens)]
    return FusionOutputs(q_o=q_o, r_o=r_o)
