"""Action-aware query initialization.

The global image embedding is broadcast into query seeds, refined against the
embedded interaction prompts through a stack of cross-attention layers written
in their literal form (attention, then FFN over the layer-normed residual sum,
with no second residual), and projected to the detector's channel width. The
resulting action-aware rows enhance the interaction stream's queries and
outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as tt
from .blocks import FfnParams, LayerNormParams, ffn
from .errors import ValidationError
from .tensor import Tensor


@dataclass(frozen=True)
class TextLayerParams:
    """One cross-modal refinement layer; the attention maps carry no biases."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    ln: LayerNormParams
    ffn: FfnParams


@dataclass(frozen=True)
class ActionQueryParams:
    layers: tuple          # TextLayerParams per refinement layer
    out_w: Tensor          # text_dim -> channels bridge
    out_b: Tensor


@dataclass(frozen=True)
class ActionQueryTrace:
    attn_maps: tuple       # one n_queries x n_prompts matrix per layer
    queries: Tensor        # n_queries x channels


def seed_queries(image_embedding: Tensor, n_queries: int) -> Tensor:
    """Broadcast the 1 x d embedding into n identical query rows."""
    if n_queries < 1:
        raise ValidationError(f"n_queries must be >= 1, got {n_queries}")
    return tt.repeat_rows(image_embedding, n_queries)


def text_attention_layer(queries: Tensor, text_bank: Tensor,
                         layer: TextLayerParams):
    """One refinement step; returns (next queries, attention over prompts)."""
    d = queries.shape[1]
    logits = tt.matmul(tt.matmul(queries, layer.wq),
                       tt.transpose(tt.matmul(text_bank, layer.wk)))
    attn = tt.softmax_rows(logits * (1.0 / math.sqrt(d)))
    mixed = tt.matmul(attn, tt.matmul(text_bank, layer.wv))
    normed = tt.add_layer_norm(queries, mixed, layer.ln.gain, layer.ln.shift)
    return ffn(normed, layer.ffn), attn


def build_action_queries(image_embedding: Tensor, text_bank: Tensor,
                         params: ActionQueryParams, n_queries: int) -> ActionQueryTrace:
    """Seed, refine through every layer, and bridge to channel width."""
    q = seed_queries(image_embedding, n_queries)
    maps = []
    for layer in params.layers:
        q, attn = text_attention_layer(q, text_bank, layer)
        maps.append(attn)
    out = tt.linear_apply(q, params.out_w, params.out_b)
    return ActionQueryTrace(tuple(maps), out)


def enhance_action(q_a: Tensor, v_a: Tensor, action_queries: Tensor,
                   gamma1: float, gamma2: float):
    """Residual enhancement of the interaction queries and outputs."""
    return (tt.residual_enhance(q_a, action_queries, gamma1),
            tt.residual_enhance(v_a, action_queries, gamma2))
