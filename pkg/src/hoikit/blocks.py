"""Single-head attention, FFN and post-LN transformer blocks shared by the
image encoder, the instance/interaction decoders and the token decoder."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as tt
from .tensor import Tensor


@dataclass(frozen=True)
class AttnParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass(frozen=True)
class LayerNormParams:
    gain: Tensor
    shift: Tensor


@dataclass(frozen=True)
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass(frozen=True)
class EncoderBlockParams:
    attn: AttnParams
    ln1: LayerNormParams
    ffn: FfnParams
    ln2: LayerNormParams


@dataclass(frozen=True)
class DecoderBlockParams:
    self_attn: AttnParams
    ln1: LayerNormParams
    cross_attn: AttnParams
    ln2: LayerNormParams
    ffn: FfnParams
    ln3: LayerNormParams
    cross_bias: Tensor | None = None   # learnable query-to-position prior


def attend(queries: Tensor, memory: Tensor, p: AttnParams,
           q_pos=None, k_pos=None, score_bias=None) -> Tensor:
    """Scaled dot-product attention of query rows over memory rows."""
    return tt.single_head_attention(queries, memory, p.wq, p.bq, p.wk, p.bk,
                                    p.wv, p.bv, p.wo, p.bo, q_pos, k_pos,
                                    score_bias)


def ln(x: Tensor, p: LayerNormParams) -> Tensor:
    return tt.layer_norm(x, p.gain, p.shift)


def res_ln(x: Tensor, sub: Tensor, p: LayerNormParams) -> Tensor:
    return tt.add_layer_norm(x, sub, p.gain, p.shift)


def ffn(x: Tensor, p: FfnParams) -> Tensor:
    return tt.mlp_relu(x, p.w1, p.b1, p.w2, p.b2)


def encoder_block(x: Tensor, p: EncoderBlockParams, pos=None) -> Tensor:
    x = res_ln(x, attend(x, x, p.attn, q_pos=pos, k_pos=pos), p.ln1)
    return res_ln(x, ffn(x, p.ffn), p.ln2)


def decoder_block(x: Tensor, memory: Tensor, p: DecoderBlockParams,
                  q_pos=None, mem_pos=None) -> Tensor:
    x = res_ln(x, attend(x, x, p.self_attn, q_pos=q_pos, k_pos=q_pos), p.ln1)
    x = res_ln(x, attend(x, memory, p.cross_attn, q_pos=q_pos, k_pos=mem_pos,
                         score_bias=p.cross_bias), p.ln2)
    return res_ln(x, ffn(x, p.ffn), p.ln3)
