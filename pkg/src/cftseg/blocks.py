"""Category-attention fusion blocks and their ablation variants.

Each block fuses a coarse, semantically strong map `f_high` into the
finer map `x_low` one pyramid level below it. The full block compresses
f_high into one embedding vector per category (a spatial softmax over
mask logits, used as mixing weights over projected features) and lets
every x_low pixel cross-attend to those few category tokens. The
variants swap the key/value source: raw f_high pixels, pooled pixels,
or the pre-norm self/cross wirings used for the structure ablation.

All attention paths share one parameter set; the residual output
projection and the FFN projection start at zero, so a freshly
initialized block is the identity on x_low.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .functional import (adaptive_avg_pool, bilinear_resize, conv1x1,
                         depthwise_conv3x3, layer_norm, linear, softmax)
from .tensor import Tensor, bmm, concat, gelu, narrow, reshape, transpose

VARIANTS = ("cft", "naive", "avgpool", "a", "b", "c")


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class DepthwiseParams:
    w: Tensor
    b: Tensor


@dataclass
class CategoryEmbedding:
    """One vector per category: a B x L x C matrix plus its source stage."""
    matrix: Tensor
    stage: int = 0


@dataclass
class MaskLogits:
    """Raw per-category spatial logits (pre-softmax), kept for the mask loss."""
    logits: Tensor
    stage: int = 0


def _uniform_linear(rng, out_dim: int, in_dim: int,
                    gain: float = 1.0) -> LinearParams:
    bound = gain / math.sqrt(in_dim)
    return LinearParams(Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)),
                               requires_grad=True),
                        Tensor(np.zeros(out_dim), requires_grad=True))


def _zero_linear(out_dim: int, in_dim: int) -> LinearParams:
    return LinearParams(Tensor(np.zeros((out_dim, in_dim)), requires_grad=True),
                        Tensor(np.zeros(out_dim), requires_grad=True))


def _norm(ch: int) -> NormParams:
    return NormParams(Tensor(np.ones(ch), requires_grad=True),
                      Tensor(np.zeros(ch), requires_grad=True))


@dataclass
class CftBlockParams:
    """Everything one fusion block owns.

    `phi_mask` / `phi_feat` exist only on the category variant; the
    other wirings project raw or pooled pixels instead.
    """

    channels: int
    heads: int
    phi_mask: LinearParams | None
    phi_feat: LinearParams | None
    w_q: LinearParams
    w_k: LinearParams
    w_v: LinearParams
    w_o: LinearParams
    ffn_expand: LinearParams
    ffn_dw: DepthwiseParams
    ffn_project: LinearParams
    norm_embed: NormParams
    norm_query: NormParams
    norm_ffn: NormParams

    @classmethod
    def create(cls, channels: int, num_categories: int, heads: int,
               ffn_ratio: int, rng, with_category: bool = True,
               zero_residual_paths: bool = True) -> "CftBlockParams":
        """Build freshly initialized parameters.

        With `zero_residual_paths` the output projection and the FFN
        projection start at zero, making the whole block an identity;
        gradient-checking code turns this off so every rule is live.
        """
        if channels % heads:
            raise ConfigError(f"channels ({channels}) must divide evenly into "
                              f"{heads} heads")
        hidden = ffn_ratio * channels
        if with_category:
            phi_mask = _uniform_linear(rng, num_categories, channels)
            phi_feat = _uniform_linear(rng, channels, channels)
        else:
            phi_mask = phi_feat = None
        w_q = _uniform_linear(rng, channels, channels)
        w_k = _uniform_linear(rng, channels, channels)
        w_v = _uniform_linear(rng, channels, channels)
        w_o = (_zero_linear(channels, channels) if zero_residual_paths
               else _uniform_linear(rng, channels, channels))
        ffn_expand = _uniform_linear(rng, hidden, channels)
        dw_bound = 1.0 / 3.0
        ffn_dw = DepthwiseParams(Tensor(rng.uniform(-dw_bound, dw_bound, (hidden, 3, 3)),
                                        requires_grad=True),
                                 Tensor(np.zeros(hidden), requires_grad=True))
        ffn_project = (_zero_linear(channels, hidden) if zero_residual_paths
                       else _uniform_linear(rng, channels, hidden))
        return cls(channels, heads, phi_mask, phi_feat, w_q, w_k, w_v, w_o,
                   ffn_expand, ffn_dw, ffn_project,
                   _norm(channels), _norm(channels), _norm(channels))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        pairs = [("phi_mask", self.phi_mask), ("phi_feat", self.phi_feat),
                 ("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v),
                 ("w_o", self.w_o), ("ffn_expand", self.ffn_expand),
                 ("ffn_project", self.ffn_project)]
        for name, lin in pairs:
            if lin is None:
                continue
            out[f"{prefix}.{name}.w"] = lin.w
            out[f"{prefix}.{name}.b"] = lin.b
        out[f"{prefix}.ffn_dw.w"] = self.ffn_dw.w
        out[f"{prefix}.ffn_dw.b"] = self.ffn_dw.b
        for name, nrm in (("norm_embed", self.norm_embed),
                          ("norm_query", self.norm_query),
                          ("norm_ffn", self.norm_ffn)):
            out[f"{prefix}.{name}.gamma"] = nrm.gamma
            out[f"{prefix}.{name}.beta"] = nrm.beta
        return out


# ---------------------------------------------------------------------------
# layout helpers


def _to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) map -> (B, N, C) token matrix, row-major positions."""
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


def _to_map(t: Tensor, h: int, w: int) -> Tensor:
    b, n, c = t.shape
    return reshape(transpose(t, (0, 2, 1)), (b, c, h, w))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """(B, N, C) -> (B*heads, N, C/heads), contiguous channel slices per head."""
    b, n, c = t.shape
    dh = c // heads
    return reshape(transpose(reshape(t, (b, n, heads, dh)), (0, 2, 1, 3)),
                   (b * heads, n, dh))


def _merge_heads(t: Tensor, batch: int, heads: int) -> Tensor:
    _, n, dh = t.shape
    return reshape(transpose(reshape(t, (batch, heads, n, dh)), (0, 2, 1, 3)),
                   (batch, n, heads * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, w_o: LinearParams, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over (B, N, C) token sets."""
    b, nq, c = q.shape
    if c % heads:
        raise ConfigError(f"token width {c} must divide into {heads} heads")
    if k.shape != v.shape or k.shape[0] != b or k.shape[2] != c:
        raise ShapeError(f"attention operands disagree: q {q.shape}, k {k.shape}, "
                         f"v {v.shape}")
    dh = c // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = bmm(qh, transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=2)
    ctx = _merge_heads(bmm(weights, vh), b, heads)
    return linear(ctx, w_o.w, w_o.b)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         params: CftBlockParams) -> Tensor:
    """Single-sample attention on already projected (N, C) matrices.

    Splits channels into `params.heads` contiguous slices, attends per
    head with 1/sqrt(head_dim) scaling, concatenates, and applies the
    output projection.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("multi_head_attention expects 2-d token matrices")
    out = _attend(reshape(q, (1, *q.shape)), reshape(k, (1, *k.shape)),
                  reshape(v, (1, *v.shape)), params.w_o, params.heads)
    return reshape(out, q.shape)


# ---------------------------------------------------------------------------
# the category path


def category_feature_embedding(f_high: Tensor, params: CftBlockParams,
                               stage: int = 0) -> tuple[CategoryEmbedding, MaskLogits]:
    """Compress a feature map into one embedding vector per category.

    The normalized map is projected twice: a mask head scores every
    position per category and a feature head re-mixes channels. A
    softmax over positions turns each category's scores into weights
    that average the projected features, so each embedding row is a
    convex combination of projected-feature columns.
    """
    if params.phi_mask is None or params.phi_feat is None:
        raise ConfigError("this parameter set was built without category heads")
    b, c, h, w = f_high.shape
    if c != params.channels:
        raise ShapeError(f"expected {params.channels} channels, got {c}")
    normed = layer_norm(f_high, params.norm_embed.gamma, params.norm_embed.beta, axis=1)
    mask_logits = conv1x1(normed, params.phi_mask.w, params.phi_mask.b)
    feats = conv1x1(normed, params.phi_feat.w, params.phi_feat.b)
    n = h * w
    num_cat = params.phi_mask.w.shape[0]
    weights = softmax(reshape(mask_logits, (b, num_cat, n)), axis=2)
    tokens = transpose(reshape(feats, (b, c, n)), (0, 2, 1))
    embedding = bmm(weights, tokens)
    return CategoryEmbedding(embedding, stage), MaskLogits(mask_logits, stage)


def _ffn(tokens: Tensor, h: int, w: int, params: CftBlockParams) -> Tensor:
    """Pre-norm feed-forward: expand, depthwise 3x3 on the spatial map, gelu, project."""
    normed = layer_norm(tokens, params.norm_ffn.gamma, params.norm_ffn.beta, axis=2)
    hidden = linear(normed, params.ffn_expand.w, params.ffn_expand.b)
    spatial = _to_map(hidden, h, w)
    spatial = gelu(depthwise_conv3x3(spatial, params.ffn_dw.w, params.ffn_dw.b))
    return linear(_to_tokens(spatial), params.ffn_project.w, params.ffn_project.b)


def category_feature_transformation(x_low: Tensor,
                                    embedding: CategoryEmbedding | Tensor,
                                    params: CftBlockParams) -> Tensor:
    """Let every x_low pixel cross-attend to the category embeddings.

    Queries come from the normalized pixels, keys and values from the
    embedding rows; both residual additions use the raw (unnormalized)
    stream, so zeroed projections leave x_low untouched.
    """
    emb = embedding.matrix if isinstance(embedding, CategoryEmbedding) else embedding
    b, c, h, w = x_low.shape
    if emb.ndim != 3 or emb.shape[0] != b or emb.shape[2] != c:
        raise ShapeError(f"embedding {emb.shape} does not match features {x_low.shape}")
    tokens = _to_tokens(x_low)
    queries = linear(layer_norm(tokens, params.norm_query.gamma,
                                params.norm_query.beta, axis=2),
                     params.w_q.w, params.w_q.b)
    keys = linear(emb, params.w_k.w, params.w_k.b)
    values = linear(emb, params.w_v.w, params.w_v.b)
    attended = _attend(queries, keys, values, params.w_o, params.heads) + tokens
    out = _ffn(attended, h, w, params) + attended
    return _to_map(out, h, w)


def cft_block(f_high: Tensor, x_low: Tensor, params: CftBlockParams,
              stage: int = 0) -> tuple[Tensor, MaskLogits]:
    """Full fusion block: embed f_high per category, transform x_low with it."""
    embedding, masks = category_feature_embedding(f_high, params, stage)
    return category_feature_transformation(x_low, embedding, params), masks


# ---------------------------------------------------------------------------
# ablation variants
#
# All of them reuse the same attention/FFN machinery; only the token
# sources differ. Pooled key/value paths default their target size to
# f_high's own grid when the caller does not pass the pyramid-top size.


def _kv_tokens(source_map: Tensor, params: CftBlockParams) -> tuple[Tensor, Tensor]:
    normed = layer_norm(source_map, params.norm_embed.gamma,
                        params.norm_embed.beta, axis=1)
    tokens = _to_tokens(normed)
    return (linear(tokens, params.w_k.w, params.w_k.b),
            linear(tokens, params.w_v.w, params.w_v.b))


def _query_tokens(source_tokens: Tensor, params: CftBlockParams) -> Tensor:
    return linear(layer_norm(source_tokens, params.norm_query.gamma,
                             params.norm_query.beta, axis=2),
                  params.w_q.w, params.w_q.b)


def variant_naive(f_high: Tensor, x_low: Tensor, params: CftBlockParams) -> Tensor:
    """Cross-attention with every f_high pixel as a key/value token."""
    b, c, h, w = x_low.shape
    tokens = _to_tokens(x_low)
    keys, values = _kv_tokens(f_high, params)
    attended = _attend(_query_tokens(tokens, params), keys, values,
                       params.w_o, params.heads) + tokens
    out = _ffn(attended, h, w, params) + attended
    return _to_map(out, h, w)


def variant_avgpool(f_high: Tensor, x_low: Tensor, params: CftBlockParams,
                    kv_pool_hw: tuple[int, int] | None = None) -> Tensor:
    """Like naive, but key/value pixels are adaptively pooled first."""
    ph, pw = kv_pool_hw if kv_pool_hw is not None else f_high.shape[2:]
    return variant_naive(adaptive_avg_pool(f_high, ph, pw), x_low, params)


def variant_a(f_high: Tensor, x_low: Tensor, params: CftBlockParams,
              kv_pool_hw: tuple[int, int] | None = None) -> Tensor:
    """Upsample-and-add first, then self-attention with pooled keys/values."""
    b, c, h, w = x_low.shape
    ph, pw = kv_pool_hw if kv_pool_hw is not None else f_high.shape[2:]
    summed = bilinear_resize(f_high, h, w) + x_low
    tokens = _to_tokens(summed)
    keys, values = _kv_tokens(adaptive_avg_pool(summed, ph, pw), params)
    attended = _attend(_query_tokens(tokens, params), keys, values,
                       params.w_o, params.heads) + tokens
    out = _ffn(attended, h, w, params) + attended
    return _to_map(out, h, w)


def variant_b(f_high: Tensor, x_low: Tensor, params: CftBlockParams,
              kv_pool_hw: tuple[int, int] | None = None) -> Tensor:
    """Upsampled f_high queries attend to pooled x_low keys/values."""
    b, c, h, w = x_low.shape
    ph, pw = kv_pool_hw if kv_pool_hw is not None else f_high.shape[2:]
    up = bilinear_resize(f_high, h, w)
    tokens = _to_tokens(up)
    keys, values = _kv_tokens(adaptive_avg_pool(x_low, ph, pw), params)
    attended = _attend(_query_tokens(tokens, params), keys, values,
                       params.w_o, params.heads) + tokens
    out = _ffn(attended, h, w, params) + attended
    return _to_map(out, h, w)


def variant_c(f_high: Tensor, x_low: Tensor, params: CftBlockParams,
              kv_pool_hw: tuple[int, int] | None = None) -> Tensor:
    """Variant b with the upsampling moved after attention.

    Attention runs at f_high's resolution; its output is upsampled and
    added to x_low, then the usual FFN residual follows.
    """
    b, c, h, w = x_low.shape
    hs, ws = f_high.shape[2:]
    ph, pw = kv_pool_hw if kv_pool_hw is not None else (hs, ws)
    tokens = _to_tokens(f_high)
    keys, values = _kv_tokens(adaptive_avg_pool(x_low, ph, pw), params)
    attended = _attend(_query_tokens(tokens, params), keys, values,
                       params.w_o, params.heads)
    merged = bilinear_resize(_to_map(attended, hs, ws), h, w) + x_low
    merged_tokens = _to_tokens(merged)
    out = _ffn(merged_tokens, h, w, params) + merged_tokens
    return _to_map(out, h, w)


def apply_variant(variant: str, f_high: Tensor, x_low: Tensor,
                  params: CftBlockParams, stage: int = 0,
                  kv_pool_hw: tuple[int, int] | None = None
                  ) -> tuple[Tensor, MaskLogits | None]:
    """Dispatch one fusion step; only the category variant yields masks."""
    if variant == "cft":
        out, masks = cft_block(f_high, x_low, params, stage)
        return out, masks
    if variant == "naive":
        return variant_naive(f_high, x_low, params), None
    if variant == "avgpool":
        return variant_avgpool(f_high, x_low, params, kv_pool_hw), None
    if variant == "a":
        return variant_a(f_high, x_low, params, kv_pool_hw), None
    if variant == "b":
        return variant_b(f_high, x_low, params, kv_pool_hw), None
    if variant == "c":
        return variant_c(f_high, x_low, params, kv_pool_hw), None
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
