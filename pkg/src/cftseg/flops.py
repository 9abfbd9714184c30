"""Analytic multiply-add and parameter accounting per pipeline module.

One fused multiply-add counts as one FLOP. Only matmul-shaped work is
counted: 1x1 and depthwise convolutions, linear projections, attention
score/aggregation products. Pooling, resizing, normalization, softmax, and
activations count zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .model import NUM_STAGES, ModelConfig, SegModel
from .blocks import VARIANTS


def matmul_flops(m: int, k: int, n: int) -> int:
    return m * k * n


def conv1x1_flops(batch: int, c_in: int, h: int, w: int, c_out: int) -> int:
    return batch * h * w * c_in * c_out


def depthwise3x3_flops(batch: int, channels: int, h: int, w: int) -> int:
    return batch * h * w * channels * 9


def attention_flops(n_q: int, n_k: int, channels: int) -> int:
    """Score products plus value aggregation; head count cancels."""
    return 2 * n_q * n_k * channels


@dataclass(frozen=True)
class FlopsReport:
    variant: str
    input_hw: tuple[int, int]
    batch: int
    flops: dict[str, int] = field(default_factory=dict)
    params: dict[str, int] = field(default_factory=dict)

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def aggregation_flops(self) -> int:
        return sum(v for k, v in self.flops.items() if k.startswith("aggregate."))

    def as_dict(self) -> dict:
        return {"variant": self.variant,
                "input_hw": list(self.input_hw),
                "batch": self.batch,
                "flops": dict(self.flops),
                "params": dict(self.params),
                "total_flops": self.total_flops,
                "total_params": self.total_params,
                "aggregation_flops": self.aggregation_flops}


def _stage_hw(input_hw: tuple[int, int]) -> list[tuple[int, int]]:
    h, w = input_hw
    if h % 32 or w % 32 or h <= 0 or w <= 0:
        raise ConfigError(f"input {h}x{w} must be a positive multiple of 32")
    return [(h >> (k + 2), w >> (k + 2)) for k in range(NUM_STAGES)]


def _block_flops(variant: str, n_lo: int, n_hi: int, n_kv: int,
                 c: int, l: int, ratio: int) -> int:
    ch = c * ratio
    ffn = n_lo * c * ch + n_lo * ch * 9 + n_lo * ch * c
    out_proj = n_lo * c * c
    if variant == "cft":
        embed = n_hi * c * l + n_hi * c * c + l * n_hi * c
        kv = 2 * (l * c * c)
        return embed + n_lo * c * c + kv + attention_flops(n_lo, l, c) + out_proj + ffn
    if variant == "naive":
        kv = 2 * (n_hi * c * c)
        return n_lo * c * c + kv + attention_flops(n_lo, n_hi, c) + out_proj + ffn
    if variant in ("avgpool", "a", "b"):
        kv = 2 * (n_kv * c * c)
        return n_lo * c * c + kv + attention_flops(n_lo, n_kv, c) + out_proj + ffn
    if variant == "c":
        # queries, attention, and the output projection run at the coarse grid
        kv = 2 * (n_kv * c * c)
        return n_hi * c * c + kv + attention_flops(n_hi, n_kv, c) + n_hi * c * c + ffn
    if variant == "none":
        return 0
    raise ConfigError(f"unknown variant {variant!r}")


def _block_params(c: int, l: int, ratio: int, with_category: bool) -> int:
    total = 4 * (c * c + c)      # q, k, v, o projections
    total += 3 * 2 * c           # embed/query/ffn norms
    ch = c * ratio
    total += c * ch + ch + 9 * ch + ch + ch * c + c
    if with_category:
        total += l * c + l + c * c + c
    return total


def count_flops(model_or_config, input_hw: tuple[int, int] = (128, 128),
                variant: str | None = None, batch: int = 1) -> FlopsReport:
    """Per-module FLOPs/params for a model or config at the given input."""
    if isinstance(model_or_config, SegModel):
        config = model_or_config.config
        variant = model_or_config.variant if variant is None else variant
    else:
        config = model_or_config
        variant = "cft" if variant is None else variant
    if variant not in VARIANTS + ("none",):
        raise ConfigError(f"unknown variant {variant!r}")
    if batch < 1:
        raise ConfigError("batch must be at least 1")

    sizes = _stage_hw(tuple(input_hw))
    counts = [h * w for h, w in sizes]
    c, l, ratio = config.embed_channels, config.num_categories, config.ffn_ratio
    flops: dict[str, int] = {}
    params: dict[str, int] = {}

    in_chain = (3,) + tuple(config.backbone_channels)
    for k in range(NUM_STAGES):
        h, w = sizes[k]
        c_in, c_out = in_chain[k], in_chain[k + 1]
        flops[f"backbone.s{k + 1}"] = (conv1x1_flops(batch, c_in, h, w, c_out)
                                       + depthwise3x3_flops(batch, c_out, h, w))
        params[f"backbone.s{k + 1}"] = c_in * c_out + c_out + 9 * c_out + c_out
        flops[f"lateral.s{k + 1}"] = conv1x1_flops(batch, c_out, h, w, c)
        params[f"lateral.s{k + 1}"] = c_out * c + c

    n_kv = counts[-1]
    for i in range(NUM_STAGES - 1, 0, -1):
        key = f"aggregate.s{i}"
        if variant == "none":
            flops[key] = 0
            params[key] = 0
            continue
        flops[key] = batch * _block_flops(variant, counts[i - 1], counts[i],
                                          n_kv, c, l, ratio)
        params[key] = _block_params(c, l, ratio, with_category=variant == "cft")

    flops["decode"] = conv1x1_flops(batch, NUM_STAGES * c, *sizes[0], l)
    params["decode"] = NUM_STAGES * c * l + l
    return FlopsReport(variant=variant, input_hw=tuple(input_hw), batch=batch,
                       flops=flops, params=params)
