"""Analytic parameter and FLOP counts for an NBED configuration.

Both counters walk the architecture from the config alone, without building
a network, so they double as an independent check on :func:`build_model`.
FLOPs are counted as 2 x multiply-accumulates for convolutions, channel
projections and attention products; norms, activations, pooling and
interpolation are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import SELF_ATTENTION, ConfigError, ModelConfig
from .model import MIN_SIDE, STRIDE, fusion_schedule


def conv_params(c_in: int, c_out: int, k: int = 1, groups: int = 1, bias: bool = True) -> int:
    if c_out == 0 or c_in == 0:
        return 0
    return k * k * (c_in // groups) * c_out + (c_out if bias else 0)


def conv_flops(c_in: int, c_out: int, k: int, h_out: int, w_out: int, groups: int = 1) -> int:
    return 2 * k * k * (c_in // groups) * c_out * h_out * w_out


def attention_flops(tokens: int, dim: int) -> int:
    """Q/K/V/output projections plus the two N x N products."""
    return 2 * (tokens * tokens * dim * 2 + tokens * dim * dim * 4)


def _norm_params(c: int) -> int:
    return 2 * c


def _meta_block_params(dim: int, operator: str, cfg: ModelConfig) -> int:
    n = 2 * _norm_params(dim)
    if operator == SELF_ATTENTION:
        n += (dim * 3 * dim + 3 * dim) + (dim * dim + dim)
    else:
        hidden = dim * cfg.sepconv_expansion_ratio
        n += conv_params(dim, hidden) + conv_params(hidden, hidden, cfg.sepconv_kernel_size, groups=hidden)
        n += conv_params(hidden, dim)
    hidden = dim * cfg.mlp_expansion_ratio
    return n + conv_params(dim, hidden) + conv_params(hidden, dim)


def location_params(cfg: ModelConfig) -> int:
    c1, c2 = cfg.location_channels
    return conv_params(cfg.input_channels, c1, 3) + conv_params(c1, c2, 3)


def semantic_params(cfg: ModelConfig) -> int:
    total = 0
    prev = cfg.input_channels
    for i, (dim, depth, op) in enumerate(zip(cfg.semantic_stage_channels, cfg.semantic_stage_blocks,
                                             cfg.semantic_stage_operator)):
        if i == 0:
            total += conv_params(prev, dim, 7) + _norm_params(dim)
        else:
            total += _norm_params(prev) + conv_params(prev, dim, 3)
        total += depth * _meta_block_params(dim, op, cfg)
        prev = dim
    return total


def decoder_params(cfg: ModelConfig) -> int:
    levels = cfg.pyramid_channels
    n = len(levels)
    c = cfg.decoder_base_channels
    if c == 0:
        return 0
    dec = [c * 2 ** i for i in range(n - 1)]
    if cfg.decoder == "hed":
        return sum(conv_params(ch, 1) for ch in levels) + conv_params(n, 1)
    if cfg.decoder == "unet":
        total, prev = 0, levels[-1]
        for i in range(n - 2, -1, -1):
            total += conv_params(prev + levels[i], dec[i], 3)
            prev = dec[i]
        return total + conv_params(prev, 1)
    width = {(i, 0): ch for i, ch in enumerate(levels, start=1)}
    total = 0
    for i, j in fusion_schedule(n):
        d = dec[i - 1]
        total += conv_params(width[i + 1, j - 1], d) + conv_params(width[i, j - 1] + d, d, 3)
        width[i, j] = d
    heads = 1 + (n - 2 if cfg.deep_supervision else 0)
    return total + heads * conv_params(dec[0], 1)


def count_parameters(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars in the network described by ``cfg``."""
    return location_params(cfg) + semantic_params(cfg) + decoder_params(cfg)


@dataclass
class FlopReport:
    location: int = 0
    semantic: int = 0
    decoder: int = 0
    padded_size: tuple[int, int] = (0, 0)
    stages: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.location + self.semantic + self.decoder

    @property
    def macs(self) -> int:
        return self.total // 2


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def flop_report(cfg: ModelConfig, height: int, width: int) -> FlopReport:
    if height < MIN_SIDE or width < MIN_SIDE:
        raise ConfigError(f"height and width must be >= {MIN_SIDE}")
    h = _ceil_div(height, STRIDE) * STRIDE
    w = _ceil_div(width, STRIDE) * STRIDE
    rep = FlopReport(padded_size=(h, w))
    c1, c2 = cfg.location_channels
    rep.location = conv_flops(cfg.input_channels, c1, 3, h, w) + conv_flops(c1, c2, 3, h // 2, w // 2)

    sizes = [(h, w), (h // 2, w // 2), (h // 4, w // 4), (h // 8, w // 8), (h // 16, w // 16)]
    prev = cfg.input_channels
    for i, (dim, depth, op) in enumerate(zip(cfg.semantic_stage_channels, cfg.semantic_stage_blocks,
                                             cfg.semantic_stage_operator)):
        sh, sw = sizes[i + 2]
        n = sh * sw
        stage = conv_flops(prev, dim, 7 if i == 0 else 3, sh, sw)
        if op == SELF_ATTENTION:
            block = attention_flops(n, dim)
        else:
            hidden = dim * cfg.sepconv_expansion_ratio
            block = (conv_flops(dim, hidden, 1, sh, sw)
                     + conv_flops(hidden, hidden, cfg.sepconv_kernel_size, sh, sw, groups=hidden)
                     + conv_flops(hidden, dim, 1, sh, sw))
        hidden = dim * cfg.mlp_expansion_ratio
        block += conv_flops(dim, hidden, 1, sh, sw) + conv_flops(hidden, dim, 1, sh, sw)
        stage += depth * block
        rep.stages.append(stage)
        prev = dim
    rep.semantic = sum(rep.stages)

    levels = cfg.pyramid_channels
    nlev = len(levels)
    c = cfg.decoder_base_channels
    if c:
        dec = [c * 2 ** i for i in range(nlev - 1)]
        if cfg.decoder == "hed":
            rep.decoder = sum(conv_flops(ch, 1, 1, *sizes[k]) for k, ch in enumerate(levels))
            rep.decoder += conv_flops(nlev, 1, 1, h, w)
        elif cfg.decoder == "unet":
            prev = levels[-1]
            for i in range(nlev - 2, -1, -1):
                rep.decoder += conv_flops(prev + levels[i], dec[i], 3, *sizes[i])
                prev = dec[i]
            rep.decoder += conv_flops(prev, 1, 1, h, w)
        else:
            width_ = {(i, 0): ch for i, ch in enumerate(levels, start=1)}
            for i, j in fusion_schedule(nlev):
                d = dec[i - 1]
                hi, wi = sizes[i - 1]
                rep.decoder += conv_flops(width_[i + 1, j - 1], d, 1, hi, wi)
                rep.decoder += conv_flops(width_[i, j - 1] + d, d, 3, hi, wi)
                width_[i, j] = d
            heads = 1 + (nlev - 2 if cfg.deep_supervision else 0)
            rep.decoder += heads * conv_flops(dec[0], 1, 1, h, w)
    return rep


def estimate_flops(cfg: ModelConfig, height: int, width: int) -> int:
    """Analytic FLOPs (2 x MACs) of one forward pass at the padded input size."""
    return flop_report(cfg, height, width).total
