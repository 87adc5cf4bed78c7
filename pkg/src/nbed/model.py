"""The NBED network: location and semantic encoders, decoders and edge head.

All feature maps are NCHW tensors. The five pyramid levels sit at scales
1, 1/2, 1/4, 1/8 and 1/16 of the (padded) input.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SELF_ATTENTION, SEPARABLE_CONV, ConfigError, ModelConfig, ShapeError

STRIDE = 16
MIN_SIDE = 16


def _check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{what}: expected a 4-D (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{what}: expected {expected} channels, got {x.shape[1]}")


def upsample_to(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class ChannelNorm(nn.Module):
    """Layer normalization over channels, applied independently at every position."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ConvReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2),
            nn.ReLU(),
        )


class LocationEncoder(nn.Module):
    """Two 3x3 conv + ReLU blocks with a 2x2 max-pool in between."""

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (16, 32)):
        super().__init__()
        self.in_channels = in_channels
        self.block1 = ConvReLU(in_channels, channels[0])
        self.pool = nn.MaxPool2d(2, 2)
        self.block2 = ConvReLU(channels[0], channels[1])

    def forward(self, x):
        _check_channels(x, self.in_channels, "location encoder input")
        l1 = self.block1(x)
        l2 = self.block2(self.pool(l1))
        return l1, l2


class SepConv(nn.Module):
    """Inverted separable convolution: pointwise expand, depthwise KxK, pointwise project."""

    def __init__(self, dim: int, expansion: int = 2, kernel_size: int = 7):
        super().__init__()
        hidden = dim * expansion
        self.pw1 = nn.Conv2d(dim, hidden, 1)
        self.act = nn.GELU()
        self.dw = nn.Conv2d(hidden, hidden, kernel_size, padding=kernel_size // 2, groups=hidden)
        self.pw2 = nn.Conv2d(hidden, dim, 1)

    @property
    def out_proj(self):
        return self.pw2

    def forward(self, x):
        return self.pw2(self.dw(self.act(self.pw1(x))))


class SelfAttention(nn.Module):
    """Multi-head self-attention over the flattened spatial grid, no positional embedding."""

    def __init__(self, dim: int, head_dim: int = 32):
        super().__init__()
        if dim % head_dim:
            raise ConfigError(f"channels {dim} not divisible by head dim {head_dim}")
        self.heads = dim // head_dim
        self.head_dim = head_dim
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    @property
    def out_proj(self):
        return self.proj

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # B, N, C
        qkv = self.qkv(tokens).reshape(b, h * w, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each B, heads, N, d
        attn = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        out = attn.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, h * w, c)
        return self.proj(out).transpose(1, 2).reshape(b, c, h, w)


class ChannelMLP(nn.Module):
    def __init__(self, dim: int, ratio: int = 4, act: type[nn.Module] = nn.GELU, out_dim: int | None = None):
        super().__init__()
        self.fc1 = nn.Conv2d(dim, dim * ratio, 1)
        self.act = act()
        self.fc2 = nn.Conv2d(dim * ratio, out_dim or dim, 1)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class MetaBlock(nn.Module):
    """Norm + token operator, then norm + channel MLP, each wrapped in a residual."""

    def __init__(self, dim: int, operator: str, cfg: ModelConfig):
        super().__init__()
        self.dim = dim
        self.operator = operator
        self.norm1 = ChannelNorm(dim, cfg.norm_epsilon)
        if operator == SEPARABLE_CONV:
            self.op = SepConv(dim, cfg.sepconv_expansion_ratio, cfg.sepconv_kernel_size)
        elif operator == SELF_ATTENTION:
            self.op = SelfAttention(dim, cfg.attention_head_dim)
        else:
            raise ConfigError(f"unknown operator kind {operator!r}")
        self.norm2 = ChannelNorm(dim, cfg.norm_epsilon)
        self.mlp = ChannelMLP(dim, cfg.mlp_expansion_ratio)

    def zero_branch_outputs(self) -> None:
        """Zero the last projection of both branches, turning the block into an identity."""
        with torch.no_grad():
            for layer in (self.op.out_proj, self.mlp.fc2):
                layer.weight.zero_()
                layer.bias.zero_()

    def forward(self, x):
        _check_channels(x, self.dim, "meta block input")
        y = x + self.op(self.norm1(x))
        return y + self.mlp(self.norm2(y))


class SemanticStage(nn.Module):
    def __init__(self, downsample: nn.Module, dim: int, depth: int, operator: str, cfg: ModelConfig):
        super().__init__()
        self.downsample = downsample
        self.blocks = nn.Sequential(*[MetaBlock(dim, operator, cfg) for _ in range(depth)])

    def forward(self, x):
        return self.blocks(self.downsample(x))


class Stem(nn.Module):
    """7x7 stride-4 convolution followed by channel norm."""

    def __init__(self, in_channels: int, out_channels: int, eps: float):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 7, stride=4, padding=3)
        self.norm = ChannelNorm(out_channels, eps)

    def forward(self, x):
        return self.norm(self.conv(x))


class Downsample(nn.Module):
    """Channel norm followed by a 3x3 stride-2 convolution."""

    def __init__(self, in_channels: int, out_channels: int, eps: float):
        super().__init__()
        self.norm = ChannelNorm(in_channels, eps)
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(self.norm(x))


class SemanticEncoder(nn.Module):
    """Hybrid CNN / self-attention encoder producing the 1/4, 1/8 and 1/16 features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_channels = cfg.input_channels
        chans = cfg.semantic_stage_channels
        stages = []
        prev = cfg.input_channels
        for i, (dim, depth, op) in enumerate(zip(chans, cfg.semantic_stage_blocks, cfg.semantic_stage_operator)):
            down = Stem(prev, dim, cfg.norm_epsilon) if i == 0 else Downsample(prev, dim, cfg.norm_epsilon)
            stages.append(SemanticStage(down, dim, depth, op, cfg))
            prev = dim
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        _check_channels(x, self.in_channels, "semantic encoder input")
        if x.shape[-2] < MIN_SIDE or x.shape[-1] < MIN_SIDE:
            raise ShapeError(
                f"semantic encoder needs height and width >= {MIN_SIDE}, got {tuple(x.shape[-2:])}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return tuple(feats)


def fusion_schedule(levels: int) -> list[tuple[int, int]]:
    """The (i, j) pairs of the cascaded recurrence, in evaluation order (1-based)."""
    return [(i, j) for j in range(1, levels) for i in range(1, levels - j + 1)]


class CascadedDecoder(nn.Module):
    """Triangular top-down fusion F_i^j = F_i^{j-1} (+) phi(F_{i+1}^{j-1}).

    ``phi`` is a 2x bilinear upsample followed by a 1x1 projection to D_i and
    ``(+)`` is channel concatenation, a 3x3 convolution to D_i and ReLU. The
    result is F_1^{L-1}, with D_1 channels at full resolution.
    """

    def __init__(self, level_channels: Sequence[int], base_channels: int):
        super().__init__()
        self.level_channels = tuple(level_channels)
        levels = len(self.level_channels)
        n_dec = max(levels - 1, 1)
        self.decoder_channels = tuple(base_channels * 2 ** i for i in range(n_dec))
        self.phi = nn.ModuleDict()
        self.fuse = nn.ModuleDict()
        width = {(i, 0): c for i, c in enumerate(self.level_channels, start=1)}
        for i, j in fusion_schedule(levels):
            d = self.decoder_channels[i - 1]
            self.phi[f"{i}_{j}"] = nn.Conv2d(width[i + 1, j - 1], d, 1)
            self.fuse[f"{i}_{j}"] = ConvReLU(width[i, j - 1] + d, d)
            width[i, j] = d
        self.adjust = nn.Conv2d(self.level_channels[0], self.decoder_channels[0], 1) if levels == 1 else None

    @property
    def out_channels(self) -> int:
        return self.decoder_channels[0]

    def forward(self, pyramid: Sequence[torch.Tensor], return_trace: bool = False):
        levels = len(self.level_channels)
        if len(pyramid) != levels:
            raise ShapeError(f"cascaded decoder expects {levels} pyramid levels, got {len(pyramid)}")
        for k, (feat, c) in enumerate(zip(pyramid, self.level_channels), start=1):
            _check_channels(feat, c, f"pyramid level {k}")
        if self.adjust is not None:
            out = self.adjust(pyramid[0])
            return (out, {}) if return_trace else out
        feats = {(i, 0): f for i, f in enumerate(pyramid, start=1)}
        for i, j in fusion_schedule(levels):
            key = f"{i}_{j}"
            low = feats[i + 1, j - 1]
            high = feats[i, j - 1]
            projected = self.phi[key](upsample_to(low, high.shape[-2:]))
            feats[i, j] = self.fuse[key](torch.cat([high, projected], dim=1))
        out = feats[1, levels - 1]
        return (out, feats) if return_trace else out


class EdgeHead(nn.Module):
    """1x1 convolution to a single channel; returns logits."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        return self.conv(x)


class HEDDecoder(nn.Module):
    """Per-level 1x1 side maps, upsampled to full size and fused by a 1x1 conv; returns logits."""

    def __init__(self, level_channels: Sequence[int]):
        super().__init__()
        self.level_channels = tuple(level_channels)
        self.side = nn.ModuleList(nn.Conv2d(c, 1, 1) for c in self.level_channels)
        self.fuse = nn.Conv2d(len(self.level_channels), 1, 1)

    def forward(self, pyramid):
        if len(pyramid) != len(self.level_channels):
            raise ShapeError(f"HED decoder expects {len(self.level_channels)} levels, got {len(pyramid)}")
        size = pyramid[0].shape[-2:]
        sides = []
        for k, (feat, conv, c) in enumerate(zip(pyramid, self.side, self.level_channels), start=1):
            _check_channels(feat, c, f"pyramid level {k}")
            sides.append(upsample_to(conv(feat), size))
        return self.fuse(torch.cat(sides, dim=1))


class UNetDecoder(nn.Module):
    """Single top-down pass: upsample, concatenate with the next shallower level, 3x3 conv."""

    def __init__(self, level_channels: Sequence[int], base_channels: int):
        super().__init__()
        self.level_channels = tuple(level_channels)
        n = len(self.level_channels)
        dec = [base_channels * 2 ** i for i in range(n - 1)]
        self.fuse = nn.ModuleList()
        prev = self.level_channels[-1]
        for i in range(n - 2, -1, -1):
            self.fuse.append(ConvReLU(prev + self.level_channels[i], dec[i]))
            prev = dec[i]
        self.head = nn.Conv2d(prev, 1, 1)

    def forward(self, pyramid):
        if len(pyramid) != len(self.level_channels):
            raise ShapeError(f"UNet decoder expects {len(self.level_channels)} levels, got {len(pyramid)}")
        for k, (feat, c) in enumerate(zip(pyramid, self.level_channels), start=1):
            _check_channels(feat, c, f"pyramid level {k}")
        x = pyramid[-1]
        for conv, skip in zip(self.fuse, reversed(pyramid[:-1])):
            x = conv(torch.cat([upsample_to(x, skip.shape[-2:]), skip], dim=1))
        return self.head(x)


IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x 3 uint8 image -> normalized 1 x 3 x H x W tensor."""
    x = torch.from_numpy(np.array(image, dtype=np.float64)) / 255.0
    mean = torch.tensor(IMAGE_MEAN, dtype=torch.float64)
    std = torch.tensor(IMAGE_STD, dtype=torch.float64)
    x = (x - mean) / std
    return x.permute(2, 0, 1)[None].to(dtype).contiguous()


def pad_to_multiple(x: torch.Tensor, multiple: int = STRIDE) -> torch.Tensor:
    """Reflection-pad bottom and right so both sides are multiples of ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph), mode="reflect")


class NBED(nn.Module):
    """Bilateral encoder, configurable decoder and sigmoid edge head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.location = LocationEncoder(cfg.input_channels, cfg.location_channels)
        self.semantic = SemanticEncoder(cfg)
        levels = cfg.pyramid_channels
        self.head = None
        self.side_heads = None
        if cfg.decoder == "cascaded":
            self.decoder = CascadedDecoder(levels, cfg.decoder_base_channels)
            self.head = EdgeHead(self.decoder.out_channels)
            if cfg.deep_supervision:
                self.side_heads = nn.ModuleList(
                    EdgeHead(self.decoder.out_channels) for _ in range(len(levels) - 2))
        elif cfg.decoder == "hed":
            self.decoder = HEDDecoder(levels)
        else:
            self.decoder = UNetDecoder(levels, cfg.decoder_base_channels)

    def pyramid(self, x):
        l1, l2 = self.location(x)
        return (l1, l2) + tuple(self.semantic(x))

    def logits(self, image, return_side: bool = False):
        """Edge logits for an NCHW batch; pads internally and crops back."""
        if image.dim() != 4:
            raise ShapeError(f"expected a 4-D (B, C, H, W) image batch, got shape {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ShapeError(f"input must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
        x = pad_to_multiple(image)
        pyr = self.pyramid(x)
        sides = []
        if self.head is None:
            out = self.decoder(pyr)
        elif self.side_heads is not None:
            refined, trace = self.decoder(pyr, return_trace=True)
            out = self.head(refined)
            sides = [head(trace[1, j]) for j, head in enumerate(self.side_heads, start=1)]
        else:
            out = self.head(self.decoder(pyr))
        out = out[..., :h, :w]
        if return_side:
            return out, [s[..., :h, :w] for s in sides]
        return out

    def forward(self, image):
        return torch.sigmoid(self.logits(image))


# --------------------------------------------------------------------------
# construction

def _init_weights(model: nn.Module, generator: torch.Generator) -> None:
    with torch.no_grad():
        for name, module in model.named_modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                w = torch.randn(module.weight.shape, generator=generator, dtype=torch.float64)
                module.weight.copy_(w / math.sqrt(fan_in))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, ChannelNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()


def apply_overlay(model: NBED, overlay: Mapping[str, object]) -> None:
    """Copy externally supplied semantic-encoder arrays into ``model`` by name.

    Names may be given relative to the semantic encoder or with the
    ``semantic.`` prefix. Unknown names raise :class:`ConfigError`.
    """
    own = model.semantic.state_dict()
    resolved, unmatched = {}, []
    for name, value in overlay.items():
        key = name[len("semantic."):] if name.startswith("semantic.") else name
        if key not in own:
            unmatched.append(name)
        else:
            resolved[key] = torch.as_tensor(np.asarray(value))
    if unmatched:
        raise ConfigError(f"overlay contains unknown semantic-encoder arrays: {sorted(unmatched)}")
    for key, value in resolved.items():
        if tuple(value.shape) != tuple(own[key].shape):
            raise ShapeError(f"overlay array {key!r} has shape {tuple(value.shape)}, "
                             f"expected {tuple(own[key].shape)}")
    with torch.no_grad():
        params = dict(model.semantic.named_parameters())
        for key, value in resolved.items():
            params[key].copy_(value.to(params[key].dtype))


def build_model(cfg: ModelConfig, overlay: Mapping[str, object] | None = None,
                dtype: torch.dtype = torch.float32) -> NBED:
    """Construct an NBED network with weights drawn deterministically from ``cfg.seed``."""
    cfg.validate_buildable()
    model = NBED(cfg)
    _init_weights(model, torch.Generator().manual_seed(cfg.seed))
    model.to(dtype)
    if overlay:
        apply_overlay(model, overlay)
    return model


def is_pretrained_param(name: str) -> bool:
    """Arrays of the semantic encoder form the low-learning-rate group."""
    return name.startswith("semantic.")


# --------------------------------------------------------------------------
# functional entry points

def location_encoder_forward(model: NBED, image):
    return model.location(image)


def semantic_encoder_forward(model: NBED, image):
    return model.semantic(image)


def meta_block_forward(block: MetaBlock, x):
    return block(x)


def cascaded_decoder_forward(decoder: CascadedDecoder, pyramid):
    return decoder(pyramid)


def edge_head(head: EdgeHead, refined, image_size: Sequence[int] | None = None):
    """Sigmoid edge map from the refined full-resolution features.

    When ``image_size`` is given, a feature map whose spatial size differs
    (i.e. not at scale 1) raises :class:`ShapeError`.
    """
    if image_size is not None and tuple(refined.shape[-2:]) != tuple(image_size):
        raise ShapeError(f"edge head needs scale-1 features of size {tuple(image_size)}, "
                         f"got {tuple(refined.shape[-2:])}")
    return torch.sigmoid(head(refined))


def nbed_forward(model: NBED, image):
    return model(image)


def hed_decoder_forward(decoder: HEDDecoder, pyramid):
    return torch.sigmoid(decoder(pyramid))


def unet_decoder_forward(decoder: UNetDecoder, pyramid):
    return torch.sigmoid(decoder(pyramid))
