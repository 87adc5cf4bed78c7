"""Configuration dataclasses for the network, loss, trainer and evaluator."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

SEPARABLE_CONV = "separable-conv"
SELF_ATTENTION = "self-attention"
OPERATOR_KINDS = (SEPARABLE_CONV, SELF_ATTENTION)
DECODER_KINDS = ("cascaded", "hed", "unet")


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape an operation expects."""


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    location_channels: tuple[int, int] = (16, 32)
    semantic_stage_blocks: tuple[int, int, int] = (3, 12, 18)
    semantic_stage_channels: tuple[int, int, int] = (96, 192, 384)
    semantic_stage_operator: tuple[str, str, str] = (SEPARABLE_CONV, SEPARABLE_CONV, SELF_ATTENTION)
    decoder_base_channels: int = 32
    decoder: str = "cascaded"
    mlp_expansion_ratio: int = 4
    sepconv_expansion_ratio: int = 2
    sepconv_kernel_size: int = 7
    attention_head_dim: int = 32
    norm_epsilon: float = 1e-6
    deep_supervision: bool = False
    seed: int = 0

    def __post_init__(self):
        # accept lists (e.g. from JSON) but store tuples so the config stays hashable
        for name in ("location_channels", "semantic_stage_blocks",
                     "semantic_stage_channels", "semantic_stage_operator"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def pyramid_channels(self) -> tuple[int, ...]:
        return tuple(self.location_channels) + tuple(self.semantic_stage_channels)

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        """Channel width D_i of decoder level i (levels 1..4); level 5 is only a source."""
        c = self.decoder_base_channels
        return tuple(c * 2 ** i for i in range(len(self.pyramid_channels) - 1))

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        if len(self.location_channels) != 2:
            raise ConfigError("location_channels must have 2 entries")
        if self.location_channels[1] != 2 * self.location_channels[0]:
            raise ConfigError(
                "location_channels[1] must equal 2 * location_channels[0] "
                f"(got {self.location_channels})")
        for name in ("semantic_stage_blocks", "semantic_stage_channels", "semantic_stage_operator"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"{name} must have 3 entries")
        if any(b < 0 for b in self.semantic_stage_blocks):
            raise ConfigError("semantic_stage_blocks must be >= 0")
        if any(c < 0 for c in self.pyramid_channels):
            raise ConfigError("encoder channel counts must be >= 0")
        for op in self.semantic_stage_operator:
            if op not in OPERATOR_KINDS:
                raise ConfigError(f"unknown operator kind {op!r}; expected one of {OPERATOR_KINDS}")
        if self.attention_head_dim < 1:
            raise ConfigError("attention_head_dim must be a positive integer")
        for ch, op in zip(self.semantic_stage_channels, self.semantic_stage_operator):
            if op == SELF_ATTENTION and ch % self.attention_head_dim:
                raise ConfigError(
                    f"stage channels {ch} not divisible by attention_head_dim "
                    f"{self.attention_head_dim} at a self-attention stage")
        if self.decoder_base_channels < 0:
            raise ConfigError("decoder_base_channels must be >= 0")
        if self.decoder not in DECODER_KINDS:
            raise ConfigError(f"unknown decoder {self.decoder!r}; expected one of {DECODER_KINDS}")
        if self.mlp_expansion_ratio < 1 or self.sepconv_expansion_ratio < 1:
            raise ConfigError("expansion ratios must be positive integers")
        if self.sepconv_kernel_size < 1 or self.sepconv_kernel_size % 2 == 0:
            raise ConfigError("sepconv_kernel_size must be a positive odd integer")
        if not self.norm_epsilon > 0:
            raise ConfigError("norm_epsilon must be positive")

    def validate_buildable(self) -> None:
        """Widths of zero are only meaningful for analytic profiling, not for a real network."""
        self.validate()
        if any(c < 1 for c in self.pyramid_channels) or self.decoder_base_channels < 1:
            raise ConfigError("all channel counts must be >= 1 to build a network")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def tiny_config(**changes) -> ModelConfig:
    """Default architecture with every width divided by 8 and blocks 1/2/2."""
    base = dict(
        location_channels=(2, 4),
        semantic_stage_blocks=(1, 2, 2),
        semantic_stage_channels=(12, 24, 48),
        decoder_base_channels=4,
        attention_head_dim=8,
    )
    base.update(changes)
    return ModelConfig(**base)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.1
    eta: float = 0.3
    reduction: str = "sum"
    rcf_convention: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError("loss.lam must be > 0")
        if not 0 <= self.eta < 1:
            raise ConfigError("loss.eta must lie in [0, 1)")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("loss.reduction must be 'sum' or 'mean'")


@dataclass(frozen=True)
class TrainConfig:
    lr_pretrained: float = 1e-5
    lr_rest: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 4
    max_iterations: int = 1000
    seed: int = 0
    log_every: int = 1
    grad_clip: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if not (self.lr_pretrained > 0 and self.lr_rest > 0):
            raise ConfigError("learning rates must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    tolerance_fraction: float = 0.0075
    thresholds: int = 99
    use_nms: bool = True

    def __post_init__(self):
        if not 0 < self.tolerance_fraction < 0.1:
            raise ConfigError("eval.tolerance_fraction must lie in (0, 0.1)")
        if self.thresholds < 1:
            raise ConfigError("eval.thresholds must be >= 1")

    def threshold_values(self):
        """Threshold grid t_k = k / (thresholds + 1), k = 1..thresholds."""
        n = self.thresholds
        return [k / (n + 1) for k in range(1, n + 1)]
