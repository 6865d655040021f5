"""R3D-18 backbone: a 3x7x7 stem and four residual stages of two basic blocks.

No batch normalisation: training runs on one sequence at a time. Channel
counts are the standard ``[64, 64, 128, 256, 512]`` multiplied by a width
scale so the same topology fits on a desk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    TensorError,
    add,
    channel_affine,
    conv3d,
    conv3d_output_shape,
    global_avg_pool3d,
    he_normal,
    leaky_relu,
)

BASE_CHANNELS = (64, 64, 128, 256, 512)
STEM_KERNEL = (3, 7, 7)
STEM_STRIDE = (1, 2, 2)
STEM_PADDING = (1, 3, 3)
BLOCK_KERNEL = (3, 3, 3)
BLOCK_PADDING = (1, 1, 1)
BLOCKS_PER_STAGE = 2
STAGE_STRIDES = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2))


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    width_scale: float = 1.0
    input_hw: tuple[int, int] = (112, 112)
    min_t: int = 8
    activation_slope: float = 0.0
    affine: bool = False
    zero_init_residual: bool = False

    def __post_init__(self):
        if not (0.0 < self.width_scale <= 1.0):
            raise BackboneError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        if self.in_channels < 1:
            raise BackboneError(f"in_channels must be >= 1, got {self.in_channels}")
        if tuple(self.input_hw) != (112, 112):
            raise BackboneError(f"input_hw is fixed at 112x112, got {self.input_hw}")
        if self.min_t < 1:
            raise BackboneError(f"min_t must be >= 1, got {self.min_t}")
        object.__setattr__(self, "input_hw", tuple(self.input_hw))

    @property
    def channels(self) -> list[int]:
        return [max(1, int(round(c * self.width_scale))) for c in BASE_CHANNELS]

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


@dataclass
class ConvUnit:
    weight: Parameter
    bias: Optional[Parameter]
    stride: tuple[int, int, int]
    padding: tuple[int, int, int]
    gamma: Optional[Parameter] = None
    beta: Optional[Parameter] = None

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.weight, self.bias, self.gamma, self.beta) if p is not None]

    def __call__(self, x: Tensor) -> Tensor:
        y = conv3d(
            x, self.weight.value, self.stride, self.padding, None if self.bias is None else self.bias.value
        )
        if self.gamma is not None:
            y = channel_affine(y, self.gamma.value, self.beta.value)
        return y


@dataclass
class BasicBlock:
    conv1: ConvUnit
    conv2: ConvUnit
    shortcut: Optional[ConvUnit]

    def parameters(self) -> list[Parameter]:
        out = self.conv1.parameters() + self.conv2.parameters()
        if self.shortcut is not None:
            out += self.shortcut.parameters()
        return out


@dataclass
class BackboneModel:
    config: BackboneConfig
    stem: ConvUnit
    stages: list[list[BasicBlock]] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        out = self.stem.parameters()
        for stage in self.stages:
            for block in stage:
                out += block.parameters()
        return out

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim


def _conv_unit(rng, name, c_in, c_out, kernel, stride, padding, *, bias=True, affine=False, zero=False):
    fan_in = c_in * int(np.prod(kernel))
    w = np.zeros((c_out, c_in) + kernel) if zero else he_normal(rng, (c_out, c_in) + kernel, fan_in)
    unit = ConvUnit(
        Parameter.from_array(f"{name}.weight", w),
        Parameter.from_array(f"{name}.bias", np.zeros(c_out)) if bias else None,
        tuple(stride),
        tuple(padding),
    )
    if affine:
        unit.gamma = Parameter.from_array(f"{name}.gamma", np.ones(c_out))
        unit.beta = Parameter.from_array(f"{name}.beta", np.zeros(c_out))
    return unit


def build_backbone(config: BackboneConfig, seed=0) -> BackboneModel:
    """Initialise every weight from ``seed``; parameter names are stable."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ch = config.channels
    stem = _conv_unit(
        rng, "backbone.stem", config.in_channels, ch[0], STEM_KERNEL, STEM_STRIDE, STEM_PADDING,
        affine=config.affine,
    )
    model = BackboneModel(config, stem)
    c_in = ch[0]
    for k, stride in enumerate(STAGE_STRIDES, start=1):
        c_out = ch[k]
        stage = []
        for b in range(1, BLOCKS_PER_STAGE + 1):
            s = stride if b == 1 else (1, 1, 1)
            prefix = f"backbone.stage{k}.block{b}"
            conv1 = _conv_unit(rng, f"{prefix}.conv1", c_in, c_out, BLOCK_KERNEL, s, BLOCK_PADDING,
                               affine=config.affine)
            conv2 = _conv_unit(rng, f"{prefix}.conv2", c_out, c_out, BLOCK_KERNEL, (1, 1, 1), BLOCK_PADDING,
                               affine=config.affine, zero=config.zero_init_residual)
            shortcut = None
            if s != (1, 1, 1) or c_in != c_out:
                shortcut = _conv_unit(rng, f"{prefix}.shortcut", c_in, c_out, (1, 1, 1), s, (0, 0, 0),
                                      bias=False)
            stage.append(BasicBlock(conv1, conv2, shortcut))
            c_in = c_out
        model.stages.append(stage)
    return model


def block_forward(block: BasicBlock, x: Tensor, slope: float) -> Tensor:
    y = leaky_relu(block.conv1(x), slope)
    y = block.conv2(y)
    skip = x if block.shortcut is None else block.shortcut(x)
    return leaky_relu(add(y, skip), slope)


def _check_input(config: BackboneConfig, seq: Tensor) -> None:
    if seq.ndim != 4:
        raise BackboneError(f"expected a C x T x H x W sequence, got shape {seq.shape}")
    c, t, h, w = seq.shape
    if c != config.in_channels:
        raise BackboneError(f"sequence has {c} channels, backbone expects {config.in_channels}")
    if t < config.min_t:
        raise BackboneError(f"sequence too short: T={t} < min_t={config.min_t}")
    if (h, w) != config.input_hw:
        raise BackboneError(f"frames must be {config.input_hw[0]}x{config.input_hw[1]}, got {h}x{w}")


def backbone_stages(model: BackboneModel, seq: Tensor) -> list[Tensor]:
    """Feature maps after the stem and after each of the four stages."""
    _check_input(model.config, seq)
    slope = model.config.activation_slope
    x = leaky_relu(model.stem(seq), slope)
    maps = [x]
    for stage in model.stages:
        for block in stage:
            x = block_forward(block, x, slope)
        maps.append(x)
    return maps


def backbone_forward(model: BackboneModel, seq: Tensor) -> Tensor:
    return global_avg_pool3d(backbone_stages(model, seq)[-1])


@dataclass(frozen=True)
class StageShape:
    name: str
    shape: Optional[tuple[int, int, int, int]]
    error: Optional[str] = None


def shape_plan(config: BackboneConfig, t: int) -> list[StageShape]:
    """Output (C, T, H, W) of the stem and each stage, without allocating tensors."""
    if t < 1:
        raise BackboneError(f"t must be >= 1, got {t}")
    ch = config.channels
    plan: list[StageShape] = []
    thw: Optional[tuple[int, ...]] = (t,) + tuple(config.input_hw)
    names = ["conv_1"] + [f"res_block_{k}" for k in range(1, 5)]
    for idx, name in enumerate(names):
        if thw is None:
            plan.append(StageShape(name, None, "upstream stage infeasible"))
            continue
        try:
            if idx == 0:
                thw = conv3d_output_shape(thw, STEM_KERNEL, STEM_STRIDE, STEM_PADDING)
            else:
                for b in range(BLOCKS_PER_STAGE):
                    s = STAGE_STRIDES[idx - 1] if b == 0 else (1, 1, 1)
                    thw = conv3d_output_shape(thw, BLOCK_KERNEL, s, BLOCK_PADDING)
            plan.append(StageShape(name, (ch[idx],) + tuple(thw)))
        except TensorError as exc:
            thw = None
            plan.append(StageShape(name, None, str(exc)))
    return plan
