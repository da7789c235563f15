"""SqueezeNet+ style feature extractor: 3x3 stem, max pools, fire modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ConvKernel, ShapeError, Tensor, concat, conv2d, max_pool2d, relu


@dataclass(frozen=True)
class FireConfig:
    squeeze_1x1: int
    expand_1x1: int
    expand_3x3: int

    def __post_init__(self):
        if min(self.squeeze_1x1, self.expand_1x1, self.expand_3x3) < 1:
            raise ValueError(f"fire channel counts must be >= 1: {self}")

    @property
    def out_channels(self) -> int:
        return self.expand_1x1 + self.expand_3x3


@dataclass(frozen=True)
class BackboneConfig:
    """Stage 0 is the stem; stage k >= 1 is fire module k-1.

    A 2x2 max pool follows every stage listed in ``pool_after``.
    """

    stem_channels: int
    fire_stack: tuple[FireConfig, ...]
    pool_after: frozenset[int] = field(default_factory=frozenset)
    in_channels: int = 3

    def __post_init__(self):
        if not self.fire_stack:
            raise ValueError("backbone needs at least one fire module")
        bad = [s for s in self.pool_after if not 0 <= s <= len(self.fire_stack)]
        if bad:
            raise ValueError(f"pool_after references missing stages {bad}")

    @property
    def out_channels(self) -> int:
        return self.fire_stack[-1].out_channels

    @property
    def downsample(self) -> int:
        return 2 ** len(self.pool_after)


PRESETS: dict[str, BackboneConfig] = {
    # desk-trainable reconstruction; 64 output channels
    "paper-mini": BackboneConfig(
        stem_channels=16,
        fire_stack=(
            FireConfig(4, 8, 8),
            FireConfig(8, 16, 16),
            FireConfig(8, 16, 16),
            FireConfig(8, 32, 32),
        ),
        pool_after=frozenset({0, 1, 2}),
    ),
    # SqueezeNet v1.1 widths plus two appended fire modules; 512 output channels
    "paper-512": BackboneConfig(
        stem_channels=64,
        fire_stack=(
            FireConfig(16, 64, 64),
            FireConfig(16, 64, 64),
            FireConfig(32, 128, 128),
            FireConfig(32, 128, 128),
            FireConfig(48, 192, 192),
            FireConfig(48, 192, 192),
            FireConfig(64, 256, 256),
            FireConfig(64, 256, 256),
            FireConfig(96, 256, 256),
            FireConfig(96, 256, 256),
        ),
        pool_after=frozenset({0, 2, 4}),
    ),
}


@dataclass
class FireParams:
    squeeze: ConvKernel
    expand1: ConvKernel
    expand3: ConvKernel

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for part in ("squeeze", "expand1", "expand3"):
            k = getattr(self, part)
            out[f"{prefix}.{part}.weight"] = k.weight
            out[f"{prefix}.{part}.bias"] = k.bias
        return out


@dataclass
class BackboneParams:
    stem: list[ConvKernel]
    fires: list[FireParams]

    def named(self, prefix: str = "backbone") -> dict[str, Tensor]:
        out = {}
        for i, k in enumerate(self.stem):
            out[f"{prefix}.stem{i}.weight"] = k.weight
            out[f"{prefix}.stem{i}.bias"] = k.bias
        for i, f in enumerate(self.fires):
            out.update(f.named(f"{prefix}.fire{i}"))
        return out


def init_fire(rng: np.random.Generator, in_ch: int, cfg: FireConfig) -> FireParams:
    return FireParams(
        squeeze=ConvKernel.he_normal(rng, cfg.squeeze_1x1, in_ch, 1),
        expand1=ConvKernel.he_normal(rng, cfg.expand_1x1, cfg.squeeze_1x1, 1),
        expand3=ConvKernel.he_normal(rng, cfg.expand_3x3, cfg.squeeze_1x1, 3),
    )


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    stem = [
        ConvKernel.he_normal(rng, cfg.stem_channels, cfg.in_channels, 3),
        ConvKernel.he_normal(rng, cfg.stem_channels, cfg.stem_channels, 3),
    ]
    fires, ch = [], cfg.stem_channels
    for fc in cfg.fire_stack:
        fires.append(init_fire(rng, ch, fc))
        ch = fc.out_channels
    return BackboneParams(stem, fires)


def backbone_from_named(named: dict[str, Tensor], pool_after: frozenset[int],
                        prefix: str = "backbone") -> tuple[BackboneConfig, BackboneParams]:
    """Rebuild config and params from a checkpoint tensor table."""

    def kernel(name):
        return ConvKernel(named[f"{name}.weight"], named[f"{name}.bias"])

    stem = [kernel(f"{prefix}.stem0"), kernel(f"{prefix}.stem1")]
    fires, fire_cfgs = [], []
    i = 0
    while f"{prefix}.fire{i}.squeeze.weight" in named:
        fp = FireParams(*(kernel(f"{prefix}.fire{i}.{p}") for p in ("squeeze", "expand1", "expand3")))
        fires.append(fp)
        fire_cfgs.append(FireConfig(fp.squeeze.out_channels, fp.expand1.out_channels,
                                    fp.expand3.out_channels))
        i += 1
    cfg = BackboneConfig(stem[0].out_channels, tuple(fire_cfgs), frozenset(pool_after),
                         in_channels=stem[0].in_channels)
    return cfg, BackboneParams(stem, fires)


def fire_forward(x: Tensor, cfg: FireConfig, params: FireParams) -> Tensor:
    if x.shape.c != params.squeeze.in_channels:
        raise ShapeError(f"fire: input has {x.shape.c} channels, squeeze expects "
                         f"{params.squeeze.in_channels}")
    if (params.squeeze.out_channels, params.expand1.out_channels, params.expand3.out_channels) != \
            (cfg.squeeze_1x1, cfg.expand_1x1, cfg.expand_3x3):
        raise ShapeError(f"fire params do not match {cfg}")
    s = relu(conv2d(x, params.squeeze))
    e1 = relu(conv2d(s, params.expand1))
    e3 = relu(conv2d(s, params.expand3, padding=1))
    return concat([e1, e3])


def backbone_forward(image: Tensor, cfg: BackboneConfig, params: BackboneParams) -> Tensor:
    if image.shape.c != cfg.in_channels:
        raise ShapeError(f"backbone expects {cfg.in_channels} input channels, got {image.shape.c}")
    f = cfg.downsample
    if image.shape.h % f or image.shape.w % f:
        raise ShapeError(f"input {image.shape.h}x{image.shape.w} not divisible by pooling factor {f}")
    x = image
    for k in params.stem:
        x = relu(conv2d(x, k, padding=1))
    if 0 in cfg.pool_after:
        x = max_pool2d(x)
    for stage, (fc, fp) in enumerate(zip(cfg.fire_stack, params.fires), start=1):
        x = fire_forward(x, fc, fp)
        if stage in cfg.pool_after:
            x = max_pool2d(x)
    return x
