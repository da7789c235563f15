"""Detector assembly: backbone -> [priors] -> [RANN] -> [priors] -> 1x1 head.

Which blocks are present depends on the variant:

    kb-rann   backbone, RANN, priors
    rann      backbone, RANN
    kb-rcnn   backbone, priors (features bypass the RANN)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .backbone import PRESETS, BackboneConfig, BackboneParams, backbone_forward, backbone_from_named, init_backbone
from .config import PipelineConfig
from .head import AnchorGrid, head_forward
from .prior import PriorBank, inject_priors
from .rann import RannConfig, RannParams, init_rann, rann_forward, rann_from_named
from .tensor import ConvKernel, Tensor

HEAD_CONF_BIAS = -2.0
INPUT_SCALE = 0.25


@dataclass
class Detector:
    num_classes: int
    image_size: int
    backbone_cfg: BackboneConfig
    backbone: BackboneParams
    head: ConvKernel
    anchors: tuple[tuple[float, float], ...]
    rann_cfg: RannConfig | None = None
    rann: RannParams | None = None
    priors: PriorBank | None = None
    prior_injection: str = "post"

    @property
    def variant(self) -> str:
        if self.rann is not None:
            return "kb-rann" if self.priors is not None else "rann"
        return "kb-rcnn" if self.priors is not None else "backbone-only"

    @property
    def grid(self) -> AnchorGrid:
        g = self.image_size // self.backbone_cfg.downsample
        return AnchorGrid(g, g, self.anchors)

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.backbone.named("backbone")
        if self.rann is not None:
            out.update(self.rann.named("rann"))
        if self.priors is not None:
            out.update(self.priors.named("prior"))
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def features(self, images: Tensor, attention_maps: list[Tensor] | None = None) -> Tensor:
        f = backbone_forward(images, self.backbone_cfg, self.backbone)
        if self.priors is not None and self.prior_injection == "pre":
            f = inject_priors(f, self.priors)
        if self.rann is not None:
            f = rann_forward(f, self.rann_cfg, self.rann, attention_maps)
        if self.priors is not None and self.prior_injection == "post":
            f = inject_priors(f, self.priors)
        return f

    def forward(self, images: Tensor, attention_maps: list[Tensor] | None = None) -> Tensor:
        """Raw head output (n, K*(5+C), gh, gw) for preprocessed images."""
        return head_forward(self.features(images, attention_maps), self.head, self.grid, self.num_classes)

    # ----------------------------------------------------------------------
    # serialization

    def state(self) -> dict[str, np.ndarray]:
        meta = {
            "meta.num_classes": [self.num_classes],
            "meta.image_size": [self.image_size],
            "meta.pool_after": sorted(self.backbone_cfg.pool_after),
            "meta.anchors": np.array(self.anchors).reshape(-1, 2),
            "meta.prior_pre_rann": [float(self.prior_injection == "pre")],
        }
        if self.rann_cfg is not None:
            meta["meta.cascade_depth"] = [self.rann_cfg.cascade_depth]
            meta["meta.tied"] = [float(self.rann_cfg.tied)]
        if self.priors is not None:
            meta["meta.sigma_min"] = [self.priors.sigma_min]
        out = {k: np.asarray(v, dtype=np.float64) for k, v in meta.items()}
        out.update({k: t.data for k, t in self.named_parameters().items()})
        return out

    def save(self, path) -> None:
        checkpoint.save(path, self.state())

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "Detector":
        named = {k: Tensor(v, requires_grad=True) for k, v in state.items() if not k.startswith("meta.")}

        def meta_int(key):
            return int(round(float(state[key][0])))

        pool_after = frozenset(int(round(float(v))) for v in state["meta.pool_after"].reshape(-1))
        bb_cfg, bb = backbone_from_named(named, pool_after)
        anchors = tuple((float(w), float(h)) for w, h in state["meta.anchors"].reshape(-1, 2))
        rann_cfg = rann = priors = None
        if "meta.cascade_depth" in state:
            rann = rann_from_named(named)
            rann_cfg = RannConfig(meta_int("meta.cascade_depth"), rann.steps[0][0].channels,
                                  tied=bool(meta_int("meta.tied")))
        if "meta.sigma_min" in state:
            priors = PriorBank.from_named(named, float(state["meta.sigma_min"][0]))
        return cls(
            num_classes=meta_int("meta.num_classes"),
            image_size=meta_int("meta.image_size"),
            backbone_cfg=bb_cfg,
            backbone=bb,
            head=ConvKernel(named["head.weight"], named["head.bias"]),
            anchors=anchors,
            rann_cfg=rann_cfg,
            rann=rann,
            priors=priors,
            prior_injection="pre" if meta_int("meta.prior_pre_rann") else "post",
        )

    @classmethod
    def load(cls, path) -> "Detector":
        return cls.from_state(checkpoint.load(path))


def build_detector(cfg: PipelineConfig, rng: np.random.Generator | None = None) -> Detector:
    if cfg.backbone not in PRESETS:
        raise ValueError(f"unknown backbone preset {cfg.backbone!r}; choose from {sorted(PRESETS)}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    bb_cfg = PRESETS[cfg.backbone]
    if cfg.image_size % bb_cfg.downsample:
        raise ValueError(f"image_size {cfg.image_size} not divisible by {bb_cfg.downsample}")
    bb = init_backbone(bb_cfg, rng)
    ch = bb_cfg.out_channels

    priors = None
    if cfg.use_priors:
        priors = PriorBank.ring(cfg.prior_count, cfg.prior_ring_radius, cfg.prior_sigma, cfg.sigma_min)

    rann_cfg = rann = None
    if cfg.use_rann:
        rann_ch = ch + cfg.prior_count if (priors is not None and cfg.prior_injection == "pre") else ch
        rann_cfg = RannConfig(cfg.cascade_depth, rann_ch, tied=cfg.tied)
        rann = init_rann(rann_cfg, rng)
        ch = rann_ch
    if priors is not None and cfg.prior_injection == "post":
        ch += cfg.prior_count
    elif priors is not None and not cfg.use_rann:
        ch += cfg.prior_count

    k = len(cfg.anchors)
    f = 5 + cfg.num_classes
    head = ConvKernel.uniform(rng, k * f, ch, 1)
    bias = head.bias.data.reshape(k, f)
    bias[:, 4] = HEAD_CONF_BIAS
    return Detector(cfg.num_classes, cfg.image_size, bb_cfg, bb, head, tuple(cfg.anchors),
                    rann_cfg, rann, priors, cfg.prior_injection)


def preprocess(images: np.ndarray) -> Tensor:
    """(n, H, W, 3) or (H, W, 3) images in [0, 1] -> (n, 3, H, W), centered and scaled."""
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    return Tensor((a.transpose(0, 3, 1, 2) - 0.5) / INPUT_SCALE)
