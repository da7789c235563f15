"""Pipeline configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .head import DEFAULT_ANCHOR_SHAPES, LossWeights

VARIANTS = ("kb-rann", "rann", "kb-rcnn")
OPTIMIZERS = ("sgd", "adam")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "kb-rann"
    backbone: str = "paper-mini"
    image_size: int = 128
    num_classes: int = 3
    # recurrent attention
    cascade_depth: int = 2
    tied: bool = True
    # knowledge priors
    prior_count: int = 16
    sigma_min: float = 0.02
    prior_ring_radius: float = 0.3
    prior_sigma: float = 0.15
    prior_injection: str = "post"
    # head and loss
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHOR_SHAPES
    lambda_bbox: float = 5.0
    lambda_conf_pos: float = 75.0
    lambda_conf_neg: float = 100.0
    nms_iou: float = 0.4
    # optimization
    optimizer: str = "adam"
    learning_rate: float = 0.003
    momentum: float = 0.9
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    grad_clip: float = 5.0
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.prior_injection not in ("pre", "post"):
            raise ConfigError("prior_injection must be 'pre' or 'post'")
        if not 1 <= self.cascade_depth <= 4:
            raise ConfigError("cascade_depth must be in 1..4")
        if self.prior_count < 1 or self.num_classes < 1:
            raise ConfigError("prior_count and num_classes must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate and grad_clip must be positive")
        try:
            LossWeights(self.lambda_bbox, self.lambda_conf_pos, self.lambda_conf_neg)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def use_rann(self) -> bool:
        return self.variant in ("kb-rann", "rann")

    @property
    def use_priors(self) -> bool:
        return self.variant in ("kb-rann", "kb-rcnn")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_bbox, self.lambda_conf_pos, self.lambda_conf_neg)

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_anchors(s: str) -> tuple[tuple[float, float], ...]:
    """``0.04x0.04, 0.08x0.08`` -> ((0.04, 0.04), (0.08, 0.08))"""
    out = []
    for item in s.split(","):
        w, h = item.strip().lower().split("x")
        out.append((float(w), float(h)))
    return tuple(out)


def format_anchors(anchors) -> str:
    return ", ".join(f"{w:g}x{h:g}" for w, h in anchors)


_PARSERS = {"int": int, "float": float, "str": str, "bool": _parse_bool}


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    types = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        try:
            if key == "anchors":
                values[key] = _parse_anchors(value)
            else:
                values[key] = _PARSERS[types[key]](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{n}: bad value for {key}: {e}") from e
    return PipelineConfig(**values)


def load_config(path: str | Path) -> PipelineConfig:
    return parse_config(Path(path).read_text(), str(path))


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if f.name == "anchors":
            v = format_anchors(v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
