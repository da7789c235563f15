"""Learnable reverse-Gaussian prior maps appended to the feature channels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, apply_op, concat, repeat_batch

SIGMA_MIN = 0.02


class ParameterError(ValueError):
    pass


def _scalar(v: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(v)), requires_grad=True)


@dataclass
class GaussianPriorParams:
    """Mean and spread in normalized grid coordinates; each a (1,1,1,1) tensor."""

    mu_x: Tensor
    mu_y: Tensor
    sigma_x: Tensor
    sigma_y: Tensor

    @classmethod
    def create(cls, mu_x: float, mu_y: float, sigma_x: float, sigma_y: float) -> "GaussianPriorParams":
        return cls(_scalar(mu_x), _scalar(mu_y), _scalar(sigma_x), _scalar(sigma_y))

    def tensors(self) -> list[Tensor]:
        return [self.mu_x, self.mu_y, self.sigma_x, self.sigma_y]

    def values(self) -> tuple[float, float, float, float]:
        return tuple(t.item() for t in self.tensors())

    def clamp(self, sigma_min: float = SIGMA_MIN) -> None:
        for t in (self.mu_x, self.mu_y):
            np.clip(t.data, 0.0, 1.0, out=t.data)
        for t in (self.sigma_x, self.sigma_y):
            np.maximum(t.data, sigma_min, out=t.data)


def cell_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) coordinates of cell centers, each shaped (h, w)."""
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    return np.broadcast_to(xs[None, :], (h, w)), np.broadcast_to(ys[:, None], (h, w))


def gaussian_map(p: GaussianPriorParams, h: int, w: int, sigma_min: float = SIGMA_MIN) -> Tensor:
    """Axis-aligned 2-D Gaussian on cell centers, divided by its peak 1/(2 pi sx sy).

    Returns a (1,1,h,w) map whose supremum is 1.
    """
    if h < 1 or w < 1:
        raise ParameterError(f"grid must be at least 1x1, got {h}x{w}")
    mx, my, sx, sy = p.values()
    if sx < sigma_min or sy < sigma_min:
        raise ParameterError(f"sigma ({sx}, {sy}) below minimum {sigma_min}")
    x, y = cell_centers(h, w)
    dx, dy = x - mx, y - my
    f = np.exp(-(dx * dx / (2 * sx * sx) + dy * dy / (2 * sy * sy)))
    out = f.reshape(1, 1, h, w)

    def grad_fn(g):
        gf = g.reshape(h, w) * f
        return [
            np.full((1, 1, 1, 1), (gf * dx).sum() / (sx * sx)),
            np.full((1, 1, 1, 1), (gf * dy).sum() / (sy * sy)),
            np.full((1, 1, 1, 1), (gf * dx * dx).sum() / sx ** 3),
            np.full((1, 1, 1, 1), (gf * dy * dy).sum() / sy ** 3),
        ]

    return apply_op("gaussian_map", p.tensors(), out, grad_fn)


def reverse_gaussian_map(p: GaussianPriorParams, h: int, w: int,
                         sigma_min: float = SIGMA_MIN) -> Tensor:
    f = gaussian_map(p, h, w, sigma_min)
    return apply_op("one_minus", [f], 1.0 - f.data, lambda g: [-g])


@dataclass
class PriorBank:
    priors: list[GaussianPriorParams]
    sigma_min: float = SIGMA_MIN

    def __post_init__(self):
        if not self.priors:
            raise ParameterError("prior bank needs at least one prior")

    def __len__(self) -> int:
        return len(self.priors)

    @classmethod
    def ring(cls, n: int = 16, radius: float = 0.3, sigma: float = 0.15,
             sigma_min: float = SIGMA_MIN) -> "PriorBank":
        """Means evenly spaced on a circle around the image center."""
        angles = 2 * np.pi * np.arange(n) / n
        priors = [GaussianPriorParams.create(0.5 + radius * np.cos(a), 0.5 + radius * np.sin(a),
                                             sigma, sigma) for a in angles]
        return cls(priors, sigma_min)

    def clamp(self) -> None:
        for p in self.priors:
            p.clamp(self.sigma_min)

    def named(self, prefix: str = "prior") -> dict[str, Tensor]:
        out = {}
        for k, p in enumerate(self.priors):
            for field, t in zip(("mu_x", "mu_y", "sigma_x", "sigma_y"), p.tensors()):
                out[f"{prefix}.{k:02d}.{field}"] = t
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], sigma_min: float = SIGMA_MIN,
                   prefix: str = "prior") -> "PriorBank":
        priors = []
        k = 0
        while f"{prefix}.{k:02d}.mu_x" in named:
            priors.append(GaussianPriorParams(*(named[f"{prefix}.{k:02d}.{f}"]
                                                for f in ("mu_x", "mu_y", "sigma_x", "sigma_y"))))
            k += 1
        return cls(priors, sigma_min)

    def render(self, h: int, w: int) -> Tensor:
        """All reverse maps stacked as a (1, N, h, w) tensor."""
        return concat([reverse_gaussian_map(p, h, w, self.sigma_min) for p in self.priors])


def inject_priors(features: Tensor, bank: PriorBank) -> Tensor:
    """Append the N rendered reverse maps after the feature channels."""
    n, _, h, w = features.shape
    maps = bank.render(h, w)
    if n > 1:
        maps = repeat_batch(maps, n)
    return concat([features, maps])
