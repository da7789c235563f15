"""Minibatch training of the detector on the multi-task detection loss."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .data import Sample, load_dataset
from .head import Assignment, assign_anchors, loss_terms, multitask_loss
from .model import Detector, build_detector, preprocess
from .tensor import NumericError, Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class _Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float, clip: float | None):
        self.params = list(params)
        self.lr = lr
        self.clip = clip

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params if p.grad is not None)))

    def _clip_factor(self, norm: float) -> float:
        return self.clip / norm if self.clip is not None and norm > self.clip else 1.0


class SGD(_Optimizer):
    """Heavy-ball momentum with global gradient-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 clip: float | None = 5.0):
        super().__init__(params, lr, clip)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        norm = self.grad_norm()
        factor = self._clip_factor(norm)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += factor * p.grad
            p.data -= self.lr * v
        return norm


class Adam(_Optimizer):
    """Adam on globally norm-clipped gradients; ``beta1`` doubles as the momentum setting."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip: float | None = 5.0):
        super().__init__(params, lr, clip)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> float:
        norm = self.grad_norm()
        factor = self._clip_factor(norm)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = factor * p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def make_optimizer(params: Sequence[Tensor], cfg: PipelineConfig) -> _Optimizer:
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, beta1=cfg.momentum, clip=cfg.grad_clip)
    return SGD(params, cfg.learning_rate, cfg.momentum, cfg.grad_clip)


@dataclass
class TrainingReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_terms: list[dict[str, float]] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: str | None = None


def train_model(model: Detector, samples: Sequence[Sample], cfg: PipelineConfig,
                callback=None) -> TrainingReport:
    if not samples:
        raise ValueError("training set is empty")
    grid = model.grid
    for s in samples:
        if s.image.shape[:2] != (model.image_size, model.image_size):
            raise ValueError(f"{s.stem}: image is {s.image.shape[:2]}, model expects "
                             f"{model.image_size}x{model.image_size}")
    assignments = [assign_anchors(s.boxes, grid) for s in samples]
    images = np.stack([s.image for s in samples])
    opt = make_optimizer(model.parameters(), cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    report = TrainingReport()
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        opt.lr = cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(len(samples))
        total, terms_sum, batches = 0.0, {}, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            asg = Assignment.stack([assignments[i] for i in idx])
            model.zero_grad()
            try:
                with Tape() as tape:
                    raw = model.forward(preprocess(images[idx]))
                    loss = multitask_loss(raw, asg, model.num_classes, cfg.loss_weights)
                tape.backward(loss)
            except NumericError as e:
                raise TrainingDiverged(f"non-finite value at epoch {epoch + 1}, batch {b + 1}: {e}") from e
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            opt.step()
            if model.priors is not None:
                model.priors.clamp()
            for k, v in loss_terms(raw, asg, model.num_classes, cfg.loss_weights).items():
                terms_sum[k] = terms_sum.get(k, 0.0) + v
            total += value
            batches += 1
        report.epoch_losses.append(total / batches)
        report.epoch_terms.append({k: v / batches for k, v in terms_sum.items()})
        log.info("epoch %d/%d loss %.4f (%s) lr %.4g", epoch + 1, cfg.epochs, total / batches,
                 ", ".join(f"{k} {v / batches:.3f}" for k, v in terms_sum.items()), opt.lr)
        if callback is not None:
            callback(epoch, model, report)
    report.seconds = time.perf_counter() - t0
    return report


def train(cfg: PipelineConfig, data_dir: str | Path, out_path: str | Path | None = None) -> TrainingReport:
    samples = load_dataset(data_dir)
    if not samples:
        raise ValueError(f"no images found in {data_dir}")
    model = build_detector(cfg)
    report = train_model(model, samples, cfg)
    if out_path is not None:
        model.save(out_path)
        report.checkpoint = str(out_path)
    return report
