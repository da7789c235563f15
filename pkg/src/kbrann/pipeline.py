"""Inference, evaluation and heatmap export on saved checkpoints."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Sample, load_dataset, read_ppm, write_pgm
from .evaluation import EvalConfig, EvalReport, evaluate_detections
from .head import Detection, detections_from_head, detections_to_json
from .model import Detector, preprocess
from .tensor import Tensor


def detect(model: Detector, images: np.ndarray, conf_thresh: float, iou_thresh: float = 0.4,
           batch_size: int = 8) -> list[list[Detection]]:
    """Detections for (n, H, W, 3) images, in image order."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    out = []
    for start in range(0, len(images), batch_size):
        raw = model.forward(preprocess(images[start:start + batch_size]))
        out.extend(detections_from_head(raw.data, model.grid, model.num_classes, conf_thresh, iou_thresh))
    return out


def _check_image(model: Detector, image: np.ndarray, path) -> None:
    if image.shape[:2] != (model.image_size, model.image_size):
        raise ValueError(f"{path}: image is {image.shape[1]}x{image.shape[0]}, model expects "
                         f"{model.image_size}x{model.image_size}")


def infer(model_path, image_path, conf_thresh: float, out_path, iou_thresh: float = 0.4) -> list[Detection]:
    model = Detector.load(model_path)
    image = read_ppm(image_path)
    _check_image(model, image, image_path)
    dets = detect(model, image, conf_thresh, iou_thresh)[0]
    Path(out_path).write_text(detections_to_json(dets))
    return dets


def evaluate_model(model: Detector, samples: Sequence[Sample], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    if not samples:
        raise ValueError("evaluation set is empty")
    for s in samples:
        _check_image(model, s.image, s.stem)
    dets = detect(model, np.stack([s.image for s in samples]), cfg.conf_thresh, cfg.nms_iou)
    return evaluate_detections(dets, [s.boxes for s in samples], cfg)


def evaluate(model_path, data_dir, cfg: EvalConfig = EvalConfig(), out_path=None) -> EvalReport:
    samples = load_dataset(data_dir)
    if not samples:
        raise ValueError(f"no images found in {data_dir}")
    report = evaluate_model(Detector.load(model_path), samples, cfg)
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


def heatmaps(model: Detector, image: np.ndarray) -> dict[str, np.ndarray]:
    """Prior maps at feature resolution and the attention map of each cascade step."""
    if model.priors is None and model.rann is None:
        raise ValueError("model has neither prior maps nor attention maps")
    maps: dict[str, np.ndarray] = {}
    g = model.grid
    if model.priors is not None:
        rendered = model.priors.render(g.gh, g.gw).data[0]
        for k, m in enumerate(rendered):
            maps[f"prior_{k:02d}"] = m
    if model.rann is not None:
        attention: list[Tensor] = []
        model.features(preprocess(image), attention)
        for t, a in enumerate(attention, start=1):
            maps[f"attention_t{t}"] = a.data[0, 0]
    return maps


def export_heatmaps(model_path, image_path, out_dir, which: str = "all") -> list[Path]:
    """Write prior and/or attention maps as 8-bit PGMs (min-max scaled per map)."""
    model = Detector.load(model_path)
    if which == "priors" and model.priors is None:
        raise ValueError(f"{model.variant} checkpoint has no prior maps")
    if which == "attention" and model.rann is None:
        raise ValueError(f"{model.variant} checkpoint has no attention maps")
    image = read_ppm(image_path)
    _check_image(model, image, image_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in heatmaps(model, image).items():
        if which != "all" and not name.startswith(which[:5]):
            continue
        path = out / f"{name}.pgm"
        write_pgm(path, m)
        written.append(path)
    return written
