"""Synthetic small-object scenes, PPM/PGM image I/O and annotation sidecars.

Objects (disc, square, triangle) are placed on a ring around the image center,
never at the center itself, on a smooth textured background.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .head import GroundTruthBox

CLASS_NAMES = ("disc", "square", "triangle")
# sign-like colour families: red discs, blue squares, yellow triangles
CLASS_COLORS = ((0.85, 0.12, 0.12), (0.12, 0.3, 0.85), (0.92, 0.82, 0.12))


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 4
    min_size_px: float = 6.0
    max_size_px: float = 20.0
    ring_inner: float = 0.2
    ring_outer: float = 0.42
    blur_prob: float = 0.0
    occlusion_prob: float = 0.0
    supersample: int = 4

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 < self.min_size_px <= self.max_size_px:
            raise ValueError("invalid object size range")
        if not 0 <= self.ring_inner < self.ring_outer:
            raise ValueError("invalid ring radii")


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    boxes: list[GroundTruthBox]


def _smooth_noise(rng: np.random.Generator, size: int, cells: int, channels: int) -> np.ndarray:
    """Bilinear upsampling of a coarse random grid."""
    coarse = rng.random((cells + 1, cells + 1, channels))
    t = np.linspace(0.0, cells, size, endpoint=False) + 0.5 * cells / size
    i0 = np.minimum(t.astype(int), cells - 1)
    f = (t - i0)[:, None]
    rows = coarse[i0] * (1 - f[..., None]) + coarse[i0 + 1] * f[..., None]
    cols = rows[:, i0] * (1 - f.T[..., None]) + rows[:, i0 + 1] * f.T[..., None]
    return cols


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = 0.25 + 0.35 * _smooth_noise(rng, size, 4, 3)
    texture = 0.08 * (_smooth_noise(rng, size, 16, 1) - 0.5)
    grain = rng.normal(0.0, 0.02, size=(size, size, 1))
    return np.clip(base + texture + grain, 0.0, 1.0)


def _shape_mask(cls: int, cx: float, cy: float, s: float, size: int, ss: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one shape, by supersampling."""
    coords = (np.arange(size * ss) + 0.5) / ss
    x, y = coords[None, :], coords[:, None]
    half = s / 2
    if cls == 0:
        inside = (x - cx) ** 2 + (y - cy) ** 2 <= half ** 2
    elif cls == 1:
        inside = (np.abs(x - cx) <= half) & (np.abs(y - cy) <= half)
    else:
        # apex at top center, base along the bottom edge
        top, bottom = cy - half, cy + half
        frac = np.clip((y - top) / s, 0.0, 1.0)
        inside = (y >= top) & (y <= bottom) & (np.abs(x - cx) <= half * frac)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _object_color(rng: np.random.Generator, cls: int, background: np.ndarray) -> np.ndarray:
    """Jittered class colour, redrawn (up to 20 times) until it stands out from the background."""
    base = np.asarray(CLASS_COLORS[cls])
    for _ in range(20):
        color = np.clip(base + rng.uniform(-0.15, 0.15, size=3), 0.0, 1.0)
        if np.abs(color - background).mean() >= 0.25:
            break
    return color


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    return sum(p[i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def sample_layout(rng: np.random.Generator, cfg: SceneConfig) -> list[tuple[int, float, float, float]]:
    """Non-overlapping (class, cx_px, cy_px, size_px) placements on the center ring."""
    size = cfg.image_size
    want = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed: list[tuple[int, float, float, float]] = []
    for _ in range(200 * want):
        if len(placed) == want:
            break
        s = rng.uniform(cfg.min_size_px, cfg.max_size_px)
        angle = rng.uniform(0.0, 2 * np.pi)
        radius = rng.uniform(cfg.ring_inner, cfg.ring_outer) * size
        cx = size / 2 + radius * np.cos(angle)
        cy = size / 2 + radius * np.sin(angle)
        if cx - s / 2 < 0 or cy - s / 2 < 0 or cx + s / 2 > size or cy + s / 2 > size:
            continue
        # keep a 2 px gap between boxes
        if any(abs(cx - px) < (s + ps) / 2 + 2 and abs(cy - py) < (s + ps) / 2 + 2
               for _, px, py, ps in placed):
            continue
        placed.append((int(rng.integers(len(CLASS_NAMES))), cx, cy, s))
    return placed


def generate_scene(rng: np.random.Generator, cfg: SceneConfig = SceneConfig()) -> SyntheticScene:
    size = cfg.image_size
    img = _background(rng, size)
    boxes = []
    for cls, cx, cy, s in sample_layout(rng, cfg):
        mask = _shape_mask(cls, cx, cy, s, size, cfg.supersample)[..., None]
        local = img[int(cy), int(cx)]
        color = _object_color(rng, cls, local)
        img = img * (1 - mask) + color * mask
        if rng.random() < cfg.occlusion_prob:
            # a background-coloured bar over at most ~40% of the object
            bar = np.zeros((size, size, 1))
            y0 = int(cy - s / 2 + rng.uniform(0.6, 0.8) * s)
            bar[max(y0, 0):int(cy + s / 2) + 1, max(int(cx - s / 2), 0):int(cx + s / 2) + 1] = 1.0
            img = img * (1 - bar) + local * bar
        boxes.append(GroundTruthBox(cx / size, cy / size, s / size, s / size, cls))
    if rng.random() < cfg.blur_prob:
        img = _box_blur(img)
    return SyntheticScene(np.clip(img, 0.0, 1.0), boxes)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


# --------------------------------------------------------------------------
# file formats


def _read_header(buf: bytes, magic: bytes, fields: int) -> tuple[list[int], int]:
    if not buf.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    pos, tokens = len(magic), []
    while len(tokens) < fields:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1  # one whitespace byte after maxval


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    h, w, c = image.shape
    if c != 3:
        raise ValueError("PPM needs a 3-channel image")
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (w, h, maxval), pos = _read_header(buf, b"P6", 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit grayscale; the map is min-max scaled to [0, 255]."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (w, h, _), pos = _read_header(buf, b"P5", 3)
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def write_annotations(path: str | Path, boxes: Sequence[GroundTruthBox]) -> None:
    lines = [f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b in boxes]
    Path(path).write_text("".join(lines))


def read_annotations(path: str | Path) -> list[GroundTruthBox]:
    boxes = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{n}: expected 'class cx cy w h'")
        boxes.append(GroundTruthBox(*map(float, parts[1:]), class_id=int(parts[0])))
    return boxes


def generate_dataset(count: int, seed: int, out_dir: str | Path,
                     cfg: SceneConfig = SceneConfig()) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    paths = []
    for i in range(count):
        scene = generate_scene(scene_rng(seed, i), cfg)
        img_path = out / f"scene_{i:05d}.ppm"
        try:
            write_ppm(img_path, scene.image)
            write_annotations(img_path.with_suffix(".txt"), scene.boxes)
        except OSError as e:
            raise OSError(f"failed writing {img_path}: {e}") from e
        paths.append(img_path)
    return paths


@dataclass
class Sample:
    stem: str
    image: np.ndarray
    boxes: list[GroundTruthBox]


def load_dataset(data_dir: str | Path) -> list[Sample]:
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    samples = []
    for img_path in sorted(root.glob("*.ppm")):
        ann = img_path.with_suffix(".txt")
        if not ann.exists():
            raise FileNotFoundError(f"missing annotation sidecar {ann}")
        samples.append(Sample(img_path.stem, read_ppm(img_path), read_annotations(ann)))
    return samples
