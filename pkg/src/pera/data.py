"""Datasets: a procedural synthetic scene generator and a manifest-driven image folder loader."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, IngestionError

SHAPES = ("disk", "square", "triangle", "cross")
# stripe periods in units of image_size / 64 pixels
STRIPE_PERIODS = (2.5, 4.0, 6.5, 10.5)
# amplitude of the distractor stripes in the background; they share the class
# period, so only the shape carries information the background does not
BACKGROUND_STRIPES = 0.45

@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, 3) float32 in [0, 1]
    labels: np.ndarray | None
    sources: list[str]
    num_classes: int | None = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.images[indices], labels, [self.sources[i] for i in indices], self.num_classes)


@dataclass
class ImageBatch:
    images: np.ndarray  # (B, H, W, 3)
    labels: np.ndarray | None
    indices: np.ndarray


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int | None = None
    resolution: float | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]


def _value_noise(rng: np.random.Generator, size: int, octaves=(4, 8, 16)) -> np.ndarray:
    """Smooth multi-octave noise in [0, 1] built from bilinearly upsampled random lattices."""
    total = np.zeros((size, size))
    amp, norm = 1.0, 0.0
    for cells in octaves:
        lattice = rng.random((cells + 1, cells + 1))
        coords = np.linspace(0, cells, size, endpoint=False)
        i0 = coords.astype(int)
        f = coords - i0
        f = f * f * (3 - 2 * f)  # smoothstep
        rows = lattice[i0] * (1 - f)[:, None] + lattice[i0 + 1] * f[:, None]
        grid = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
        total += amp * grid
        norm += amp
        amp *= 0.5
    return total / norm


def _shape_mask(family: str, xx: np.ndarray, yy: np.ndarray, radius: float, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    u = (c * xx + s * yy) / radius
    v = (-s * xx + c * yy) / radius
    if family == "disk":
        return u**2 + v**2 <= 1.0
    if family == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if family == "triangle":
        # equilateral, circumradius 1
        return (v >= -0.5) & (np.sqrt(3.0) * np.abs(u) <= 1.0 - v)
    if family == "cross":
        arm = 0.33
        return ((np.abs(u) <= arm) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= arm) & (np.abs(u) <= 1.0))
    raise ValueError(family)


def _class_design(label: int) -> tuple[str, float]:
    family = SHAPES[label % 4]
    period = STRIPE_PERIODS[(label + label // 4) % 4]
    return family, period


def _render(rng: np.random.Generator, label: int, size: int, num_classes: int) -> np.ndarray:
    family, period = _class_design(label)
    period = period * size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5

    def stripes(theta: float, phase: float) -> np.ndarray:
        proj = xx * math.cos(theta) + yy * math.sin(theta)
        return (0.5 + 0.5 * np.sin(2 * math.pi * proj / period + phase))[..., None]

    # grey-ish textured background: random level and tint, value noise and stripes
    noise = _value_noise(rng, size)[..., None]
    level = rng.uniform(0.35, 0.65)
    tint = rng.uniform(-0.05, 0.05, 3)
    bg_stripes = stripes(rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi))
    img = level + tint + 0.3 * (noise - 0.5) + BACKGROUND_STRIPES * (bg_stripes - 0.5)

    radius = rng.uniform(0.30, 0.42) * size
    cx, cy = rng.uniform(0.75 * radius, size - 0.75 * radius, 2)
    mask = _shape_mask(family, xx - cx, yy - cy, radius, rng.uniform(0, 2 * math.pi))

    # striped foreground shape; a small class tint keeps class pixel means apart
    amp = rng.uniform(0.5, 0.8)
    angle = 2 * math.pi * label / num_classes
    class_tint = 0.06 * np.array([math.cos(angle), math.sin(angle), 0.0])
    fill = 0.5 + class_tint + tint + amp * (stripes(rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi)) - 0.5)
    img = np.where(mask[..., None], fill, img) + rng.normal(0.0, 0.02, (size, size, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(num_images: int, image_size: int, num_classes: int, seed: int) -> Dataset:
    """Procedural scenes whose class fixes the shape family and the stripe frequency.

    Backgrounds, colors, placement, size, rotation and stripe orientation are
    nuisance factors drawn per image from ``default_rng([seed, index])``, so the
    output depends only on the arguments.
    """
    if not 2 <= num_classes <= 16:
        raise ConfigurationError(f"num_classes must lie in [2, 16], got {num_classes}")
    if num_images < 1 or image_size < 8:
        raise ConfigurationError(f"need num_images >= 1 and image_size >= 8, got {num_images}, {image_size}")
    labels = np.arange(num_images) % num_classes
    images = np.stack(
        [_render(np.random.default_rng([seed, i]), int(labels[i]), image_size, num_classes) for i in range(num_images)]
    )
    sources = [f"synthetic:{seed}:{i}" for i in range(num_images)]
    return Dataset(images, labels.astype(np.int64), sources, num_classes)


def parse_manifest(path: str | Path) -> Manifest:
    """Read ``path<TAB>label<TAB>resolution`` lines; label and resolution may be empty."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc}") from exc
    entries, seen = [], set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) > 3:
            raise IngestionError(f"{path}:{lineno}: expected at most 3 tab-separated fields")
        fields += [""] * (3 - len(fields))
        rel, label, res = (f.strip() for f in fields)
        if rel in seen:
            raise IngestionError(f"{path}:{lineno}: duplicate path {rel}")
        seen.add(rel)
        try:
            entries.append(ManifestEntry(rel, int(label) if label else None, float(res) if res else None))
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: bad label or resolution ({exc})") from exc
    return Manifest(entries)


def _decode(path: Path, image_size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def load_image_folder(root: str | Path, manifest: Manifest, image_size: int = 512, workers: int = 0) -> Dataset:
    root = Path(root)
    paths = [root / e.path for e in manifest.entries]
    for p in paths:
        if not p.is_file():
            raise IngestionError(f"missing image file: {p}")
    if workers > 1:
        # map() keeps manifest order whatever the completion order
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(lambda p: _decode(p, image_size), paths))
    else:
        images = [_decode(p, image_size) for p in paths]
    labels = [e.label for e in manifest.entries]
    if any(lab is None for lab in labels):
        label_arr, num_classes = None, None
    else:
        label_arr = np.asarray(labels, dtype=np.int64)
        num_classes = int(label_arr.max()) + 1
        if label_arr.min() < 0:
            raise IngestionError("negative class label in manifest")
    stacked = np.stack(images) if images else np.zeros((0, image_size, image_size, 3), np.float32)
    return Dataset(stacked, label_arr, [str(p) for p in paths], num_classes)


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(
    dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True, epoch: int = 0
) -> Iterator[ImageBatch]:
    """One epoch of batches; the last batch may be partial."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise ConfigurationError("cannot batch an empty dataset")
    order = epoch_order(len(dataset), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        labels = None if dataset.labels is None else dataset.labels[idx]
        yield ImageBatch(dataset.images[idx], labels, idx)


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
