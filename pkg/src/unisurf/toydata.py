"""Procedural toy textures with square and scratch defects.

Generates a small surface-inspection dataset for desk-scale training and
demos: smoothed-noise textures with a faint diagonal weave as normal
samples, and the same textures carrying bright or dark square patches and
thin scratches as anomalous samples, with exact pixel masks.  Images plus
masks are written as PNGs and indexed by a manifest file.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .datasets import KIND_FULL, KIND_NORMAL, LabelledSample, write_manifest

DEFAULT_SIZE = 128


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Band-passed noise plus a faint diagonal weave, in [0, 1]."""
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=2.5)
    noise = noise / (noise.std() + 1e-8) * 0.06
    yy, xx = np.mgrid[0:size, 0:size]
    phase = rng.uniform(0, 2 * math.pi)
    freq = rng.uniform(0.28, 0.34)
    weave = 0.04 * np.sin(freq * (xx + yy) + phase)
    base = 0.55 + noise + weave
    return np.clip(base, 0.02, 0.98)


def _add_square(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> None:
    size = img.shape[0]
    side = int(rng.integers(10, 23))
    top = int(rng.integers(4, size - side - 4))
    left = int(rng.integers(4, size - side - 4))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    shift = sign * rng.uniform(0.28, 0.5)
    patch = img[top : top + side, left : left + side]
    img[top : top + side, left : left + side] = np.clip(
        patch + shift + rng.normal(0, 0.02, patch.shape), 0.0, 1.0
    )
    mask[top : top + side, left : left + side] = True


def _add_scratch(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> None:
    size = img.shape[0]
    length = rng.uniform(30, 65)
    angle = rng.uniform(0, math.pi)
    cx = rng.uniform(0.2, 0.8) * size
    cy = rng.uniform(0.2, 0.8) * size
    dx, dy = math.cos(angle) * length / 2, math.sin(angle) * length / 2
    width = int(rng.integers(2, 5))
    stroke = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(stroke)
    draw.line([(cx - dx, cy - dy), (cx + dx, cy + dy)], fill=255, width=width)
    hit = np.asarray(stroke) > 0
    sign = 1.0 if rng.random() < 0.5 else -1.0
    shift = sign * rng.uniform(0.3, 0.55)
    img[hit] = np.clip(img[hit] + shift, 0.0, 1.0)
    mask |= hit


def _render(rng: np.random.Generator, size: int, anomalous: bool) -> tuple[np.ndarray, np.ndarray]:
    img = _texture(rng, size)
    mask = np.zeros((size, size), dtype=bool)
    if anomalous:
        n_defects = int(rng.integers(1, 4))
        for _ in range(n_defects):
            if rng.random() < 0.5:
                _add_square(img, mask, rng)
            else:
                _add_scratch(img, mask, rng)
    return img, mask


def _save(img: np.ndarray, path: Path) -> None:
    Image.fromarray((img * 255).round().astype(np.uint8)).save(path)


def generate_toy_dataset(
    root: str | Path,
    n_train_normal: int = 120,
    n_train_anomalous: int = 80,
    n_test_normal: int = 30,
    n_test_anomalous: int = 30,
    size: int = DEFAULT_SIZE,
    seed: int = 0,
) -> Path:
    """Write a toy dataset under ``root`` and return its manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    plan = [
        ("train", False, n_train_normal),
        ("train", True, n_train_anomalous),
        ("test", False, n_test_normal),
        ("test", True, n_test_anomalous),
    ]
    samples: list[LabelledSample] = []
    for split, anomalous, count in plan:
        tag = "defect" if anomalous else "good"
        for idx in range(count):
            img, mask = _render(rng, size, anomalous)
            img_path = root / "images" / f"{split}_{tag}_{idx:04d}.png"
            _save(img, img_path)
            if anomalous:
                mask_path = root / "masks" / f"{split}_{tag}_{idx:04d}.png"
                Image.fromarray(mask.astype(np.uint8) * 255).save(mask_path)
                samples.append(
                    LabelledSample(img_path, KIND_FULL, mask_path=mask_path, split=split)
                )
            else:
                samples.append(LabelledSample(img_path, KIND_NORMAL, split=split))
    return write_manifest(samples, root / "manifest.tsv")
