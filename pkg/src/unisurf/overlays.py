"""Qualitative outputs: heatmap overlays and raw 16-bit anomaly maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw


def _heat_colormap(values: np.ndarray) -> np.ndarray:
    """Classic blue->cyan->yellow->red ramp for values in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_overlay(image_rgb: np.ndarray, anomaly_map: np.ndarray, score: float) -> tuple[Image.Image, str]:
    """Blend a heatmap over the input and stamp the score top-right.

    ``image_rgb`` is (H, W, 3) uint8, ``anomaly_map`` (H, W) in [0, 1].
    Returns the overlay image and the exact score text drawn onto it.
    """
    heat = _heat_colormap(anomaly_map)
    alpha = (0.25 + 0.5 * anomaly_map)[..., None]
    base = image_rgb.astype(np.float64) / 255.0
    blended = (1.0 - alpha) * base + alpha * heat
    out = Image.fromarray((blended * 255).round().astype(np.uint8))

    text = f"{score:.3f}"
    draw = ImageDraw.Draw(out)
    x0, y0, x1, y1 = draw.textbbox((0, 0), text)
    margin = 3
    w = x1 - x0
    pos = (out.width - w - 2 * margin, margin)
    draw.rectangle(
        [pos[0] - margin, 0, out.width, y1 - y0 + 3 * margin], fill=(0, 0, 0)
    )
    draw.text(pos, text, fill=(255, 255, 255))
    return out, text


def save_raw_map(anomaly_map: np.ndarray, path: str | Path) -> Path:
    """Raw anomaly map as a 16-bit grayscale PNG (0..65535 <- [0, 1])."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scaled = np.clip(anomaly_map, 0.0, 1.0) * 65535.0
    Image.fromarray(scaled.round().astype(np.uint16)).save(path)  # I;16 PNG
    return path
