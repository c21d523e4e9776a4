"""Segmentation and classification heads plus inference post-processing.

The segmentation head is a per-location two-layer perceptron (1x1 convs)
that turns adapted features into anomaly-map logits.  The classification
head concatenates that map onto the unadapted features, runs one 5x5
convolutional block, pools globally (average and max, over both the block
output and the map) and maps the pooled vector to a single score logit.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

LEAKY_SLOPE = 0.2
SMOOTHING_SIGMA = 4.0


class SegmentationHead(nn.Module):
    """Per-location discriminator: 1x1 MLP with one hidden layer."""

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=1),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Conv2d(channels, 1, kernel_size=1),
        )

    def forward(self, pa: torch.Tensor) -> torch.Tensor:
        return self.net(pa)


def _conv_block(cin: int, cout: int) -> list[nn.Module]:
    return [
        nn.Conv2d(cin, cout, kernel_size=5, padding=2),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
    ]


class ClassificationHead(nn.Module):
    """Image-level score head over features and the predicted anomaly map.

    ``variant``:
      simple      one 5x5 conv block (default)
      complex     three stacked 5x5 conv blocks
      none / max_of_map
                  no learned head; the score logit is the maximum of the
                  anomaly-map logits
    """

    def __init__(self, channels: int, width: int = 128, variant: str = "simple"):
        super().__init__()
        if variant not in ("simple", "complex", "none", "max_of_map"):
            raise ValueError(f"unknown classification head variant {variant!r}")
        self.variant = variant
        self.width = width
        if self.learned:
            blocks = _conv_block(channels + 1, width)
            if variant == "complex":
                blocks += _conv_block(width, width) + _conv_block(width, width)
            self.block = nn.Sequential(*blocks)
            self.fc = nn.Linear(2 * width + 2, 1)

    @property
    def learned(self) -> bool:
        return self.variant in ("simple", "complex")

    @staticmethod
    def pool(block_out: torch.Tensor, map_logits: torch.Tensor) -> torch.Tensor:
        """Global average+max statistics of the block output and the map."""
        parts = [
            block_out.mean(dim=(2, 3)),
            block_out.amax(dim=(2, 3)),
            map_logits.mean(dim=(2, 3)),
            map_logits.amax(dim=(2, 3)),
        ]
        return torch.cat(parts, dim=1)

    def forward(
        self,
        pf: torch.Tensor,
        map_logits: torch.Tensor,
        stop_map_gradient: bool = False,
    ) -> torch.Tensor:
        if pf.shape[-2:] != map_logits.shape[-2:]:
            raise ValueError(
                f"features {tuple(pf.shape[-2:])} and anomaly map "
                f"{tuple(map_logits.shape[-2:])} are not spatially aligned"
            )
        m = map_logits.detach() if stop_map_gradient else map_logits
        if not self.learned:
            return m.amax(dim=(1, 2, 3))
        h = self.block(torch.cat([pf, m], dim=1))
        return self.fc(self.pool(h, m)).squeeze(1)


def gaussian_kernel1d(sigma: float, radius: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Normalised discrete Gaussian, truncated at ``radius`` (default 4*sigma)."""
    if radius is None:
        radius = int(math.ceil(4.0 * sigma))
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(maps: torch.Tensor, sigma: float = SMOOTHING_SIGMA) -> torch.Tensor:
    """Separable Gaussian filter with reflected borders on (B, 1, H, W)."""
    if sigma <= 0:
        return maps
    k = gaussian_kernel1d(sigma, dtype=maps.dtype)
    r = (k.numel() - 1) // 2
    kh = k.view(1, 1, 1, -1)
    kv = k.view(1, 1, -1, 1)
    out = F.pad(maps, (r, r, 0, 0), mode="reflect")
    out = F.conv2d(out, kh)
    out = F.pad(out, (0, 0, r, r), mode="reflect")
    out = F.conv2d(out, kv)
    return out


def postprocess(
    seg_logits: torch.Tensor,
    out_size: tuple[int, int],
    sigma: float = SMOOTHING_SIGMA,
) -> torch.Tensor:
    """Anomaly map at image resolution: sigmoid, upscale, smooth, clip.

    Returns (B, H, W) with values in [0, 1].
    """
    probs = torch.sigmoid(seg_logits)
    up = F.interpolate(probs, size=out_size, mode="bilinear", align_corners=False)
    smoothed = gaussian_blur(up, sigma=sigma)
    return smoothed.clamp_(0.0, 1.0).squeeze(1)
