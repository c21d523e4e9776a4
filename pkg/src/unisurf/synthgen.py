"""Latent-space synthetic anomaly generation.

Blob-shaped binary masks come from thresholded gradient (Perlin) noise.
Region-limited Gaussian noise is added to the pooled features and to the
adapted features inside those masks, never on top of known real defects,
and the batch is duplicated so every image contributes two independently
perturbed copies per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

MIN_FIELD_SIZE = 8
# Lattice periods are 2**k per axis, k drawn uniformly from this range.
PERLIN_SCALE_RANGE = (1, 6)


def _fade(t: torch.Tensor) -> torch.Tensor:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_field(height: int, width: int, seed: int) -> torch.Tensor:
    """Smooth gradient-noise field in [-1, 1], deterministic per seed.

    The lattice period for each axis is sampled as 2**k with k uniform in
    {1..6}, so repeated calls cover anomaly blobs of very different sizes.
    """
    if height < MIN_FIELD_SIZE or width < MIN_FIELD_SIZE:
        raise ValueError(
            f"perlin field needs at least {MIN_FIELD_SIZE}x{MIN_FIELD_SIZE} cells, "
            f"got {height}x{width}"
        )
    gen = torch.Generator().manual_seed(int(seed))
    k_lo, k_hi = PERLIN_SCALE_RANGE
    k_h = int(torch.randint(k_lo, k_hi + 1, (1,), generator=gen))
    k_w = int(torch.randint(k_lo, k_hi + 1, (1,), generator=gen))
    return _perlin(height, width, 2**k_h, 2**k_w, gen)


def _perlin(height: int, width: int, period_h: int, period_w: int, gen: torch.Generator) -> torch.Tensor:
    angles = 2.0 * math.pi * torch.rand(period_h + 1, period_w + 1, generator=gen)
    grad = torch.stack((torch.cos(angles), torch.sin(angles)), dim=-1)

    ys = torch.arange(height, dtype=torch.float32) * (period_h / height)
    xs = torch.arange(width, dtype=torch.float32) * (period_w / width)
    y0 = ys.floor().long()
    x0 = xs.floor().long()
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    iy0 = y0[:, None].expand(height, width)
    ix0 = x0[None, :].expand(height, width)

    def dot(dy_cell: int, dx_cell: int) -> torch.Tensor:
        g = grad[iy0 + dy_cell, ix0 + dx_cell]
        return g[..., 0] * (fx - dx_cell) + g[..., 1] * (fy - dy_cell)

    n00, n10 = dot(0, 0), dot(0, 1)
    n01, n11 = dot(1, 0), dot(1, 1)
    u, v = _fade(fx), _fade(fy)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    field = nx0 + v * (nx1 - nx0)
    return (math.sqrt(2.0) * field).clamp_(-1.0, 1.0)


def threshold_mask(field: torch.Tensor, tau: float) -> torch.Tensor:
    """Binarise a noise field: cell is anomalous where field > tau."""
    if not -1.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (-1, 1), got {tau}")
    return field > tau


def synth_mask(m_p: torch.Tensor, m_gt: torch.Tensor) -> torch.Tensor:
    """Remove real-defect cells from the Perlin mask: M_p AND NOT M_gt."""
    if m_p.shape != m_gt.shape:
        raise ValueError(f"mask shape mismatch: {tuple(m_p.shape)} vs {tuple(m_gt.shape)}")
    return m_p.bool() & ~m_gt.bool()


def assemble(m_synth: torch.Tensor, m_gt: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Union target mask and its image-level label derived from the masks."""
    if m_synth.shape != m_gt.shape:
        raise ValueError(f"mask shape mismatch: {tuple(m_synth.shape)} vs {tuple(m_gt.shape)}")
    m = m_synth.bool() | m_gt.bool()
    return m, int(m.any())


def inject(
    f: torch.Tensor,
    a: torch.Tensor,
    m_synth: torch.Tensor,
    sigma: float,
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Add mask-limited Gaussian noise to both feature maps.

    Noise is drawn i.i.d. per channel and location from N(0, sigma^2),
    independently for the two maps, and zeroed outside the mask; cells
    outside the mask are returned bit-identical.
    """
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if f.shape[-2:] != m_synth.shape[-2:] or a.shape[-2:] != m_synth.shape[-2:]:
        raise ValueError("features and mask are not spatially aligned")
    mask = m_synth.bool()
    if sigma == 0 or not mask.any():
        return f.clone(), a.clone()
    gen = torch.Generator().manual_seed(int(seed))
    eps_f = (torch.randn(f.shape, generator=gen) * sigma).to(device=f.device, dtype=f.dtype)
    eps_a = (torch.randn(a.shape, generator=gen) * sigma).to(device=a.device, dtype=a.dtype)
    pf = torch.where(mask, f + eps_f, f)
    pa = torch.where(mask, a + eps_a, a)
    return pf, pa


@dataclass
class PerturbedBatch:
    """Doubled batch after synthetic anomaly injection.

    pf/pa: perturbed pooled and adapted features, (2B, C, H, W)
    mask:  union anomaly target, bool (2B, H, W)
    y:     image-level target, float (2B,); 1 where the copy contains a
           synthetic anomaly or the source image is anomalous
    """

    pf: torch.Tensor
    pa: torch.Tensor
    mask: torch.Tensor
    y: torch.Tensor


def duplicate_and_perturb(
    f: torch.Tensor,
    a: torch.Tensor,
    m_gt: torch.Tensor,
    anomalous_source: torch.Tensor,
    *,
    sigma: float,
    perlin_threshold: float,
    seed: int,
    strategy: str = "masked",
    overlap_allowed: bool = False,
    normal_keep_prob: float = 0.5,
) -> PerturbedBatch:
    """Duplicate a feature batch and perturb each copy independently.

    Each of the 2B copies draws its own Perlin mask and noise.  Copies of
    a normal image stay noise-free with probability ``normal_keep_prob``
    so every batch retains normal targets.  With ``strategy='simplenet'``
    the first copy stays clean and the second is perturbed everywhere;
    with ``'none'`` no synthetic anomalies are generated at all.
    """
    if f.ndim != 4 or f.shape[0] == 0:
        raise ValueError("expected a non-empty (B, C, H, W) feature batch")
    b, _, height, width = f.shape
    if strategy not in ("masked", "simplenet", "none"):
        raise ValueError(f"unknown anomaly strategy {strategy!r}")

    master = torch.Generator().manual_seed(int(seed))
    copy_seeds = torch.randint(0, 2**31 - 1, (2 * b, 2), generator=master)
    keep_coin = torch.rand(2 * b, generator=master)

    m_gt = m_gt.bool()
    anomalous_source = anomalous_source.bool()

    pf_out, pa_out, m_out, y_out = [], [], [], []
    for j in range(2 * b):
        i = j % b
        mask_seed, noise_seed = int(copy_seeds[j, 0]), int(copy_seeds[j, 1])
        if strategy == "none":
            m_p = torch.zeros(height, width, dtype=torch.bool)
        elif strategy == "simplenet":
            # original copy clean, duplicate fully perturbed
            full = j >= b
            m_p = torch.full((height, width), full, dtype=torch.bool)
        else:
            skip = (not anomalous_source[i]) and keep_coin[j] < normal_keep_prob
            if skip:
                m_p = torch.zeros(height, width, dtype=torch.bool)
            else:
                field = perlin_field(height, width, mask_seed)
                m_p = threshold_mask(field, perlin_threshold)

        m_p = m_p.to(f.device)
        m_s = m_p if overlap_allowed else synth_mask(m_p, m_gt[i])
        pf, pa = inject(f[i], a[i], m_s, sigma, noise_seed)
        m, y_mask = assemble(m_s, m_gt[i])

        pf_out.append(pf)
        pa_out.append(pa)
        m_out.append(m)
        # an anomalous source stays a positive even when its pixel mask is
        # unknown (weak labels) and no synthetic noise was applied
        y_out.append(float(y_mask or bool(anomalous_source[i])))

    return PerturbedBatch(
        pf=torch.stack(pf_out),
        pa=torch.stack(pa_out),
        mask=torch.stack(m_out),
        y=torch.tensor(y_out, dtype=f.dtype, device=f.device),
    )
