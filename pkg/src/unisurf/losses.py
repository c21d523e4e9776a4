"""Training objectives: truncated L1, focal terms, distance weighting and
the supervision-gated total loss.

The truncated L1 term is a symmetric hinge on raw segmentation logits
with margin ``th``: it stops penalising confident-enough predictions and
so learns a soft decision boundary.  Focal losses handle the heavy
normal/anomalous imbalance at both pixel and image level.  A per-image
gate (1 for normal and fully labelled images, 0 for weakly labelled
anomalous ones) removes the segmentation loss wherever the pixel target
is unknown.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy import ndimage

EPS = 1e-7

# 8-connectivity for defect blobs
_STRUCTURE = np.ones((3, 3), dtype=bool)


def truncated_l1(
    logits: torch.Tensor,
    mask: torch.Tensor,
    th: float = 0.5,
    weights: torch.Tensor | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Symmetric margin hinge on raw logits.

    Cell term is max(0, th - logit) on anomalous cells and
    max(0, th + logit) elsewhere; optional per-cell weights multiply the
    terms before averaging.  ``reduction='per_image'`` returns one value
    per batch item.
    """
    if th <= 0:
        raise ValueError(f"truncation margin must be > 0, got {th}")
    mask = mask.to(dtype=torch.bool, device=logits.device)
    if mask.shape != logits.shape:
        mask = mask.reshape(logits.shape)
    terms = torch.where(mask, (th - logits).clamp_min(0), (th + logits).clamp_min(0))
    if weights is not None:
        terms = terms * weights.reshape(terms.shape)
    if reduction == "per_image":
        return terms.flatten(1).mean(dim=1)
    return terms.mean()


def focal(
    probs: torch.Tensor,
    targets: torch.Tensor,
    alpha: float | None = 0.25,
    gamma: float = 2.0,
    weights: torch.Tensor | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Binary focal loss on probabilities, clamped away from {0, 1}.

    With ``gamma=0`` and ``alpha=None`` this reduces to binary
    cross-entropy.  Works on per-pixel grids and on per-image scalars.
    """
    p = probs.clamp(EPS, 1.0 - EPS)
    t = targets.to(dtype=p.dtype, device=p.device).reshape(p.shape)
    pt = torch.where(t > 0.5, p, 1.0 - p)
    terms = -((1.0 - pt) ** gamma) * torch.log(pt)
    if alpha is not None:
        alpha_t = t * alpha + (1.0 - t) * (1.0 - alpha)
        terms = alpha_t * terms
    if weights is not None:
        terms = terms * weights.reshape(terms.shape)
    if reduction == "per_image":
        return terms.flatten(1).mean(dim=1)
    return terms.mean()


def _component_weights(mask: np.ndarray, w_max: float) -> np.ndarray:
    """Distance-transform weights for a single 2-D {0,1} mask."""
    weights = np.ones(mask.shape, dtype=np.float32)
    if not mask.any() or w_max == 1.0:
        return weights
    # Size-1 axes carry no distance information (a 1xN strip is a 1-D
    # segment); the array border counts as background.
    squeezed = mask.squeeze()
    work = np.atleast_1d(squeezed)
    padded = np.pad(work, 1)
    dist = ndimage.distance_transform_edt(padded)
    dist = dist[tuple(slice(1, -1) for _ in range(work.ndim))]

    structure = _STRUCTURE if work.ndim == 2 else np.ones(3, dtype=bool)
    labels, n = ndimage.label(work, structure=structure)
    w = np.ones(work.shape, dtype=np.float32)
    for comp in range(1, n + 1):
        sel = labels == comp
        dmax = dist[sel].max()
        w[sel] = 1.0 + (w_max - 1.0) * (dist[sel] / dmax)
    return w.reshape(mask.shape)


def distance_weights(mask: torch.Tensor, w_max: float = 3.0) -> torch.Tensor:
    """Per-location loss weights emphasising defect-region interiors.

    The Euclidean distance transform is evaluated inside each
    8-connected anomalous component, normalised per component by its
    maximum and mapped affinely onto [1, w_max]; non-anomalous cells get
    weight 1.  Accepts (H, W) or (B, H, W) masks.
    """
    if w_max < 1:
        raise ValueError(f"w_max must be >= 1, got {w_max}")
    single = mask.ndim == 2
    batch = mask.unsqueeze(0) if single else mask
    arrs = batch.detach().cpu().numpy().astype(bool)
    out = np.stack([_component_weights(m, float(w_max)) for m in arrs])
    result = torch.from_numpy(out).to(device=mask.device)
    return result[0] if single else result


def gamma_gates(kinds: list[str] | np.ndarray) -> torch.Tensor:
    """Per-image segmentation-loss gates from supervision labels.

    1 for normal images and fully labelled anomalous images, 0 for
    weakly labelled anomalous images whose pixel target is unknown.
    """
    gates = [0.0 if str(k) == "anomalous_weak" else 1.0 for k in kinds]
    return torch.tensor(gates)


def total_loss(
    seg_logits: torch.Tensor,
    score_logits: torch.Tensor,
    mask: torch.Tensor,
    y: torch.Tensor,
    gamma_gate: torch.Tensor,
    *,
    th: float = 0.5,
    focal_alpha: float | None = 0.25,
    focal_gamma: float = 2.0,
    weights: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """Supervision-gated objective.

    Per image: gate * (truncated L1 + pixel focal) + image focal, gates
    applied before the batch mean so gated-out images contribute exactly
    zero segmentation gradient.  Returns total plus the (gated)
    segmentation and classification components.
    """
    gate = gamma_gate.to(dtype=seg_logits.dtype, device=seg_logits.device)
    l1t = truncated_l1(seg_logits, mask, th=th, weights=weights, reduction="per_image")
    pix_focal = focal(
        torch.sigmoid(seg_logits),
        mask,
        alpha=focal_alpha,
        gamma=focal_gamma,
        weights=weights,
        reduction="per_image",
    )
    seg = (gate * (l1t + pix_focal)).mean()
    cls = focal(
        torch.sigmoid(score_logits),
        y,
        alpha=focal_alpha,
        gamma=focal_gamma,
        reduction="mean",
    )
    return {"total": seg + cls, "seg": seg, "cls": cls}
