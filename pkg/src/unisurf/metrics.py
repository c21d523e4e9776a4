"""Evaluation metrics and the inference latency benchmark.

Image-level detection is scored with AUROC (Mann-Whitney pairwise
statistic, half credit for ties) and average precision; pixel-level
localisation with AUPRO (area under the per-region-overlap vs
false-positive-rate curve up to an FPR cap) and pixel average precision.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetricError

_STRUCTURE = np.ones((3, 3), dtype=bool)  # 8-connectivity


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) statistic.

    Equals P(score_pos > score_neg) + 0.5 * P(tie) over all
    positive/negative pairs.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks on ties
    pos_rank_sum = ranks[labels].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Area under the precision-recall step function (descending sweep).

    Tied scores enter together at one threshold.  For pixel-level use,
    flatten the maps and masks first.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    # keep only the last entry of each tied group
    boundary = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    tp, fp = tp[boundary], fp[boundary]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def aupro(anomaly_maps, gt_masks, fpr_limit: float = 0.3) -> float:
    """Area under the per-region-overlap curve, normalised by the FPR cap.

    For every threshold the per-region overlap is averaged over all
    8-connected ground-truth regions across the whole set while the
    false-positive rate is computed over all negative pixels; the PRO
    curve is integrated (trapezoid) over FPR in [0, fpr_limit] and
    divided by fpr_limit.
    """
    if not 0 < fpr_limit <= 1:
        raise ValueError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    maps = np.asarray(anomaly_maps, dtype=np.float64)
    masks = np.asarray(gt_masks).astype(bool)
    if maps.shape != masks.shape:
        raise ValueError("anomaly maps and masks must share a shape")
    if maps.ndim == 2:
        maps, masks = maps[None], masks[None]
    if not masks.any():
        raise UndefinedMetricError("AUPRO needs at least one anomalous region")

    region_scores = []
    for img_map, mask in zip(maps, masks):
        labelled, n = ndimage.label(mask, structure=_STRUCTURE)
        for comp in range(1, n + 1):
            region_scores.append(np.sort(img_map[labelled == comp]))
    neg_scores = np.sort(maps[~masks])
    if neg_scores.size == 0:
        raise UndefinedMetricError("AUPRO needs at least one negative pixel")

    # descending unique thresholds; prediction is score >= t
    thresholds = np.unique(np.concatenate([r for r in region_scores] + [neg_scores]))[::-1]
    n_neg = neg_scores.size
    fpr = 1.0 - np.searchsorted(neg_scores, thresholds, side="left") / n_neg
    pro = np.zeros_like(thresholds)
    for region in region_scores:
        hits = region.size - np.searchsorted(region, thresholds, side="left")
        pro += hits / region.size
    pro /= len(region_scores)

    fpr = np.concatenate([[0.0], fpr, [1.0]])
    pro = np.concatenate([[0.0], pro, [1.0]])
    return _integrate_to_limit(fpr, pro, fpr_limit)


def _integrate_to_limit(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    """Trapezoidal area under (fpr, pro) up to ``limit``, normalised."""
    if fpr[-1] < limit:
        fpr = np.append(fpr, limit)
        pro = np.append(pro, pro[-1])
    cut = np.searchsorted(fpr, limit, side="right")
    xs = fpr[:cut]
    ys = pro[:cut]
    if xs[-1] < limit:  # interpolate the curve at the cap
        x0, x1 = fpr[cut - 1], fpr[cut]
        y0, y1 = pro[cut - 1], pro[cut]
        y_at = y0 if x1 == x0 else y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs = np.append(xs, limit)
        ys = np.append(ys, y_at)
    return float(np.trapezoid(ys, xs) / limit)


# -- evaluation report --------------------------------------------------------


@dataclass
class EvalReport:
    """Detection/localisation metrics for one evaluated checkpoint."""

    det_auroc: float | None = None
    det_ap: float | None = None
    loc_aupro: float | None = None
    loc_ap: float | None = None
    per_category: dict = field(default_factory=dict)
    n_images: int = 0
    seed: int | None = None
    checkpoint_hash: str | None = None
    hardware: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return path


def hardware_descriptor() -> str:
    import torch

    device = "cuda" if torch.cuda.is_available() else "cpu"
    cpu = platform.processor() or platform.machine()
    return f"{device}:{cpu} ({platform.system()})"


def bench_latency(
    model,
    input_dims: tuple[int, int] = (256, 256),
    warmup_iters: int = 10,
    timed_iters: int = 50,
    throughput_batch: int = 16,
) -> dict:
    """Single-image latency and batched throughput of ``model.predict``.

    Wall-clock mean/std over ``timed_iters`` single-image calls after
    ``warmup_iters`` of warmup, plus images/second at ``throughput_batch``.
    """
    import torch

    if timed_iters <= 0:
        raise ValueError(f"timed_iters must be >= 1, got {timed_iters}")
    if warmup_iters < 0:
        raise ValueError(f"warmup_iters must be >= 0, got {warmup_iters}")
    model.eval()
    single = torch.randn(1, 3, *input_dims)
    for _ in range(warmup_iters):
        model.predict(single)
    times = []
    for _ in range(timed_iters):
        t0 = time.perf_counter()
        model.predict(single)
        times.append(time.perf_counter() - t0)
    times_ms = np.asarray(times) * 1e3

    batch = torch.randn(throughput_batch, 3, *input_dims)
    model.predict(batch)  # warmup at batch size
    n_batch_iters = max(1, timed_iters // throughput_batch)
    t0 = time.perf_counter()
    for _ in range(n_batch_iters):
        model.predict(batch)
    batch_elapsed = time.perf_counter() - t0
    throughput = throughput_batch * n_batch_iters / batch_elapsed

    return {
        "mean_ms": float(times_ms.mean()),
        "std_ms": float(times_ms.std()),
        "throughput_batch16": float(throughput),
        "batch_size": throughput_batch,
        "warmup_iters": warmup_iters,
        "timed_iters": timed_iters,
        "input_dims": list(input_dims),
        "hardware": hardware_descriptor(),
    }
