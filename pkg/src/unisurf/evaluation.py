"""Checkpoint evaluation: predictions over a test split into an EvalReport."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .datasets import LabelledSample, load_image, load_mask
from .errors import DataError, UndefinedMetricError
from .metrics import EvalReport, aupro, auroc, average_precision, hardware_descriptor
from .model import DefectModel


def predict_samples(
    model: DefectModel, samples: list[LabelledSample], cfg: RunConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Scores and anomaly maps for a list of samples, batched."""
    size = cfg.image_size()
    scores, maps = [], []
    bs = max(1, cfg.eval.batch_size)
    for start in range(0, len(samples), bs):
        chunk = samples[start : start + bs]
        images = torch.stack([load_image(s.image_path, size) for s in chunk])
        pred = model.predict(images)
        scores.append(pred.score.cpu().numpy())
        maps.append(pred.anomaly_map.cpu().numpy())
    return np.concatenate(scores), np.concatenate(maps)


def evaluate_model(
    model: DefectModel,
    samples: list[LabelledSample],
    cfg: RunConfig,
    checkpoint_hash: str | None = None,
    localisation: bool = True,
) -> tuple[EvalReport, list[dict]]:
    """Evaluate the test split; returns the report and per-image rows."""
    test = [s for s in samples if s.split == "test"]
    if not test:
        raise DataError("evaluation needs a non-empty test split")
    scores, maps = predict_samples(model, test, cfg)
    labels = np.array([s.is_anomalous() for s in test], dtype=bool)

    report = EvalReport(
        n_images=len(test),
        seed=cfg.seed,
        checkpoint_hash=checkpoint_hash,
        hardware=hardware_descriptor(),
    )
    report.det_auroc = auroc(scores, labels)
    report.det_ap = average_precision(scores, labels)

    if localisation:
        missing = [s.image_path for s in test if s.is_anomalous() and s.mask_path is None]
        if missing:
            raise UndefinedMetricError(
                f"localisation metrics need test masks; missing for {missing[:3]}"
            )
        size = cfg.image_size()
        masks = np.stack(
            [load_mask(s.mask_path, size).numpy() for s in test]
        )
        report.loc_aupro = aupro(maps, masks, fpr_limit=cfg.eval.fpr_limit)
        report.loc_ap = average_precision(maps.ravel(), masks.ravel())

    categories = sorted({s.category or "all" for s in test})
    for cat in categories:
        idx = np.array([(s.category or "all") == cat for s in test], dtype=bool)
        entry = {"n_images": int(idx.sum())}
        cat_labels = labels[idx]
        if cat_labels.any() and not cat_labels.all():
            entry["det_auroc"] = auroc(scores[idx], cat_labels)
            entry["det_ap"] = average_precision(scores[idx], cat_labels)
        report.per_category[cat] = entry

    rows = [
        {
            "image_path": str(s.image_path),
            "label": int(s.is_anomalous()),
            "score": float(score),
        }
        for s, score in zip(test, scores)
    ]
    return report, rows


def write_scores_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image_path", "label", "score"])
        writer.writeheader()
        writer.writerows(rows)
    return path


def aggregate_reports(reports: list[EvalReport]) -> dict:
    """Mean and standard deviation over repeated-seed evaluation runs."""
    keys = ("det_auroc", "det_ap", "loc_aupro", "loc_ap")
    agg: dict = {"n_runs": len(reports), "mean": {}, "std": {}}
    for key in keys:
        values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if values:
            agg["mean"][key] = float(np.mean(values))
            agg["std"][key] = float(np.std(values))
    agg["runs"] = [r.to_dict() for r in reports]
    return agg
