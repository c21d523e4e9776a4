"""Dataset loading, supervision labels, folds and regime views.

Folder-layout loaders (mvtec/visa-style, ksdd2, sensum) compile every
dataset into a flat list of labelled samples; a tab-separated manifest is
the canonical on-disk form of that list.  Supervision regimes are applied
as views over the training split: they only ever hide information (drop
anomalous samples or hide their masks), never touch the test split.

Supported layouts::

    mvtec / visa   <root>/train/good/*.png
                   <root>/test/<defect>/*.png
                   <root>/ground_truth/<defect>/<stem>[_mask].png
    ksdd2          <root>/{train,test}/<id>.png + <id>_GT.png
                   (anomalous iff the GT mask has any positive pixel)
    sensum         <root>/{negative,positive}/data/*.png
                   <root>/positive/annotation/<stem>.png
                   (no predefined split; use make_folds)
    manifest       tab-separated file, one sample per line:
                   image_path  kind  mask_path|-  split  fold|-
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DataError

KIND_NORMAL = "normal"
KIND_WEAK = "anomalous_weak"
KIND_FULL = "anomalous_full"
KINDS = (KIND_NORMAL, KIND_WEAK, KIND_FULL)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".PNG", ".JPG", ".JPEG")


@dataclass(frozen=True)
class LabelledSample:
    """One image with its supervision label and split assignment."""

    image_path: Path
    kind: str
    mask_path: Path | None = None
    split: str = "train"
    fold: int | None = None
    category: str | None = None

    def is_anomalous(self) -> bool:
        return self.kind != KIND_NORMAL


@dataclass(frozen=True)
class MixedPlan:
    """Which anomalous training samples keep their pixel masks.

    Either a ratio in [0, 1] of the anomalous training samples or an
    absolute count; selection is uniform at random under ``seed``.
    """

    ratio: float | None = None
    count: int | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.ratio is None) == (self.count is None):
            raise ConfigError("mixed: exactly one of mixed.ratio or mixed.count required")
        if self.ratio is not None and not 0 <= self.ratio <= 1:
            raise ConfigError(f"mixed.ratio: must lie in [0, 1], got {self.ratio}")
        if self.count is not None and self.count < 0:
            raise ConfigError(f"mixed.count: must be >= 0, got {self.count}")


def _list_images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix in IMAGE_SUFFIXES)


def _mask_nonempty(path: Path) -> bool:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")).max() > 0


def _find_mask(mask_dir: Path, stem: str) -> Path | None:
    if not mask_dir.is_dir():
        return None
    for cand in sorted(mask_dir.iterdir()):
        if cand.suffix in IMAGE_SUFFIXES and (cand.stem == stem or cand.stem == f"{stem}_mask"):
            return cand
    return None


def _load_mvtec_style(root: Path) -> list[LabelledSample]:
    train_good = root / "train" / "good"
    test_dir = root / "test"
    if not train_good.is_dir() or not test_dir.is_dir():
        raise DataError(f"{root}: expected mvtec-style train/good and test directories")
    category = root.name
    samples = [
        LabelledSample(p, KIND_NORMAL, split="train", category=category)
        for p in _list_images(train_good)
    ]
    gt_root = root / "ground_truth"
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        for p in _list_images(defect_dir):
            if defect_dir.name == "good":
                samples.append(LabelledSample(p, KIND_NORMAL, split="test", category=category))
                continue
            mask = _find_mask(gt_root / defect_dir.name, p.stem)
            if mask is None:
                raise DataError(f"{root}: missing ground-truth mask for annotated defect {p}")
            samples.append(
                LabelledSample(p, KIND_FULL, mask_path=mask, split="test", category=category)
            )
    return samples


def _load_ksdd2(root: Path) -> list[LabelledSample]:
    samples = []
    for split in ("train", "test"):
        folder = root / split
        if not folder.is_dir():
            raise DataError(f"{root}: expected ksdd2-style '{split}' directory")
        for p in _list_images(folder):
            if p.stem.endswith("_GT"):
                continue
            mask = next(
                (folder / f"{p.stem}_GT{suf}" for suf in IMAGE_SUFFIXES
                 if (folder / f"{p.stem}_GT{suf}").is_file()),
                None,
            )
            if mask is None:
                raise DataError(f"{root}: missing ground-truth mask for {p}")
            if _mask_nonempty(mask):
                samples.append(
                    LabelledSample(p, KIND_FULL, mask_path=mask, split=split, category=root.name)
                )
            else:
                samples.append(LabelledSample(p, KIND_NORMAL, split=split, category=root.name))
    return samples


def _load_sensum(root: Path) -> list[LabelledSample]:
    neg = root / "negative" / "data"
    pos = root / "positive" / "data"
    ann = root / "positive" / "annotation"
    if not neg.is_dir() or not pos.is_dir():
        raise DataError(f"{root}: expected sensum-style negative/data and positive/data")
    category = root.name
    samples = [
        LabelledSample(p, KIND_NORMAL, split="train", category=category) for p in _list_images(neg)
    ]
    for p in _list_images(pos):
        mask = _find_mask(ann, p.stem)
        if mask is None:
            raise DataError(f"{root}: missing annotation mask for defect image {p}")
        samples.append(
            LabelledSample(p, KIND_FULL, mask_path=mask, split="train", category=category)
        )
    return samples


_LOADERS = {
    "mvtec": _load_mvtec_style,
    "visa": _load_mvtec_style,
    "ksdd2": _load_ksdd2,
    "sensum": _load_sensum,
}


def load_dataset(root: str | Path, layout: str) -> list[LabelledSample]:
    """Compile a dataset directory (or manifest file) into samples."""
    root = Path(root)
    if layout == "manifest":
        return read_manifest(root)
    if layout not in _LOADERS:
        raise DataError(f"unknown dataset layout {layout!r}; known: {sorted(_LOADERS)} or 'manifest'")
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    samples = _LOADERS[layout](root)
    if not samples:
        raise DataError(f"{root}: no samples found for layout {layout!r}")
    return samples


# -- manifest ---------------------------------------------------------------


def write_manifest(samples: list[LabelledSample], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for s in samples:
            writer.writerow(
                [
                    str(s.image_path),
                    s.kind,
                    str(s.mask_path) if s.mask_path else "-",
                    s.split,
                    str(s.fold) if s.fold is not None else "-",
                ]
            )
    return path


def read_manifest(path: str | Path) -> list[LabelledSample]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    samples = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated columns, got {len(row)}")
            image_path, kind, mask, split, fold = row
            if kind not in KINDS:
                raise DataError(f"{path}:{lineno}: unknown label kind {kind!r}")
            if split not in ("train", "test"):
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            if kind == KIND_FULL and mask == "-":
                raise DataError(f"{path}:{lineno}: fully labelled sample without a mask path")
            samples.append(
                LabelledSample(
                    image_path=Path(image_path),
                    kind=kind,
                    mask_path=None if mask == "-" else Path(mask),
                    split=split,
                    fold=None if fold == "-" else int(fold),
                )
            )
    if not samples:
        raise DataError(f"{path}: manifest is empty")
    return samples


# -- folds and regimes --------------------------------------------------------


def make_folds(
    samples: list[LabelledSample], k: int = 3, seed: int = 0
) -> list[tuple[list[LabelledSample], list[LabelledSample]]]:
    """Stratified k-fold partitions for datasets without a predefined split.

    Returns k (train, test) pairs; every sample lands in exactly one test
    fold and class fractions stay within one sample of the global ones.
    """
    if k > len(samples):
        raise DataError(f"cannot make {k} folds from {len(samples)} samples")
    rng = random.Random(seed)
    assignment: dict[Path, int] = {}
    for anomalous in (False, True):
        group = [s for s in samples if s.is_anomalous() == anomalous]
        rng.shuffle(group)
        for idx, s in enumerate(group):
            assignment[s.image_path] = idx % k
    folds = []
    for fold in range(k):
        train = [
            replace(s, split="train", fold=fold)
            for s in samples
            if assignment[s.image_path] != fold
        ]
        test = [
            replace(s, split="test", fold=fold)
            for s in samples
            if assignment[s.image_path] == fold
        ]
        folds.append((train, test))
    return folds


def apply_regime(
    samples: list[LabelledSample],
    regime: str,
    mixed_plan: MixedPlan | None = None,
) -> list[LabelledSample]:
    """Training view under a supervision regime; the test split is untouched.

    unsupervised: anomalous training samples are dropped entirely.
    weak:         anomalous training samples keep only image-level labels.
    mixed:        a plan-selected subset keeps masks, the rest degrade to weak.
    full:         unchanged.
    """
    if regime not in ("unsupervised", "weak", "mixed", "full"):
        raise ConfigError(f"regime: unknown regime {regime!r}")
    if regime == "mixed" and mixed_plan is None:
        raise ConfigError("regime 'mixed' requires a MixedPlan (mixed.ratio or mixed.count)")

    test = [s for s in samples if s.split == "test"]
    train = [s for s in samples if s.split == "train"]

    if regime == "full":
        view = list(train)
    elif regime == "unsupervised":
        view = [s for s in train if not s.is_anomalous()]
    else:
        anomalous = [s for s in train if s.is_anomalous()]
        if regime == "mixed":
            keep = _select_full_subset(anomalous, mixed_plan)
        else:
            keep = set()
        view = []
        for s in train:
            if not s.is_anomalous() or s.image_path in keep:
                view.append(s)
            else:
                view.append(replace(s, kind=KIND_WEAK, mask_path=None))

    leak = {s.image_path for s in view} & {s.image_path for s in test}
    if leak:
        raise DataError(f"train/test leakage detected for {sorted(leak)[:3]}")
    return view + test


def _select_full_subset(anomalous: list[LabelledSample], plan: MixedPlan) -> set[Path]:
    labelled = [s for s in anomalous if s.kind == KIND_FULL]
    if plan.ratio is not None:
        n = round(plan.ratio * len(labelled))
    else:
        n = plan.count
        if n > len(labelled):
            raise DataError(
                f"mixed.count={n} exceeds the {len(labelled)} fully labelled anomalous samples"
            )
    rng = random.Random(plan.seed)
    chosen = rng.sample(sorted(s.image_path for s in labelled), n)
    return set(chosen)


# -- image decoding -----------------------------------------------------------

_IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
_IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)


def load_image(path: str | Path, size: tuple[int, int]) -> torch.Tensor:
    """Decode, resize (bilinear) and ImageNet-normalize to (3, H, W)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    tensor = torch.from_numpy(arr).permute(2, 0, 1)
    return (tensor - _IMAGENET_MEAN) / _IMAGENET_STD


def load_mask(path: str | Path | None, size: tuple[int, int]) -> torch.Tensor:
    """Binary (H, W) mask; any positive pixel counts as anomalous."""
    if path is None:
        return torch.zeros(size, dtype=torch.bool)
    path = Path(path)
    if not path.is_file():
        raise DataError(f"mask not found: {path}")
    with Image.open(path) as img:
        gray = img.convert("L").resize((size[1], size[0]), Image.NEAREST)
    return torch.from_numpy(np.asarray(gray) > 0)


def mask_to_feature_grid(mask: torch.Tensor, grid_size: tuple[int, int]) -> torch.Tensor:
    """Image-resolution mask -> feature-resolution mask by max-pooling.

    A feature cell is anomalous if any image pixel it covers is.
    """
    batched = mask if mask.ndim == 3 else mask.unsqueeze(0)
    pooled = torch.nn.functional.adaptive_max_pool2d(
        batched.unsqueeze(1).float(), grid_size
    ).squeeze(1)
    out = pooled > 0
    return out if mask.ndim == 3 else out.squeeze(0)
