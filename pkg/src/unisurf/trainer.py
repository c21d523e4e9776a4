"""Training loop: optimiser, schedule, balancing, augmentation, fitting.

Heads and adaptor train with decoupled weight decay at separate learning
rates; the extractor never trains.  Every epoch is balanced to equal
normal/anomalous counts by oversampling the minority class.  In the
unsupervised regime the classification loss is stopped from reaching the
segmentation head; in supervised regimes gradients are clipped to norm 1
and flip augmentation is active.  The checkpoint always comes from the
final epoch; there is no early stopping or best-epoch selection.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import RunConfig
from .datasets import (
    KIND_NORMAL,
    LabelledSample,
    load_image,
    load_mask,
    mask_to_feature_grid,
)
from .errors import ConfigError, TrainingAbort
from .losses import distance_weights, gamma_gates, total_loss
from .model import DefectModel
from .synthgen import duplicate_and_perturb


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labelled parts."""
    blob = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") % (2**63)


def build_optimizer(model: DefectModel, cfg: RunConfig) -> torch.optim.AdamW:
    """AdamW over {heads, adaptor} parameter groups; backbone excluded."""
    groups = model.trainable_parameters()
    if not groups["heads"] or not groups["adaptor"]:
        raise ConfigError("optimizer: empty parameter group (heads or adaptor)")
    frozen = {id(p) for p in model.extractor.parameters()}
    for name, params in groups.items():
        overlap = [p for p in params if id(p) in frozen]
        if overlap:
            raise ConfigError(f"optimizer: backbone parameters leaked into group {name!r}")
    return torch.optim.AdamW(
        [
            {"params": groups["heads"], "lr": cfg.train.lr_heads},
            {"params": groups["adaptor"], "lr": cfg.train.lr_adaptor},
        ],
        weight_decay=cfg.train.weight_decay,
    )


def lr_at_epoch(cfg: RunConfig, epoch: int) -> tuple[float, float]:
    """(heads, adaptor) learning rates for a 0-based epoch index."""
    decays = sum(1 for m in cfg.train.lr_decay_epochs if m <= epoch)
    factor = cfg.train.lr_decay_factor**decays
    return cfg.train.lr_heads * factor, cfg.train.lr_adaptor * factor


def _set_epoch_lr(optimizer: torch.optim.Optimizer, cfg: RunConfig, epoch: int) -> float:
    lrs = lr_at_epoch(cfg, epoch)
    for group, lr in zip(optimizer.param_groups, lrs):
        group["lr"] = lr
    return lrs[0]


def balance_epoch(samples: list[LabelledSample], seed: int) -> list[LabelledSample]:
    """Epoch plan with equal normal/anomalous counts (oversampled minority)."""
    if not samples:
        raise ConfigError("balance_epoch: empty training view")
    rng = random.Random(seed)
    normal = [s for s in samples if not s.is_anomalous()]
    anomalous = [s for s in samples if s.is_anomalous()]
    if not anomalous:
        plan = list(normal)
    elif not normal:
        plan = list(anomalous)
    else:
        n = max(len(normal), len(anomalous))
        plan = _oversample(normal, n, rng) + _oversample(anomalous, n, rng)
    rng.shuffle(plan)
    return plan


def _oversample(group: list[LabelledSample], n: int, rng: random.Random) -> list[LabelledSample]:
    if len(group) == n:
        return list(group)
    return list(group) + [rng.choice(group) for _ in range(n - len(group))]


AUGMENTED_REGIMES = ("weak", "mixed", "full")


def flip_decisions(regime: str, rng: random.Random) -> tuple[bool, bool]:
    """Horizontal/vertical flip coin flips; identity outside supervised regimes."""
    if regime not in AUGMENTED_REGIMES:
        return False, False
    return rng.random() < 0.5, rng.random() < 0.5


def apply_flips(
    image: torch.Tensor, mask: torch.Tensor | None, flip_h: bool, flip_v: bool
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Flip image and mask jointly (image (..., H, W), mask (H, W))."""
    if flip_h:
        image = image.flip(-1)
        mask = mask.flip(-1) if mask is not None else None
    if flip_v:
        image = image.flip(-2)
        mask = mask.flip(-2) if mask is not None else None
    return image, mask


def augment(
    image: torch.Tensor,
    mask: torch.Tensor | None,
    regime: str,
    rng: random.Random,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Joint flip augmentation, active only in supervised regimes."""
    flip_h, flip_v = flip_decisions(regime, rng)
    return apply_flips(image, mask, flip_h, flip_v)


class FeatureBatcher:
    """Loads images, applies flips and extracts (optionally cached) features.

    The extractor is frozen, so features are a pure function of
    (sample path, flip combination) and can be cached across epochs.
    """

    def __init__(self, model: DefectModel, cfg: RunConfig):
        self.model = model
        self.cfg = cfg
        self.size = cfg.image_size()
        self.cache: dict[tuple, tuple[torch.Tensor, torch.Tensor]] | None = (
            {} if cfg.train.cache_features else None
        )

    def _compute(self, sample: LabelledSample, flips: tuple[bool, bool]):
        image = load_image(sample.image_path, self.size)
        mask = load_mask(sample.mask_path, self.size)
        image, mask = apply_flips(image, mask, *flips)
        f = self.model.compute_features(image.unsqueeze(0))
        m = mask_to_feature_grid(mask, f.shape[-2:])
        return f.squeeze(0), m

    def batch(
        self, samples: list[LabelledSample], flips: list[tuple[bool, bool]]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        feats, masks = [], []
        for sample, flip in zip(samples, flips):
            key = (str(sample.image_path), flip)
            if self.cache is not None and key in self.cache:
                f, m = self.cache[key]
            else:
                f, m = self._compute(sample, flip)
                if self.cache is not None:
                    self.cache[key] = (f, m)
            feats.append(f)
            masks.append(m)
        return torch.stack(feats), torch.stack(masks)


def train_step(
    model: DefectModel,
    optimizer: torch.optim.Optimizer,
    features: torch.Tensor,
    gt_masks: torch.Tensor,
    kinds: list[str],
    cfg: RunConfig,
    step_seed: int,
) -> dict[str, float]:
    """One optimisation step over an already-extracted feature batch."""
    model.train()
    adapted = model.adapt(features)
    anomalous = torch.tensor([k != KIND_NORMAL for k in kinds])

    batch = duplicate_and_perturb(
        features,
        adapted,
        gt_masks,
        anomalous,
        sigma=cfg.synth.sigma,
        perlin_threshold=cfg.perlin_threshold(),
        seed=step_seed,
        strategy=cfg.ablate.anomaly_strategy,
        overlap_allowed=cfg.ablate.overlap_allowed,
    )

    stop_gate = cfg.regime == "unsupervised"
    seg_logits, score_logits = model.forward_heads(
        batch.pf, batch.pa, stop_map_gradient=stop_gate
    )

    gates = gamma_gates(kinds + kinds)
    gt_dup = torch.cat([gt_masks, gt_masks])
    weights = None
    if cfg.loss.weighting_enabled and bool(gt_dup.any()):
        weights = distance_weights(gt_dup, w_max=cfg.loss.w_max)

    losses = total_loss(
        seg_logits,
        score_logits,
        batch.mask,
        batch.y,
        gates,
        th=cfg.loss.th,
        focal_alpha=cfg.loss.focal_alpha,
        focal_gamma=cfg.loss.focal_gamma,
        weights=weights,
    )
    if not torch.isfinite(losses["total"]):
        raise TrainingAbort(f"non-finite loss: {losses['total'].item()}")

    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    if cfg.regime != "unsupervised":
        trainable = [p for g in optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(trainable, cfg.train.grad_clip_norm)
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


@dataclass
class FitResult:
    checkpoint_path: Path
    log_path: Path
    final_losses: dict


def fit(model: DefectModel, samples: list[LabelledSample], cfg: RunConfig, out_dir: str | Path) -> FitResult:
    """Run the full schedule over a regime view and persist the final model.

    Writes ``train_log.jsonl`` (one record per epoch) and
    ``checkpoint.pt`` from the final epoch.  A non-finite loss aborts the
    run with a reproducibility dump instead of being skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = [s for s in samples if s.split == "train"]
    if not train:
        raise ConfigError("fit: the training view is empty")

    optimizer = build_optimizer(model, cfg)
    batcher = FeatureBatcher(model, cfg)
    synth_seed = cfg.synth.seed if cfg.synth.seed is not None else cfg.seed
    log_path = out_dir / "train_log.jsonl"
    epoch_losses: dict[str, float] = {}

    with open(log_path, "w") as log:
        for epoch in range(cfg.train.epochs):
            heads_lr = _set_epoch_lr(optimizer, cfg, epoch)
            plan = balance_epoch(train, derive_seed(cfg.seed, "plan", epoch))
            aug_rng = random.Random(derive_seed(cfg.seed, "augment", epoch))
            sums = {"total": 0.0, "seg": 0.0, "cls": 0.0}
            n_batches = 0
            for start in range(0, len(plan), cfg.train.batch_size):
                chunk = plan[start : start + cfg.train.batch_size]
                flips = [flip_decisions(cfg.regime, aug_rng) for _ in chunk]
                feats, gt_masks = batcher.batch(chunk, flips)
                step_seed = derive_seed(synth_seed, "synth", epoch, start)
                try:
                    losses = train_step(
                        model, optimizer, feats, gt_masks, [s.kind for s in chunk], cfg, step_seed
                    )
                except TrainingAbort as abort:
                    dump = _write_abort_dump(out_dir, cfg, epoch, chunk, str(abort))
                    raise TrainingAbort(f"{abort} (diagnostics: {dump})", dump) from None
                for k in sums:
                    sums[k] += losses[k]
                n_batches += 1
            epoch_losses = {k: v / max(n_batches, 1) for k, v in sums.items()}
            record = {
                "epoch": epoch,
                "l_seg": epoch_losses["seg"],
                "l_cls": epoch_losses["cls"],
                "l_total": epoch_losses["total"],
                "lr": heads_lr,
            }
            log.write(json.dumps(record) + "\n")
            log.flush()

    checkpoint_path = model.save_checkpoint(out_dir / "checkpoint.pt")
    return FitResult(checkpoint_path=checkpoint_path, log_path=log_path, final_losses=epoch_losses)


def _write_abort_dump(
    out_dir: Path, cfg: RunConfig, epoch: int, chunk: list[LabelledSample], reason: str
) -> Path:
    dump_path = out_dir / "abort_dump.json"
    payload = {
        "reason": reason,
        "epoch": epoch,
        "seed": cfg.seed,
        "batch_ids": [str(s.image_path) for s in chunk],
        "config": cfg.resolved_dict(),
    }
    with open(dump_path, "w") as fh:
        json.dump(payload, fh, indent=2)
    return dump_path
