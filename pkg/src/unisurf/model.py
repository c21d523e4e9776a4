"""Full detector: frozen extractor, adaptor, heads, inference, checkpoints.

During training the features are perturbed with synthetic anomalies
before entering the heads; at inference the anomaly-generation machinery
is skipped entirely and the unperturbed features flow straight through,
so prediction is deterministic and never consults any random stream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .backbone import FeatureAdaptor, FeatureExtractor, neighborhood_pool, upscale_concat
from .config import RunConfig
from .errors import CheckpointError
from .heads import ClassificationHead, SegmentationHead, postprocess


@dataclass
class Prediction:
    """Anomaly map at input resolution (values in [0, 1]) plus scalar score."""

    anomaly_map: torch.Tensor
    score: torch.Tensor


class DefectModel(nn.Module):
    """Surface-defect detector operating on frozen pretrained features."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.backbone
        self.extractor = FeatureExtractor(
            name=b.name,
            layers=b.layers,
            weights_path=b.weights_path,
            pretrained=b.pretrained,
            init_seed=b.init_seed,
        )
        channels = self.extractor.out_channels
        self.adaptor = FeatureAdaptor(channels)
        self.seg_head = SegmentationHead(channels)
        self.cls_head = ClassificationHead(
            channels, width=cfg.heads.cls_width, variant=cfg.ablate.cls_head
        )
        self.feature_channels = channels

    # -- feature pipeline --------------------------------------------------

    def compute_features(self, images: torch.Tensor) -> torch.Tensor:
        """Images -> pooled feature map F (frozen path, no gradients)."""
        grids = self.extractor.extract_layers(images)
        with torch.no_grad():
            stacked = upscale_concat(grids, double=self.cfg.ablate.upscale)
            pooled = neighborhood_pool(stacked)
        h0 = max(g.shape[-2] for g in grids)
        w0 = max(g.shape[-1] for g in grids)
        expect = (2 * h0, 2 * w0) if self.cfg.ablate.upscale else (h0, w0)
        assert pooled.shape[-2:] == expect, "feature pipeline produced unexpected dims"
        return pooled

    def adapt(self, f: torch.Tensor) -> torch.Tensor:
        return self.adaptor(f)

    def forward_heads(
        self,
        pf: torch.Tensor,
        pa: torch.Tensor,
        stop_map_gradient: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Perturbed (or clean) features -> (map logits, score logits)."""
        seg_logits = self.seg_head(pa)
        score_logits = self.cls_head(pf, seg_logits, stop_map_gradient=stop_map_gradient)
        return seg_logits, score_logits

    def trainable_parameters(self) -> dict[str, list[nn.Parameter]]:
        heads = list(self.seg_head.parameters()) + list(self.cls_head.parameters())
        return {"heads": heads, "adaptor": list(self.adaptor.parameters())}

    # -- inference ---------------------------------------------------------

    @torch.inference_mode()
    def predict(self, images: torch.Tensor) -> Prediction:
        """Anomaly map and score for a normalized image batch.

        Runs in eval mode on the unperturbed features; bitwise
        deterministic and independent of any random state.
        """
        was_training = self.training
        self.eval()
        try:
            f = self.compute_features(images)
            a = self.adapt(f)
            seg_logits, score_logits = self.forward_heads(f, a)
            maps = postprocess(seg_logits, images.shape[-2:])
            scores = torch.sigmoid(score_logits)
        finally:
            self.train(was_training)
        return Prediction(anomaly_map=maps, score=scores)

    # -- checkpointing -----------------------------------------------------

    def parameter_manifest(self) -> dict[str, list[int]]:
        return {name: list(p.shape) for name, p in self.state_dict().items()}

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": "unisurf-checkpoint-v1",
            "manifest": {
                "parameters": self.parameter_manifest(),
                "config_hash": self.cfg.config_hash(),
            },
            "config": self.cfg.resolved_dict(),
            "state_dict": self.state_dict(),
        }
        torch.save(payload, path)
        return path

    def load_checkpoint(self, path: str | Path) -> None:
        payload = _read_checkpoint(path)
        manifest = payload["manifest"]
        if manifest["config_hash"] != self.cfg.config_hash():
            raise CheckpointError(
                f"checkpoint {path} was trained under a different config "
                f"(hash {manifest['config_hash']} != {self.cfg.config_hash()})"
            )
        expected = self.parameter_manifest()
        if manifest["parameters"] != expected:
            missing = set(expected) ^ set(manifest["parameters"])
            raise CheckpointError(
                f"checkpoint {path} parameter manifest does not match the model"
                + (f" (differing names: {sorted(missing)[:5]})" if missing else " (shape mismatch)")
            )
        self.load_state_dict(payload["state_dict"])


def _read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != "unisurf-checkpoint-v1":
        raise CheckpointError(f"{path} is not a unisurf checkpoint")
    return payload


def load_model(path: str | Path) -> DefectModel:
    """Rebuild a model from the config embedded in a checkpoint."""
    from .config import config_from_dict

    payload = _read_checkpoint(path)
    cfg = config_from_dict(payload["config"])
    model = DefectModel(cfg)
    model.load_checkpoint(path)
    model.eval()
    return model


def checkpoint_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]
