"""Frozen feature extraction and the trainable feature adaptor.

An input image runs through a frozen pretrained convolutional network;
selected stage outputs are bilinearly upscaled to twice the largest
stage resolution, concatenated along channels, and smoothed with a 3x3
local average so every location carries neighbourhood context.  A 1x1
linear adaptor then projects those features into the latent space used
by the segmentation head.
"""

from __future__ import annotations

import os
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

# Stage output channel counts for the supported torchvision backbones.
TORCHVISION_BACKBONES = {
    "wide_resnet50": "wide_resnet50_2",
    "wide_resnet101": "wide_resnet101_2",
    "resnet18": "resnet18",
    "resnet34": "resnet34",
    "resnet50": "resnet50",
    "resnet101": "resnet101",
}

# Input dims must be divisible by this (and >= MIN_IMAGE_SIZE) so that the
# stride-8/16 stages stay cleanly aligned.  All supported dataset
# resolutions (256x256, 640x232, 192x320, 144x144) satisfy it.
IMAGE_STRIDE = 8
MIN_IMAGE_SIZE = 32

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def validate_image_dims(height: int, width: int) -> None:
    if height % IMAGE_STRIDE or width % IMAGE_STRIDE:
        raise ValueError(
            f"image dims must be multiples of {IMAGE_STRIDE}, got {height}x{width}"
        )
    if height < MIN_IMAGE_SIZE or width < MIN_IMAGE_SIZE:
        raise ValueError(
            f"image dims must be at least {MIN_IMAGE_SIZE}, got {height}x{width}"
        )


class ToyBackbone(nn.Module):
    """Small fixed-seed random extractor for offline tests and demos.

    Mirrors the stage/stride layout of the resnet family (stage l at
    stride 2**(l+1)) but is light enough to train heads on a CPU.  Group
    normalisation keeps feature magnitudes comparable across inputs even
    though the weights are random.
    """

    stage_channels = {1: 24, 2: 32, 3: 64, 4: 96}

    def __init__(self, init_seed: int = 1234):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(init_seed)
        ch = self.stage_channels

        def block(cin, cout, stride):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                nn.GroupNorm(4, cout),
                nn.ReLU(inplace=True),
            )

        self.stem = nn.Sequential(block(3, 16, 2), block(16, ch[1], 2))
        self.layer1 = block(ch[1], ch[1], 1)
        self.layer2 = nn.Sequential(block(ch[1], ch[2], 2), block(ch[2], ch[2], 1))
        self.layer3 = nn.Sequential(block(ch[2], ch[3], 2), block(ch[3], ch[3], 1))
        self.layer4 = block(ch[3], ch[4], 2)
        torch.random.set_rng_state(gen_state)

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        h = self.stem(x)
        out = {}
        h = self.layer1(h)
        out[1] = h
        h = self.layer2(h)
        out[2] = h
        h = self.layer3(h)
        out[3] = h
        out[4] = self.layer4(h)
        return out


class ResnetStages(nn.Module):
    """Wraps a torchvision resnet and exposes its four stage outputs."""

    def __init__(self, net):
        super().__init__()
        self.conv1, self.bn1, self.relu = net.conv1, net.bn1, net.relu
        self.maxpool = net.maxpool
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        h = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        out = {}
        h = self.layer1(h)
        out[1] = h
        h = self.layer2(h)
        out[2] = h
        h = self.layer3(h)
        out[3] = h
        out[4] = self.layer4(h)
        return out


def _build_torchvision(name: str, weights_path: str | None, pretrained: bool) -> ResnetStages:
    import torchvision.models as tvm

    ctor = getattr(tvm, TORCHVISION_BACKBONES[name])
    if weights_path is not None:
        net = ctor(weights=None)
        path = Path(weights_path)
        if not path.is_file():
            raise ConfigError(f"backbone.weights_path: weight file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        except (RuntimeError, ValueError, KeyError) as exc:
            raise ConfigError(f"backbone.weights_path: cannot load {path}: {exc}") from exc
    elif pretrained:
        cache = os.environ.get("UNISURF_CACHE")
        if cache:
            torch.hub.set_dir(str(Path(cache) / "torch_hub"))
        try:
            net = ctor(weights="IMAGENET1K_V1")
        except Exception as exc:
            raise ConfigError(
                f"backbone.name={name!r}: pretrained weights unavailable "
                f"(set backbone.weights_path or backbone.pretrained=false): {exc}"
            ) from exc
    else:
        net = ctor(weights=None)
    return ResnetStages(net)


class FeatureExtractor(nn.Module):
    """Frozen multi-stage extractor returning the configured layer maps."""

    def __init__(
        self,
        name: str = "wide_resnet50",
        layers: list[int] | tuple[int, ...] = (2, 3),
        weights_path: str | None = None,
        pretrained: bool = True,
        init_seed: int = 1234,
    ):
        super().__init__()
        if not layers:
            raise ConfigError("backbone.layers: must name at least one layer")
        self.layers = sorted(int(l) for l in layers)
        if self.layers[0] < 1 or self.layers[-1] > 4:
            raise ConfigError(f"backbone.layers: indices must lie in 1..4, got {layers}")
        self.name = name
        if name == "toy":
            self.stages = ToyBackbone(init_seed=init_seed)
            channels = ToyBackbone.stage_channels
        elif name in TORCHVISION_BACKBONES:
            self.stages = _build_torchvision(name, weights_path, pretrained)
            with torch.inference_mode():
                self.stages.eval()
                probe = self.stages(torch.zeros(1, 3, 64, 64))
            channels = {l: int(t.shape[1]) for l, t in probe.items()}
        else:
            known = ["toy"] + sorted(TORCHVISION_BACKBONES)
            raise ConfigError(f"backbone.name: unknown backbone {name!r}; known: {known}")
        self.layer_channels = [channels[l] for l in self.layers]
        self.out_channels = sum(self.layer_channels)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # the extractor is frozen: keep eval semantics (fixed norm stats)
        return super().train(False)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.extract_layers(images)

    def extract_layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer feature grids for a normalized (B, 3, H, W) image batch."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        validate_image_dims(images.shape[2], images.shape[3])
        if not torch.isfinite(images).all():
            raise ValueError("image batch contains non-finite values")
        with torch.no_grad():
            stage_out = self.stages(images)
        return [stage_out[l] for l in self.layers]


def upscale_concat(layer_grids: list[torch.Tensor], double: bool = True) -> torch.Tensor:
    """Resize every grid to (2*H0, 2*W0) bilinearly and concatenate channels.

    (H0, W0) is the resolution of the largest grid.  With ``double=False``
    the target stays at (H0, W0), which disables the upscaling step.
    """
    if not layer_grids:
        raise ValueError("upscale_concat got an empty grid sequence")
    h0 = max(g.shape[-2] for g in layer_grids)
    w0 = max(g.shape[-1] for g in layer_grids)
    target = (2 * h0, 2 * w0) if double else (h0, w0)
    resized = [
        g if g.shape[-2:] == target
        else F.interpolate(g, size=target, mode="bilinear", align_corners=False)
        for g in layer_grids
    ]
    return torch.cat(resized, dim=1)


def neighborhood_pool(grid: torch.Tensor) -> torch.Tensor:
    """3x3 mean filter, stride 1, zero padding (spatial dims preserved)."""
    return F.avg_pool2d(grid, kernel_size=3, stride=1, padding=1, count_include_pad=True)


class FeatureAdaptor(nn.Module):
    """Channel-preserving 1x1 linear projection applied at every location.

    Initialised as identity plus a small Gaussian perturbation so training
    starts from the pretrained feature geometry.
    """

    def __init__(self, channels: int, init_noise_std: float = 1e-3):
        super().__init__()
        self.proj = nn.Conv2d(channels, channels, kernel_size=1, bias=True)
        with torch.no_grad():
            eye = torch.eye(channels).view(channels, channels, 1, 1)
            noise = torch.randn_like(self.proj.weight) * init_noise_std
            self.proj.weight.copy_(eye + noise)
            self.proj.bias.zero_()

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.proj(f)
