"""Frozen convolutional feature extractor and image preprocessing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .archive import ArchiveError, load_archive, save_archive
from .features import FeatureSet, Provenance

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class BackboneSpec:
    name: str = "tiny"
    input_size: int = 256
    scale_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    scale_strides: list[int] = field(default_factory=lambda: [4, 8, 16])
    weights_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.scale_channels = [int(c) for c in self.scale_channels]
        self.scale_strides = [int(s) for s in self.scale_strides]
        if len(self.scale_channels) != len(self.scale_strides):
            raise ValueError("scale_channels and scale_strides must have equal length")
        if any(b <= a for a, b in zip(self.scale_strides, self.scale_strides[1:])):
            raise ValueError(f"scale_strides must be strictly increasing: {self.scale_strides}")
        for s in self.scale_strides:
            if self.input_size % s:
                raise ValueError(f"input_size {self.input_size} is not divisible by stride {s}")

    @classmethod
    def builtin(cls, name: str, input_size: int = 256, **kw) -> "BackboneSpec":
        if name == "tiny":
            return cls(name, input_size, [16, 32, 64], [4, 8, 16], **kw)
        if name == "wide-residual-50-style":
            return cls(name, input_size, [256, 512, 1024], [4, 8, 16], **kw)
        raise ValueError(f"unknown backbone {name!r}; expected 'tiny' or 'wide-residual-50-style'")

    @property
    def num_scales(self) -> int:
        return len(self.scale_channels)

    @property
    def scale_shapes(self) -> list[tuple[int, int, int]]:
        return [(c, self.input_size // s, self.input_size // s)
                for c, s in zip(self.scale_channels, self.scale_strides)]

    @property
    def coding_dim(self) -> int:
        return sum(self.scale_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        payload = self.to_dict()
        if self.weights_path:
            payload["weights_path"] = _file_digest(self.weights_path)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _conv(cin, cout, stride):
    # reflect padding keeps border features close to interior ones
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, padding_mode="reflect"), nn.ReLU(inplace=True))


class _TinyTrunk(nn.Module):
    def __init__(self, channels):
        super().__init__()
        c1, c2, c3 = channels
        self.stage1 = nn.Sequential(_conv(3, c1, 2), _conv(c1, c1, 2), _conv(c1, c1, 1))
        self.stage2 = nn.Sequential(_conv(c1, c2, 2), _conv(c2, c2, 1))
        self.stage3 = nn.Sequential(_conv(c2, c3, 2), _conv(c3, c3, 1))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        return [f1, f2, self.stage3(f2)]


class _WideResNetTrunk(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import wide_resnet50_2

        net = wide_resnet50_2(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3 = net.layer1, net.layer2, net.layer3

    def forward(self, x):
        f1 = self.layer1(self.stem(x))
        f2 = self.layer2(f1)
        return [f1, f2, self.layer3(f2)]


class Backbone(nn.Module):
    """Frozen extractor returning the first three stage outputs."""

    def __init__(self, spec: BackboneSpec, trunk: nn.Module):
        super().__init__()
        self.spec = spec
        self.trunk = trunk
        self.freeze()

    def freeze(self) -> None:
        self.trunk.eval()
        for p in self.trunk.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        # stays in inference mode regardless of the parent module's mode
        return super().train(False)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.trunk(images)


def load_backbone(spec: BackboneSpec) -> Backbone:
    if spec.name == "tiny":
        if len(spec.scale_channels) != 3 or spec.scale_strides != [4, 8, 16]:
            raise ValueError("the tiny trunk has three scales at strides 4/8/16")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            trunk = _TinyTrunk(spec.scale_channels)
    elif spec.name == "wide-residual-50-style":
        if spec.scale_channels != [256, 512, 1024] or spec.scale_strides != [4, 8, 16]:
            raise ValueError("wide-residual-50-style has channels 256/512/1024 and strides 4/8/16")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            trunk = _WideResNetTrunk()
    else:
        raise ValueError(f"unknown backbone {spec.name!r}")

    if spec.weights_path:
        if not Path(spec.weights_path).is_file():
            raise ArchiveError(f"backbone weights not found: {spec.weights_path}")
        tensors, _ = load_archive(spec.weights_path, kind="backbone")
        own = trunk.state_dict()
        for name, ref in own.items():
            got = tensors.get(name)
            if got is None:
                raise ArchiveError(f"backbone checkpoint is missing tensor {name!r}")
            if tuple(got.shape) != tuple(ref.shape):
                raise ArchiveError(
                    f"backbone tensor {name!r} has shape {tuple(got.shape)}, expected {tuple(ref.shape)}"
                )
        trunk.load_state_dict({k: tensors[k] for k in own})
    return Backbone(spec, trunk)


def save_backbone(backbone: Backbone, path) -> None:
    save_archive(path, backbone.trunk.state_dict(), kind="backbone", meta={"spec": backbone.spec.to_dict()})


def extract_features(backbone: Backbone, image: torch.Tensor) -> FeatureSet:
    """Run the frozen extractor on a normalized ``3xSxS`` image or ``Bx3xSxS`` batch."""
    size = backbone.spec.input_size
    squeeze = image.ndim == 3
    x = image.unsqueeze(0) if squeeze else image
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(f"expected image of shape 3x{size}x{size} (optionally batched), got {tuple(image.shape)}")
    param = next(backbone.parameters())
    with torch.no_grad():
        scales = backbone(x.to(dtype=param.dtype))
    return FeatureSet(scales, Provenance.INPUT)


def preprocess(image, input_size: int) -> torch.Tensor:
    """Resize an RGB image (PIL, path, or HxWx3 uint8 array) and apply ImageNet normalization."""
    if isinstance(image, (str, Path)):
        image = Image.open(image)
    if isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    image = image.convert("RGB")
    if image.size != (input_size, input_size):
        image = image.resize((input_size, input_size), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGENET_MEAN, dtype=np.float32)) / np.array(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())
