"""
Dual-view ResNet-12 backbone.

The first `shared_depth` residual blocks form a trunk applied once per image;
the remaining blocks exist twice, once per view. Feature maps keep their
spatial layout (no global pooling) and are returned channel-last
[batch, h, w, m] so that flattening is row-major in (p, q, channel) order.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Protocol

import torch
import torch.nn.functional as F
from torch import nn

from ..domain import BackboneConfig, Branch
from ..exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1
# DropBlock sits after the last two blocks
DROPBLOCK_FROM = 2


@dataclass
class DualViewFeatures:
    global_map: torch.Tensor
    local_map: torch.Tensor

    def __post_init__(self) -> None:
        if self.global_map.shape != self.local_map.shape:
            raise ShapeMismatchError(
                f"View maps differ: {tuple(self.global_map.shape)} vs {tuple(self.local_map.shape)}"
            )


class DropBlock(nn.Module):
    """Zero out contiguous square regions of a feature map while training."""

    def __init__(self, block_size: int) -> None:
        super().__init__()
        self.block_size = block_size
        self.drop_rate = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.drop_rate <= 0.0:
            return x
        batch, _, height, width = x.shape
        size = min(self.block_size, height, width)
        valid = (height - size + 1) * (width - size + 1)
        gamma = self.drop_rate / size**2 * (height * width) / valid
        seeds = (torch.rand(batch, 1, height, width, device=x.device) < gamma).to(x.dtype)
        dropped = F.max_pool2d(seeds, kernel_size=size, stride=1, padding=size // 2)
        if size % 2 == 0:
            dropped = dropped[:, :, :height, :width]
        keep = 1.0 - dropped
        return x * keep * (keep.numel() / keep.sum().clamp_min(1.0))


class ResidualBlock(nn.Module):
    """Three 3x3 conv-BN layers with a 1x1 projected shortcut, then 2x max-pool."""

    def __init__(self, in_channels: int, out_channels: int, dropblock_size: Optional[int] = None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.conv3 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        self.pool = nn.MaxPool2d(2)
        self.dropblock = DropBlock(dropblock_size) if dropblock_size else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.leaky_relu(self.bn1(self.conv1(x)), LEAKY_SLOPE)
        out = F.leaky_relu(self.bn2(self.conv2(out)), LEAKY_SLOPE)
        out = self.bn3(self.conv3(out))
        out = F.leaky_relu(out + self.shortcut(x), LEAKY_SLOPE)
        out = self.pool(out)
        if self.dropblock is not None:
            out = self.dropblock(out)
        return out


class GlobalClassifier(nn.Module):
    """Point-wise linear classifier over base classes, realized as a 1x1 convolution."""

    def __init__(self, feature_dim: int, num_classes: int, bias: bool = True) -> None:
        super().__init__()
        self.conv = nn.Conv2d(feature_dim, num_classes, kernel_size=1, bias=bias)

    @property
    def feature_dim(self) -> int:
        return self.conv.in_channels

    @property
    def num_classes(self) -> int:
        return self.conv.out_channels


class Embedder(Protocol):
    """What meta-testing needs from a model: one branch's channel-last maps."""

    def embed(self, images: torch.Tensor, branch: Branch) -> torch.Tensor: ...


def _blocks(config: BackboneConfig, start: int) -> list[ResidualBlock]:
    channels = config.channels
    blocks = []
    for index in range(start, len(channels)):
        in_channels = 3 if index == 0 else channels[index - 1]
        dropblock = (
            config.dropblock_size
            if config.dropblock_enabled and index >= DROPBLOCK_FROM
            else None
        )
        blocks.append(ResidualBlock(in_channels, channels[index], dropblock))
    return blocks


class BinocularNet(nn.Module):
    def __init__(self, config: BackboneConfig, num_classes: Optional[int] = None) -> None:
        super().__init__()
        self.config = config
        shared = _blocks(config, 0)[: config.shared_depth]
        self.trunk = nn.Sequential(*shared)
        self.global_head = nn.Sequential(*_blocks(config, config.shared_depth))
        self.local_head = nn.Sequential(*_blocks(config, config.shared_depth))
        self.classifier = (
            GlobalClassifier(config.feature_dim, num_classes) if num_classes else None
        )

    def _check_input(self, images: torch.Tensor, check_size: bool) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeMismatchError(
                f"Expected images shaped [batch, 3, H, W], got {tuple(images.shape)}"
            )
        size = self.config.input_size
        if check_size and tuple(images.shape[-2:]) != (size, size):
            raise ShapeMismatchError(
                f"Model expects {size}x{size} inputs, got {tuple(images.shape[-2:])}"
            )

    def forward(self, images: torch.Tensor, check_size: bool = True) -> DualViewFeatures:
        self._check_input(images, check_size)
        shared = self.trunk(images)
        global_map = self.global_head(shared).permute(0, 2, 3, 1)
        local_map = self.local_head(shared).permute(0, 2, 3, 1)
        return DualViewFeatures(global_map, local_map)

    def embed(self, images: torch.Tensor, branch: Branch) -> torch.Tensor:
        """Channel-last map of one view. Input size is not pinned, the network is fully convolutional."""
        self._check_input(images, check_size=False)
        if branch == "global":
            head = self.global_head
        elif branch == "local":
            head = self.local_head
        else:
            raise ValueError(f"embed needs a single branch, got {branch!r}")
        return head(self.trunk(images)).permute(0, 2, 3, 1)

    def set_drop_progress(self, progress: float) -> None:
        """Ramp DropBlock's drop rate linearly from 0 to `drop_rate` over training."""
        rate = self.config.drop_rate * min(max(progress, 0.0), 1.0)
        for module in self.modules():
            if isinstance(module, DropBlock):
                module.drop_rate = rate


def classify_pointwise(global_map: torch.Tensor, classifier: GlobalClassifier) -> torch.Tensor:
    """[batch, h, w, m] -> pre-softmax scores [batch, h, w, C_base]."""
    if global_map.dim() != 4 or global_map.shape[-1] != classifier.feature_dim:
        raise ShapeMismatchError(
            f"Classifier expects {classifier.feature_dim} channels, map is {tuple(global_map.shape)}"
        )
    scores = classifier.conv(global_map.permute(0, 3, 1, 2))
    return scores.permute(0, 2, 3, 1)


def flatten_features(feature_map: torch.Tensor) -> torch.Tensor:
    return feature_map.reshape(feature_map.shape[0], -1)


def _initialize(model: nn.Module) -> None:
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            nn.init.kaiming_normal_(
                module.weight, a=LEAKY_SLOPE, mode="fan_in", nonlinearity="leaky_relu"
            )
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


def build_model(config: BackboneConfig, num_classes: Optional[int] = None) -> BinocularNet:
    """Construct and initialize a network; the same config always yields the same weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = BinocularNet(config, num_classes)
        _initialize(model)
    logger.debug(
        f"Built backbone channels={config.channels} shared_depth={config.shared_depth} "
        f"classes={num_classes}"
    )
    return model


def parameter_count(config: BackboneConfig, num_classes: Optional[int] = None) -> int:
    """Trainable scalars of the network (classifier included when `num_classes` is given)."""
    with torch.device("meta"):
        model = BinocularNet(config, num_classes)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
