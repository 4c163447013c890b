# models/unet.py
"""
Multi-task network: a 2D U-Net segmentation backbone with a patch
classification arm attached to the encoder bottleneck.

``create_model`` builds the detection network, ``create_prior_model`` the
shallower U-Net used for the continuity prior.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from core.domain import ProbabilityMap
from core.errors import ShapeMismatchError

logger = logging.getLogger(__name__)

EMBEDDING_SOURCES = ('out_nodes', 'fc256')


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    base_width: int = 16
    depth: int = 4
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    @property
    def bottleneck_channels(self) -> int:
        return self.base_width * 2 ** self.depth


@dataclass(frozen=True)
class ClassifierArmConfig:
    pool_blocks: int = 2
    fc_sizes: Tuple[int, int] = (1024, 256)
    out_nodes: int = 2
    embedding_source: str = 'out_nodes'
    pooled_side: int = 4

    def __post_init__(self):
        if self.pool_blocks != 2:
            raise ValueError(f"the classifier arm has exactly 2 pool blocks, got {self.pool_blocks}")
        if len(self.fc_sizes) != 2:
            raise ValueError(f"fc_sizes must hold two layer widths, got {self.fc_sizes}")
        if self.embedding_source not in EMBEDDING_SOURCES:
            raise ValueError(f"embedding_source must be one of {EMBEDDING_SOURCES}")

    @property
    def embedding_dim(self) -> int:
        return self.out_nodes if self.embedding_source == 'out_nodes' else self.fc_sizes[1]


def conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    """Two 3x3 convolutions, each followed by batch norm and ReLU."""
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class ClassifierArm(nn.Module):
    def __init__(self, in_channels: int, cfg: ClassifierArmConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.Sequential(*[
            nn.Sequential(nn.MaxPool2d(2), conv_block(in_channels, in_channels))
            for _ in range(cfg.pool_blocks)
        ])
        self.pool = nn.AdaptiveAvgPool2d(cfg.pooled_side)
        self.fc1 = nn.Linear(in_channels * cfg.pooled_side ** 2, cfg.fc_sizes[0])
        self.fc2 = nn.Linear(cfg.fc_sizes[0], cfg.fc_sizes[1])
        self.out = nn.Linear(cfg.fc_sizes[1], cfg.out_nodes)

    def forward(self, bottleneck: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.blocks(bottleneck)).flatten(1)
        x = F.relu(self.fc1(x))
        fc256 = self.fc2(x)
        if self.cfg.embedding_source == 'fc256':
            return fc256
        return self.out(F.relu(fc256))


class FiberNet(nn.Module):
    """U-Net (F_Seg) sharing its encoder with a classification arm (F_Class)."""

    def __init__(self, unet: UNetConfig = UNetConfig(), arm: ClassifierArmConfig = ClassifierArmConfig(),
                 with_classifier: bool = True):
        super().__init__()
        self.unet_config = unet
        self.arm_config = arm if with_classifier else None
        widths = [unet.base_width * 2 ** i for i in range(unet.depth + 1)]

        self.encoders = nn.ModuleList()
        in_ch = unet.in_channels
        for width in widths[:-1]:
            self.encoders.append(conv_block(in_ch, width))
            in_ch = width
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = conv_block(widths[-2], widths[-1])

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(unet.depth)):
            self.ups.append(nn.ConvTranspose2d(widths[level + 1], widths[level], kernel_size=2, stride=2))
            self.decoders.append(conv_block(widths[level] * 2, widths[level]))
        self.head = nn.Conv2d(widths[0], unet.out_channels, kernel_size=1)

        self.classifier = ClassifierArm(widths[-1], arm) if with_classifier else None

    def check_input(self, x: torch.Tensor, for_classifier: bool = False) -> None:
        if x.ndim != 4 or x.shape[1] != self.unet_config.in_channels:
            raise ShapeMismatchError(
                f"expected (B, {self.unet_config.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        divisor = self.unet_config.divisor
        h, w = x.shape[-2:]
        if h % divisor or w % divisor:
            raise ShapeMismatchError(f"patch side {h}x{w} must be divisible by {divisor}")
        if for_classifier and self.arm_config is not None and min(h, w) // divisor < 2 ** self.arm_config.pool_blocks:
            raise ShapeMismatchError(f"patch {h}x{w} is too small for the classifier arm")

    def encode(self, x: torch.Tensor) -> Tuple[List[torch.Tensor], torch.Tensor]:
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        return skips, self.bottleneck(x)

    def decode(self, skips: List[torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = decoder(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Segmentation logits (B, 1, H, W) and bottleneck features."""
        self.check_input(x)
        skips, bottleneck = self.encode(x)
        return self.decode(skips, bottleneck), bottleneck

    def segment(self, x: torch.Tensor) -> torch.Tensor:
        """Fiber probabilities (B, H, W)."""
        logits, _ = self(x)
        return torch.sigmoid(logits[:, 0])

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if self.classifier is None:
            raise RuntimeError("this network was built without a classifier arm")
        self.check_input(x, for_classifier=True)
        _, bottleneck = self.encode(x)
        return self.classifier(bottleneck)


def create_model(unet: UNetConfig = UNetConfig(), arm: ClassifierArmConfig = ClassifierArmConfig()) -> FiberNet:
    """Detection network with both arms."""
    model = FiberNet(unet, arm, with_classifier=True)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Created FiberNet depth={unet.depth} base_width={unet.base_width} ({n_params:,} parameters)")
    return model


def create_prior_model(base_width: int = 16, depth: int = 3, in_channels: int = 3) -> FiberNet:
    """Segmentation-only U-Net for the downsampled section stack."""
    return FiberNet(UNetConfig(in_channels=in_channels, base_width=base_width, depth=depth),
                    with_classifier=False)


def to_batch(patch: Union[np.ndarray, torch.Tensor], device: torch.device = None) -> torch.Tensor:
    """HxWx3 array in [0, 1] (or uint8) to a (1, 3, H, W) float tensor."""
    if isinstance(patch, torch.Tensor):
        x = patch.float()
        return (x if x.ndim == 4 else x[None]).to(device or x.device)
    arr = np.asarray(patch)
    if arr.ndim != 3:
        raise ShapeMismatchError(f"expected an HxWxC patch, got shape {arr.shape}")
    arr = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None].to(device or 'cpu')


class _EvalMode:
    """Temporarily switch a module to eval mode and disable autograd."""

    def __init__(self, model: nn.Module):
        self.model = model
        self.was_training = model.training
        self.no_grad = torch.no_grad()

    def __enter__(self):
        self.model.eval()
        self.no_grad.__enter__()
        return self.model

    def __exit__(self, *exc):
        self.no_grad.__exit__(*exc)
        self.model.train(self.was_training)
        return False


def _device_of(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


def seg_forward(model: FiberNet, patch: Union[np.ndarray, torch.Tensor]) -> ProbabilityMap:
    """Per-pixel fiber probability of a single patch, computed in eval mode."""
    x = to_batch(patch, _device_of(model))
    with _EvalMode(model):
        probs = model.segment(x)[0]
    return ProbabilityMap(probs.detach().cpu().numpy().astype(np.float32))


def class_forward(model: FiberNet, patch: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Classifier-arm embedding of a single patch (length 2 or 256)."""
    x = to_batch(patch, _device_of(model))
    with _EvalMode(model):
        embedding = model.embed(x)[0]
    return embedding.detach().cpu().numpy()


def padded_segment(model: FiberNet, image: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Probabilities for an image of any size; reflect-pads to the network divisor and crops back."""
    x = to_batch(image, _device_of(model))
    h, w = x.shape[-2:]
    divisor = model.unet_config.divisor
    pad_h, pad_w = (-h) % divisor, (-w) % divisor
    if pad_h or pad_w:
        mode = 'reflect' if pad_h < h and pad_w < w else 'replicate'
        x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)
    with _EvalMode(model):
        probs = model.segment(x)[0, :h, :w]
    return probs.detach().cpu().numpy().astype(np.float32)
