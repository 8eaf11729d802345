"""3D Dense-Unet voxel autoencoder.

Encoder: a 3x3x3 stem, then three dense blocks separated by transitions
(1x1x1 channel-halving convolution + 2x max-pool). Each dense layer sees
the concatenation of its block input and all previous layer outputs.
Decoder: three stages of 2x transposed convolution, concatenation with
the matching encoder feature map, and another dense block; a 1x1x1 head
with a logistic squashing maps back to one channel in [0, 1].

The input carries the masked intensities plus (by default) the binary
voxel mask as a second channel, so zeroed-out voxels are distinguishable
from genuinely dark tissue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class DenseUnetConfig:
    patch_edge: int = 32
    stem_channels: int = 16
    growth: int = 12
    block_layers: int = 3
    blocks: int = 3
    use_mask_channel: bool = True

    def __post_init__(self):
        if min(self.stem_channels, self.growth, self.block_layers, self.blocks) < 1:
            raise ValueError("stem_channels, growth, block_layers, blocks must all be >= 1")
        factor = 2**self.blocks
        if self.patch_edge % factor != 0:
            raise ValueError(
                f"patch edge {self.patch_edge} not divisible by {factor} "
                f"(2^{self.blocks} pooling stages)"
            )

    @property
    def in_channels(self) -> int:
        return 2 if self.use_mask_channel else 1


class _DenseLayer(nn.Module):
    def __init__(self, in_channels: int, growth: int):
        super().__init__()
        self.norm = nn.BatchNorm3d(in_channels)
        self.relu = nn.ReLU(inplace=True)
        self.conv = nn.Conv3d(in_channels, growth, kernel_size=3, padding=1)

    def forward(self, x):
        return self.conv(self.relu(self.norm(x)))


class _DenseBlock(nn.Module):
    def __init__(self, in_channels: int, growth: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(
            [_DenseLayer(in_channels + i * growth, growth) for i in range(n_layers)]
        )
        self.out_channels = in_channels + n_layers * growth

    def forward(self, x):
        features = [x]
        for layer in self.layers:
            features.append(layer(torch.cat(features, dim=1)))
        return torch.cat(features, dim=1)


class _Transition(nn.Module):
    def __init__(self, in_channels: int):
        super().__init__()
        self.out_channels = in_channels // 2
        self.norm = nn.BatchNorm3d(in_channels)
        self.relu = nn.ReLU(inplace=True)
        self.conv = nn.Conv3d(in_channels, self.out_channels, kernel_size=1)
        self.pool = nn.MaxPool3d(kernel_size=2, stride=2)

    def forward(self, x):
        return self.pool(self.conv(self.relu(self.norm(x))))


class _UpStage(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, growth: int, n_layers: int):
        super().__init__()
        up_out = max(in_channels // 2, 1)
        self.up = nn.ConvTranspose3d(in_channels, up_out, kernel_size=2, stride=2)
        self.block = _DenseBlock(up_out + skip_channels, growth, n_layers)
        self.out_channels = self.block.out_channels

    def forward(self, x, skip):
        return self.block(torch.cat([self.up(x), skip], dim=1))


class DenseUnet(nn.Module):
    """The voxel autoencoder; holds its config for checkpoint verification."""

    def __init__(self, config: DenseUnetConfig):
        super().__init__()
        self.config = config
        c = config.stem_channels
        self.stem = nn.Conv3d(config.in_channels, c, kernel_size=3, padding=1)

        enc_blocks, transitions, skip_channels = [], [], []
        for _ in range(config.blocks):
            block = _DenseBlock(c, config.growth, config.block_layers)
            enc_blocks.append(block)
            skip_channels.append(block.out_channels)
            trans = _Transition(block.out_channels)
            transitions.append(trans)
            c = trans.out_channels
        self.enc_blocks = nn.ModuleList(enc_blocks)
        self.transitions = nn.ModuleList(transitions)
        # no-op taps on the skip paths; tests hook these to ablate a connection
        self.skip_taps = nn.ModuleList([nn.Identity() for _ in enc_blocks])

        self.bottleneck = _DenseBlock(c, config.growth, config.block_layers)
        c = self.bottleneck.out_channels

        up_stages = []
        for skip_c in reversed(skip_channels):
            stage = _UpStage(c, skip_c, config.growth, config.block_layers)
            up_stages.append(stage)
            c = stage.out_channels
        self.up_stages = nn.ModuleList(up_stages)

        self.head_norm = nn.BatchNorm3d(c)
        self.head_relu = nn.ReLU(inplace=True)
        self.head = nn.Conv3d(c, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.config.patch_edge
        if x.dim() != 5 or x.shape[1] != self.config.in_channels or x.shape[2:] != (p, p, p):
            raise ValueError(
                f"expected input (B, {self.config.in_channels}, {p}, {p}, {p}), "
                f"got {tuple(x.shape)}"
            )
        skips = []
        h = self.stem(x)
        for block, trans, tap in zip(self.enc_blocks, self.transitions, self.skip_taps):
            h = block(h)
            skips.append(tap(h))
            h = trans(h)
        h = self.bottleneck(h)
        for stage, skip in zip(self.up_stages, reversed(skips)):
            h = stage(h, skip)
        return torch.sigmoid(self.head(self.head_relu(self.head_norm(h))))


def build_model(config: DenseUnetConfig, seed: int = 0) -> DenseUnet:
    """Construct and deterministically initialize a Dense-Unet.

    Convolution weights get fan-in-scaled normal init, biases zeros,
    normalization layers identity; two builds from the same seed are
    parameter-identical.
    """
    model = DenseUnet(config)
    g = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            fan_in, _ = nn.init._calculate_fan_in_and_fan_out(module.weight)
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                module.weight.normal_(0.0, std, generator=g)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm3d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def model_input(
    values: np.ndarray, voxel_mask: np.ndarray, config: DenseUnetConfig
) -> torch.Tensor:
    """Stack a masked patch and its voxel mask into a (1, C, P, P, P) tensor."""
    v = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))
    if config.use_mask_channel:
        m = torch.from_numpy(np.ascontiguousarray(voxel_mask, dtype=np.float32))
        x = torch.stack([v, m], dim=0)
    else:
        x = v[None]
    return x[None]


def reconstruct(model: DenseUnet, values: np.ndarray, voxel_mask: np.ndarray) -> np.ndarray:
    """Eval-mode reconstruction of a single masked patch; returns (P, P, P) float32."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = model_input(values, voxel_mask, model.config)
            x = x.to(memory_format=torch.channels_last_3d)
            out = model(x)
    finally:
        model.train(was_training)
    return out[0, 0].contiguous().numpy().astype(np.float32)
