"""
Attention U-Net assembled from :mod:`shapeflow.nn` layers.

Encoder level ``l`` runs ``blocks_per_level`` conv blocks at ``channels[l]``
features, with 2x2x2 max pooling between levels. Each decoder level
upsamples (nearest neighbor), projects with a 3x3x3 conv, optionally gates
the skip connection, concatenates ``[skip, up]`` and runs the conv blocks.
A 1x1x1 conv maps to the output channels.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from shapeflow.core.exceptions import ShapeMismatchError
from shapeflow.models.schemas import UNetConfig
from shapeflow.nn import functional as F
from shapeflow.nn.layers import AttentionGate, Conv3d, ConvBlock, Module
from shapeflow.nn.tensor import Tensor


class UNet(Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.weight_seed)
        ch = cfg.channels

        self.encoder: List[List[ConvBlock]] = []
        in_ch = cfg.in_channels
        for level, c in enumerate(ch):
            blocks = []
            for b in range(cfg.blocks_per_level):
                blocks.append(self.add_module(f"enc{level}_{b}", ConvBlock(in_ch if b == 0 else c, c, rng)))
            self.encoder.append(blocks)
            in_ch = c

        self.up_convs: List[Conv3d] = []
        self.gates: List[AttentionGate] = []
        self.decoder: List[List[ConvBlock]] = []
        for level in range(cfg.levels - 2, -1, -1):
            c, coarse = ch[level], ch[level + 1]
            self.up_convs.append(self.add_module(f"up{level}", Conv3d(coarse, c, 3, rng)))
            if cfg.attention:
                inter = cfg.attention_inter_channels or max(1, c // 2)
                self.gates.append(self.add_module(f"gate{level}", AttentionGate(c, coarse, inter, rng)))
            blocks = []
            for b in range(cfg.blocks_per_level):
                blocks.append(self.add_module(f"dec{level}_{b}", ConvBlock(2 * c if b == 0 else c, c, rng)))
            self.decoder.append(blocks)

        self.head = self.add_module("head", Conv3d(ch[0], cfg.out_channels, 1, rng))

    def check_dims(self, dims: Sequence[int]):
        factor = 2 ** (self.cfg.levels - 1)
        if any(d % factor for d in dims):
            raise ShapeMismatchError(
                f"Spatial dims {tuple(dims)} must be divisible by {factor} for {self.cfg.levels} levels"
            )

    def forward(self, x: Tensor) -> Tensor:
        if x.values.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatchError(
                f"UNet expects (N, {self.cfg.in_channels}, D, H, W), got {x.shape}"
            )
        self.check_dims(x.shape[2:])

        skips = []
        h = x
        for level, blocks in enumerate(self.encoder):
            if level > 0:
                h = F.maxpool3d(h)
            for block in blocks:
                h = block(h)
            skips.append(h)

        for i, level in enumerate(range(self.cfg.levels - 2, -1, -1)):
            skip = skips[level]
            up = self.up_convs[i](F.upsample2(h))
            if self.cfg.attention:
                skip = self.gates[i](h, skip)
            h = F.concat([skip, up], axis=1)
            for block in self.decoder[i]:
                h = block(h)

        return self.head(h)
