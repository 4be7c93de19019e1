"""Toy-scale feature extractors: point cloud -> BEV feature map, and
images -> three-level feature pyramid at strides 8/16/32.

These deliberately replace full-scale voxel/ResNet backbones with small
explicit convolution stacks; capacity is not the point at desk scale.
All activations are smooth (GELU) so finite-difference gradient checks
are well-conditioned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import BEVGrid
from .scene_synth import PointCloud

PILLAR_FEATURES = 6  # count, mean dx, mean dy, mean z, mean intensity, max z


@dataclass
class VoxelGridConfig:
    """Metric voxel/pillar grid over the detection range."""

    voxel: tuple = (0.3125, 0.3125, 6.0)
    x_range: tuple = (-20.0, 20.0)
    y_range: tuple = (-20.0, 20.0)
    z_range: tuple = (-3.0, 3.0)

    def __post_init__(self):
        for (lo, hi), v in zip(
            (self.x_range, self.y_range, self.z_range), self.voxel
        ):
            n = (hi - lo) / v
            if abs(n - round(n)) > 1e-6:
                raise ValueError("range extent must be divisible by voxel size")

    @property
    def grid_w(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.voxel[0]))

    @property
    def grid_h(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.voxel[1]))

    def to_dict(self) -> dict:
        return {
            "voxel": list(self.voxel),
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
        }

    @staticmethod
    def from_dict(d: dict) -> "VoxelGridConfig":
        return VoxelGridConfig(
            voxel=tuple(d["voxel"]),
            x_range=tuple(d["x_range"]),
            y_range=tuple(d["y_range"]),
            z_range=tuple(d["z_range"]),
        )


def pillarize(cloud: PointCloud, cfg: VoxelGridConfig, dtype=torch.float32) -> torch.Tensor:
    """Aggregate points per BEV cell into a fixed feature vector.

    Features per cell: point count, mean (x, y) offset from the cell
    center, mean z, mean intensity, max z. Empty cells are zero; points
    outside the configured range are discarded. Invariant to the order of
    input points.
    """
    h, w = cfg.grid_h, cfg.grid_w
    out = np.zeros((PILLAR_FEATURES, h, w), dtype=np.float64)
    if len(cloud) > 0:
        xyz = cloud.xyz.astype(np.float64)
        (x0, x1), (y0, y1), (z0, z1) = cfg.x_range, cfg.y_range, cfg.z_range
        keep = (
            (xyz[:, 0] >= x0) & (xyz[:, 0] < x1)
            & (xyz[:, 1] >= y0) & (xyz[:, 1] < y1)
            & (xyz[:, 2] >= z0) & (xyz[:, 2] < z1)
        )
        xyz = xyz[keep]
        inten = cloud.intensity.astype(np.float64)[keep]
        if len(xyz) > 0:
            col = np.floor((xyz[:, 0] - x0) / cfg.voxel[0]).astype(np.int64)
            row = np.floor((xyz[:, 1] - y0) / cfg.voxel[1]).astype(np.int64)
            flat = row * w + col
            count = np.bincount(flat, minlength=h * w).astype(np.float64)
            sum_x = np.bincount(flat, weights=xyz[:, 0], minlength=h * w)
            sum_y = np.bincount(flat, weights=xyz[:, 1], minlength=h * w)
            sum_z = np.bincount(flat, weights=xyz[:, 2], minlength=h * w)
            sum_i = np.bincount(flat, weights=inten, minlength=h * w)
            max_z = np.full(h * w, -np.inf)
            np.maximum.at(max_z, flat, xyz[:, 2])

            occ = count > 0
            cnt = np.where(occ, count, 1.0)
            cx = x0 + (np.arange(h * w) % w + 0.5) * cfg.voxel[0]
            cy = y0 + (np.arange(h * w) // w + 0.5) * cfg.voxel[1]
            out[0] = count.reshape(h, w)
            out[1] = np.where(occ, sum_x / cnt - cx, 0.0).reshape(h, w)
            out[2] = np.where(occ, sum_y / cnt - cy, 0.0).reshape(h, w)
            out[3] = np.where(occ, sum_z / cnt, 0.0).reshape(h, w)
            out[4] = np.where(occ, sum_i / cnt, 0.0).reshape(h, w)
            out[5] = np.where(occ, max_z, 0.0).reshape(h, w)
    return torch.as_tensor(out, dtype=dtype)


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    groups = math.gcd(8, cout)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(groups, cout),
        nn.GELU(),
    )


class BEVEncoder(nn.Module):
    """Pseudo-image -> LiDAR BEV feature map F_L (stride 2 by default)."""

    def __init__(self, cfg: VoxelGridConfig, channels=(32, 64), d: int = 64, stride: int = 2):
        super().__init__()
        self.cfg = cfg
        self.stride = stride
        c1 = channels[0]
        self.net = nn.Sequential(
            _conv_block(PILLAR_FEATURES, c1),
            _conv_block(c1, c1),
            _conv_block(c1, d, stride=stride),
            _conv_block(d, d),
        )
        self.d = d

    def forward(self, pseudo_image: torch.Tensor) -> BEVGrid:
        if pseudo_image.dim() != 3 or pseudo_image.shape[0] != PILLAR_FEATURES:
            raise ValueError("expected pillar pseudo-image of shape (6, H, W)")
        feats = self.net(pseudo_image.unsqueeze(0))[0]
        return BEVGrid(
            data=feats,
            extent=(self.cfg.x_range, self.cfg.y_range),
            resolution=self.cfg.voxel[0] * self.stride,
        )


@dataclass
class FeaturePyramid:
    """Three feature levels at strides 8/16/32 of the padded input image.

    Each level is a (P, d_C, H_l, W_l) tensor batched over the P views.
    """

    levels: list

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError("pyramid must have exactly 3 levels")

    @property
    def num_views(self) -> int:
        return self.levels[0].shape[0]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]


class ImageEncoder(nn.Module):
    """Strided convolutional stack emitting pyramid levels at 1/8, 1/16,
    and 1/32 of the input resolution."""

    def __init__(self, widths=(16, 32), d_c: int = 64):
        super().__init__()
        w0, w1 = widths
        self.stem = nn.Sequential(
            _conv_block(3, w0, stride=2),
            _conv_block(w0, w1, stride=2),
            _conv_block(w1, d_c, stride=2),
        )
        self.down1 = _conv_block(d_c, d_c, stride=2)
        self.down2 = _conv_block(d_c, d_c, stride=2)
        self.d_c = d_c

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError("expected images of shape (P, 3, H, W)")
        _, _, h, w = images.shape
        pad_h = (-h) % 32
        pad_w = (-w) % 32
        if pad_h or pad_w:
            images = torch.nn.functional.pad(images, (0, pad_w, 0, pad_h))
        l0 = self.stem(images)
        l1 = self.down1(l0)
        l2 = self.down2(l1)
        return FeaturePyramid(levels=[l0, l1, l2])
