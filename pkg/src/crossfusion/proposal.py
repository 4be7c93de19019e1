"""Stage-1 proposal network and query enhancement.

The proposal network predicts a per-class BEV heatmap, selects the top-N
local-maximum cells, and reads query features / centers / box parameters
off the selected cells. Two enhancements prepare the queries for the
cross-modal decoder: a training-only additive bias built from points
inside each proposal box (max-pooled pointwise embeddings), and a learned
embedding of the proposal's 3D center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .assignment import StagePrediction
from .backbone import VoxelGridConfig
from .geometry import BEVGrid, Box3D, points_in_box
from .scene_synth import PointCloud


@dataclass
class QueryState:
    """The N object queries with their centers and stage-1 box outputs."""

    q: torch.Tensor  # (N, d)
    c: torch.Tensor  # (N, 3) meters
    class_logits: torch.Tensor  # (N, num_classes)
    box_params: torch.Tensor  # (N, 5): log sizes (w, l, h) + (sin, cos)

    def to_stage_prediction(self, name: str = "proposal") -> StagePrediction:
        # log sizes are clamped so exp cannot overflow on an early-training
        # excursion (1.8 cm .. 55 m covers any plausible box)
        return StagePrediction(
            class_logits=self.class_logits,
            centers=self.c,
            sizes=torch.exp(self.box_params[:, :3].clamp(-4.0, 4.0)),
            yaw_enc=self.box_params[:, 3:5],
            name=name,
        )


@dataclass
class PointSelectiveConfig:
    z_points: int = 25
    enabled_in_training: bool = True

    def __post_init__(self):
        if self.z_points < 1:
            raise ValueError("Z must be >= 1")


def _mlp(din: int, dout: int, hidden: int | None = None) -> nn.Sequential:
    hidden = dout if hidden is None else hidden
    return nn.Sequential(nn.Linear(din, hidden), nn.GELU(), nn.Linear(hidden, dout))


class ProposalNetwork(nn.Module):
    """Input-dependent query initialization from the LiDAR BEV map."""

    def __init__(self, d: int, num_classes: int, n_queries: int, voxel_cfg: VoxelGridConfig):
        super().__init__()
        self.d = d
        self.num_classes = num_classes
        self.n_queries = n_queries
        self.z_range = voxel_cfg.z_range
        self.heat_head = nn.Sequential(
            nn.Conv2d(d, d, 3, padding=1), nn.GELU(), nn.Conv2d(d, num_classes, 1)
        )
        # start near-zero foreground probability so the focal heatmap loss
        # is not dominated by the background at step 0
        nn.init.constant_(self.heat_head[-1].bias, -math.log((1.0 - 0.01) / 0.01))
        self.feat_proj = nn.Linear(d, d)
        self.z_head = nn.Linear(d, 1)
        self.box_head = nn.Linear(d, 5)

    def forward(self, bev: BEVGrid):
        """Returns (QueryState, heatmap logits (num_classes, H, W))."""
        d, h, w = bev.data.shape
        if self.n_queries > h * w:
            raise ValueError("more queries than BEV cells")
        heat = self.heat_head(bev.data.unsqueeze(0))[0]  # (K, H, W)

        with torch.no_grad():
            scores = torch.sigmoid(heat)
            pooled = torch.nn.functional.max_pool2d(
                scores.unsqueeze(0), 3, stride=1, padding=1
            )[0]
            peaks = (scores == pooled).any(dim=0)
            merged = scores.max(dim=0).values.masked_fill(~peaks, -1.0)
            _, idx = torch.topk(merged.reshape(-1), self.n_queries)
            idx, _ = torch.sort(idx)
        rows = torch.div(idx, w, rounding_mode="floor")
        cols = idx % w

        feats = bev.data[:, rows, cols].T  # (N, d)
        q = self.feat_proj(feats)
        (x0, _), (y0, _) = bev.extent
        cx = x0 + (cols.to(feats.dtype) + 0.5) * bev.resolution
        cy = y0 + (rows.to(feats.dtype) + 0.5) * bev.resolution
        cz = self.z_head(feats).squeeze(1).clamp(self.z_range[0], self.z_range[1])
        centers = torch.stack([cx, cy, cz], dim=1)
        class_logits = heat[:, rows, cols].T
        box_params = self.box_head(feats)
        return QueryState(q=q, c=centers, class_logits=class_logits, box_params=box_params), heat


def heatmap_targets(
    gt_boxes: list, bev: BEVGrid, num_classes: int, dtype=torch.float32
) -> torch.Tensor:
    """Gaussian class heatmap targets around ground-truth BEV centers,
    with spread proportional to box footprint."""
    _, h, w = bev.data.shape
    target = torch.zeros(num_classes, h, w, dtype=dtype)
    (x0, _), (y0, _) = bev.extent
    res = bev.resolution
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    for b in gt_boxes:
        col = (b.center.x - x0) / res - 0.5
        row = (b.center.y - y0) / res - 0.5
        sigma = max(0.8, max(b.w, b.l) / (6.0 * res))
        g = torch.exp(-((xs - col) ** 2 + (ys - row) ** 2) / (2.0 * sigma**2))
        target[b.class_id] = torch.maximum(target[b.class_id], g)
    return target


def gaussian_focal_loss(heat_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced focal loss for center heatmaps (peaks are positives,
    the Gaussian tail softens negatives near them)."""
    p = torch.sigmoid(heat_logits).clamp(1e-6, 1.0 - 1e-6)
    pos = targets >= 0.9999
    pos_loss = -((1.0 - p) ** 2) * torch.log(p)
    neg_loss = -((1.0 - targets) ** 4) * (p**2) * torch.log(1.0 - p)
    loss = torch.where(pos, pos_loss, neg_loss).sum()
    return loss / max(float(pos.sum()), 1.0)


class PointSelectiveAugment(nn.Module):
    """Training-only query bias: embed Z random in-box points (relative to
    the box center) through a pointwise MLP and max-pool over Z."""

    def __init__(self, d: int):
        super().__init__()
        self.f_bp = _mlp(3, d)
        self.d = d

    def sample_points(
        self, boxes: list, cloud: PointCloud, z: int, rng: np.random.Generator
    ) -> torch.Tensor:
        """(N, Z, 3) center-relative coordinates; boxes with no interior
        points fall back to Z copies of the center (zero offset)."""
        out = np.zeros((len(boxes), z, 3), dtype=np.float64)
        xyz = cloud.xyz.astype(np.float64)
        for i, box in enumerate(boxes):
            idx = points_in_box(xyz, box)
            if len(idx) == 0:
                continue
            take = rng.choice(idx, size=z, replace=len(idx) < z)
            out[i] = xyz[take] - np.array([box.center.x, box.center.y, box.center.z])
        return torch.as_tensor(out)

    def forward(self, rel_points: torch.Tensor) -> torch.Tensor:
        """(N, Z, 3) -> (N, d) via pointwise embedding + max over Z."""
        emb = self.f_bp(rel_points)  # (N, Z, d)
        return emb.max(dim=1).values


class CenterEmbedding(nn.Module):
    """Rowwise MLP embedding of 3D centers; inputs are scaled by the
    detection half-extent so the MLP sees unit-scale values."""

    def __init__(self, d: int, scale: float = 20.0):
        super().__init__()
        self.scale = scale
        self.net = _mlp(3, d)

    def forward(self, centers: torch.Tensor) -> torch.Tensor:
        return self.net(centers / self.scale)


def init_queries(
    q_p: torch.Tensor, p_e: torch.Tensor | None, c_e: torch.Tensor
) -> torch.Tensor:
    """Elementwise sum Q_p + P_e + C_e; P_e is absent at inference."""
    if q_p.shape != c_e.shape:
        raise ValueError("query/center-embedding shape mismatch")
    out = q_p + c_e
    if p_e is not None:
        if p_e.shape != q_p.shape:
            raise ValueError("point-enhancement shape mismatch")
        out = out + p_e
    return out
