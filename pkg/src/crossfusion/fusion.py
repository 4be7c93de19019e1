"""Interleaved cross-modal decoding.

The decoder is a sequence of blocks parsed from an order string over the
alphabet {C, L}: C is an image-decoder layer (multi-view, multi-scale
deformable cross-attention anchored at the queries' projected centers),
L is a LiDAR-decoder layer (single-scale deformable cross-attention on
the BEV map). "(CL)3" is three blocks of image-then-LiDAR; "3C3L" is one
block of three image layers followed by one block of three LiDAR layers.

Within a block each layer adds its attention output residually to the
query, refines the running center by a bounded rowwise offset, and applies
a residual feedforward. At the block boundary the block's input query is
added once more (queries accumulate additively across blocks) with an
optional layer normalization; centers simply accumulate their per-layer
deltas, so the final center telescopes to the proposal center plus the
sum of all refinement offsets.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .assignment import StagePrediction
from .backbone import BEVEncoder, FeaturePyramid, ImageEncoder, VoxelGridConfig, pillarize
from .geometry import BEVGrid, Box3D, batched_grid_sample, EPS_DEPTH
from .proposal import (
    CenterEmbedding,
    PointSelectiveAugment,
    ProposalNetwork,
    QueryState,
    init_queries,
    _mlp,
)
from .scene_synth import PointCloud


@dataclass
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    d: int = 64
    d_c: int = 64
    n_heads: int = 4
    n_queries: int = 48
    num_classes: int = 3
    n_cameras: int = 4
    encoder_layers: int = 2
    k_encoder: int = 4
    k_img: int = 6
    k_lidar: int = 1
    decoder_order: str = "(CL)3"
    ffn_ratio: int = 2
    block_layernorm: bool = True
    deep_supervision: bool = True
    center_step: float = 2.0
    pse_points: int = 25
    pse_enabled: bool = True
    image_encoder_enabled: bool = True
    bev_channels: tuple = (32, 64)
    image_widths: tuple = (16, 32)
    bev_dim: int = 0  # 0 -> same as d

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ValueError("d must be divisible by n_heads")
        parse_decoder_order(self.decoder_order)

    @property
    def f_l_dim(self) -> int:
        return self.bev_dim if self.bev_dim else self.d

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["bev_channels"] = list(self.bev_channels)
        d["image_widths"] = list(self.image_widths)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        kw = dict(d)
        kw["bev_channels"] = tuple(kw["bev_channels"])
        kw["image_widths"] = tuple(kw["image_widths"])
        return ModelConfig(**kw)


def parse_decoder_order(s: str) -> list:
    """Expand an order string into per-block layer sequences.

    Groups: "(SEQ)n" repeats the block SEQ n times; "nX" is one block of
    n repeated X layers; a bare run of letters is a single block. The
    empty string means no blocks (proposal-only model).
    """
    s = s.replace(" ", "")
    blocks = []
    i = 0
    while i < len(s):
        ch = s[i]
        if ch == "(":
            j = s.find(")", i)
            if j < 0:
                raise ValueError(f"unbalanced parenthesis in order {s!r}")
            seq = s[i + 1 : j]
            if not seq or any(c not in "CL" for c in seq):
                raise ValueError(f"bad block {seq!r} in order {s!r}")
            i = j + 1
            k = i
            while k < len(s) and s[k].isdigit():
                k += 1
            count = int(s[i:k]) if k > i else 1
            i = k
            blocks.extend([seq] * count)
        elif ch.isdigit():
            k = i
            while k < len(s) and s[k].isdigit():
                k += 1
            if k >= len(s) or s[k] not in "CL":
                raise ValueError(f"dangling count in order {s!r}")
            blocks.append(s[k] * int(s[i:k]))
            i = k + 1
        elif ch in "CL":
            k = i
            while k < len(s) and s[k] in "CL":
                k += 1
            blocks.append(s[i:k])
            i = k
        else:
            raise ValueError(f"bad character {ch!r} in order {s!r}")
    return blocks


def pos_embed_2d(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal 2D position embedding, (h*w, dim); dim must be a
    multiple of 4."""
    if dim % 4 != 0:
        raise ValueError("embedding dim must be a multiple of 4")
    quarter = dim // 4
    freq = torch.exp(
        -math.log(10000.0) * torch.arange(quarter, dtype=dtype) / max(quarter - 1, 1)
    )
    ys = torch.arange(h, dtype=dtype).unsqueeze(1) * freq  # (h, q)
    xs = torch.arange(w, dtype=dtype).unsqueeze(1) * freq
    ye = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # (h, dim/2)
    xe = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)
    out = torch.cat(
        [
            ye.unsqueeze(1).expand(h, w, dim // 2),
            xe.unsqueeze(0).expand(h, w, dim // 2),
        ],
        dim=2,
    )
    return out.reshape(h * w, dim)


def _level_refs(h: int, w: int, dtype) -> torch.Tensor:
    """Normalized align-corners grid coordinates of every cell, (h*w, 2)."""
    ys = torch.arange(h, dtype=dtype) / max(h - 1, 1)
    xs = torch.arange(w, dtype=dtype) / max(w - 1, 1)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).reshape(-1, 2)


def _init_offsets(linear: nn.Linear, heads: int, points: int, spread: float = 0.02):
    """Deformable-attention convention: zero offset weights, biases on a
    small radial pattern so initial samples spread around the reference.
    The phase keeps both offset components away from zero (references can
    sit exactly on interpolation nodes)."""
    nn.init.zeros_(linear.weight)
    angles = math.pi / 7.0 + torch.arange(heads * points, dtype=torch.float32) * (
        2.0 * math.pi / max(heads * points, 1)
    )
    pattern = torch.stack([torch.cos(angles), torch.sin(angles)], dim=-1)
    radii = (torch.arange(heads * points) % points + 1).float() / points
    bias = (pattern * radii.unsqueeze(-1) * spread).reshape(-1)
    with torch.no_grad():
        linear.bias.copy_(bias.repeat(linear.bias.numel() // bias.numel()))


class EncoderDeformableAttention(nn.Module):
    """Deformable self-attention over one view's multi-scale tokens."""

    def __init__(self, d_c: int, heads: int, levels: int, points: int):
        super().__init__()
        self.heads = heads
        self.levels = levels
        self.points = points
        self.dh = d_c // heads
        self.offsets = nn.Linear(d_c, heads * levels * points * 2)
        self.attn_w = nn.Linear(d_c, heads * levels * points)
        self.value_proj = nn.Linear(d_c, d_c)
        self.out_proj = nn.Linear(d_c, d_c)
        _init_offsets(self.offsets, heads, levels * points)
        nn.init.zeros_(self.attn_w.weight)
        nn.init.zeros_(self.attn_w.bias)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """(P, T, heads, L*K) softmax-normalized weights."""
        p, t, _ = x.shape
        return self.attn_w(x).reshape(p, t, self.heads, -1).softmax(dim=-1)

    def forward(self, x: torch.Tensor, refs: torch.Tensor, levels: list) -> torch.Tensor:
        p, t, d_c = x.shape
        h, lv, k = self.heads, self.levels, self.points
        offs = self.offsets(x).reshape(p, t, h, lv, k, 2)
        locs = refs.reshape(1, t, 1, 1, 1, 2) + offs
        a = self.attention_weights(x).reshape(p, t, h, lv, k)

        acc = x.new_zeros(p, t, h, self.dh)
        for li, level in enumerate(levels):
            hh, ww = level.shape[2], level.shape[3]
            vals = self.value_proj(level.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
            vals = vals.reshape(p * h, self.dh, hh, ww)
            loc_l = locs[:, :, :, li].permute(0, 2, 1, 3, 4).reshape(p * h, t * k, 2)
            samp = batched_grid_sample(vals, loc_l)  # (p*h, dh, t*k)
            samp = samp.reshape(p, h, self.dh, t, k).permute(0, 3, 1, 4, 2)  # (p,t,h,k,dh)
            acc = acc + (a[:, :, :, li].unsqueeze(-1) * samp).sum(dim=3)
        return self.out_proj(acc.reshape(p, t, d_c))


class ImageFeatureEncoder(nn.Module):
    """Bridges the modality gap before fusion: adds positional and
    scale-level embeddings to the flattened pyramid and refines it with
    deformable self-attention layers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d_c = cfg.d_c
        self.level_embed = nn.Parameter(torch.zeros(3, d_c))
        nn.init.normal_(self.level_embed, std=0.02)
        self.attns = nn.ModuleList(
            EncoderDeformableAttention(d_c, cfg.n_heads, 3, cfg.k_encoder)
            for _ in range(cfg.encoder_layers)
        )
        self.ffns = nn.ModuleList(
            _mlp(d_c, d_c, hidden=cfg.ffn_ratio * d_c) for _ in range(cfg.encoder_layers)
        )
        self.norms1 = nn.ModuleList(nn.LayerNorm(d_c) for _ in range(cfg.encoder_layers))
        self.norms2 = nn.ModuleList(nn.LayerNorm(d_c) for _ in range(cfg.encoder_layers))

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        dtype = self.level_embed.dtype
        shapes = [(lv.shape[2], lv.shape[3]) for lv in pyramid.levels]
        p = pyramid.num_views
        d_c = pyramid.dim

        tokens, pos, refs = [], [], []
        for li, lv in enumerate(pyramid.levels):
            hh, ww = shapes[li]
            tokens.append(lv.reshape(p, d_c, hh * ww).permute(0, 2, 1))
            pos.append(pos_embed_2d(hh, ww, d_c, dtype) + self.level_embed[li])
            refs.append(_level_refs(hh, ww, dtype))
        x = torch.cat(tokens, dim=1) + torch.cat(pos, dim=0).unsqueeze(0)
        refs = torch.cat(refs, dim=0)

        sizes = [hh * ww for hh, ww in shapes]
        for attn, ffn, n1, n2 in zip(self.attns, self.ffns, self.norms1, self.norms2):
            levels = self._split_levels(x, shapes, sizes)
            x = n1(x + attn(x, refs, levels))
            x = n2(x + ffn(x))
        return FeaturePyramid(levels=self._split_levels(x, shapes, sizes))

    @staticmethod
    def _split_levels(x: torch.Tensor, shapes: list, sizes: list) -> list:
        p, _, d_c = x.shape
        outs = []
        start = 0
        for (hh, ww), n in zip(shapes, sizes):
            outs.append(x[:, start : start + n].permute(0, 2, 1).reshape(p, d_c, hh, ww))
            start += n
        return outs


@dataclass
class DecodeContext:
    """Per-forward geometry shared by all decoder layers."""

    pyramid: FeaturePyramid
    bev: BEVGrid
    rot: torch.Tensor  # (P, 3, 3) ego -> camera
    trans: torch.Tensor  # (P, 3)
    intr: torch.Tensor  # (P, 4) fx, fy, u0, v0
    image_wh: torch.Tensor  # (P, 2)
    center_min: torch.Tensor  # (3,)
    center_max: torch.Tensor  # (3,)

    def project_refs(self, centers: torch.Tensor):
        """Project (N, 3) centers into all cameras.

        Returns (refs (N, P, 2) normalized by image shape, valid (N, P)).
        """
        p_cam = torch.einsum("pij,nj->npi", self.rot, centers) + self.trans
        z = p_cam[..., 2]
        safe_z = torch.where(z > EPS_DEPTH, z, torch.ones_like(z))
        u = self.intr[:, 0] * p_cam[..., 0] / safe_z + self.intr[:, 2]
        v = self.intr[:, 1] * p_cam[..., 1] / safe_z + self.intr[:, 3]
        w = self.image_wh[:, 0]
        h = self.image_wh[:, 1]
        valid = (z > EPS_DEPTH) & (u >= 0) & (u <= w) & (v >= 0) & (v <= h)
        refs = torch.stack([u / w, v / h], dim=-1)
        return refs, valid

    @staticmethod
    def build(pyramid, bev, calibs, voxel_cfg: VoxelGridConfig, dtype) -> "DecodeContext":
        rot = torch.as_tensor(np.stack([c.rotation for c in calibs]), dtype=dtype)
        trans = torch.as_tensor(np.stack([c.translation for c in calibs]), dtype=dtype)
        intr = torch.tensor([[c.fx, c.fy, c.u0, c.v0] for c in calibs], dtype=dtype)
        wh = torch.tensor([[c.image_w, c.image_h] for c in calibs], dtype=dtype)
        cmin = torch.tensor(
            [voxel_cfg.x_range[0], voxel_cfg.y_range[0], voxel_cfg.z_range[0]], dtype=dtype
        )
        cmax = torch.tensor(
            [voxel_cfg.x_range[1], voxel_cfg.y_range[1], voxel_cfg.z_range[1]], dtype=dtype
        )
        return DecodeContext(
            pyramid=pyramid, bev=bev, rot=rot, trans=trans, intr=intr,
            image_wh=wh, center_min=cmin, center_max=cmax,
        )


class MultiViewDeformableAttention(nn.Module):
    """Image-level cross-attention: for each query and each camera it is
    visible in, sample K offset points per pyramid level, mix them with
    weights normalized over the L*K slots per head, then aggregate levels
    and valid cameras with query-conditioned softmax weights. Queries
    visible in no camera produce an exactly zero output."""

    def __init__(self, d: int, d_c: int, heads: int, cameras: int, levels: int, points: int):
        super().__init__()
        self.heads = heads
        self.cameras = cameras
        self.levels = levels
        self.points = points
        self.dh = d // heads
        self.offsets = nn.Linear(d, heads * cameras * levels * points * 2)
        self.attn_w = nn.Linear(d, heads * cameras * levels * points)
        self.level_w = nn.Linear(d, levels)
        self.cam_w = nn.Linear(d, cameras)
        self.value_proj = nn.Linear(d_c, d)
        self.out_proj = nn.Linear(d, d)
        _init_offsets(self.offsets, heads * cameras, levels * points)
        nn.init.zeros_(self.attn_w.weight)
        nn.init.zeros_(self.attn_w.bias)

    def attention_weights(self, q: torch.Tensor) -> torch.Tensor:
        """(N, heads, P, L*K), softmax over the last axis."""
        n = q.shape[0]
        logits = self.attn_w(q).reshape(n, self.heads, self.cameras, self.levels * self.points)
        return logits.softmax(dim=-1)

    def camera_weights(self, q: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """(N, P) weights, softmax over valid cameras; all-zero rows for
        queries visible nowhere."""
        logits = self.cam_w(q)
        neg = torch.finfo(logits.dtype).min
        logits = logits.masked_fill(~valid, neg)
        w = logits.softmax(dim=-1)
        return w * valid.any(dim=1, keepdim=True).to(w.dtype)

    def forward(self, q, refs, valid, pyramid: FeaturePyramid) -> torch.Tensor:
        n = q.shape[0]
        h, p, lv, k = self.heads, self.cameras, self.levels, self.points
        offs = self.offsets(q).reshape(n, h, p, lv, k, 2)
        locs = refs.reshape(n, 1, p, 1, 1, 2) + offs
        a = self.attention_weights(q).reshape(n, h, p, lv, k)
        wl = self.level_w(q).softmax(dim=-1)  # (N, L)
        wp = self.camera_weights(q, valid)  # (N, P)

        per_cam = q.new_zeros(n, h, p, self.dh)
        for li, level in enumerate(pyramid.levels):
            hh, ww = level.shape[2], level.shape[3]
            vals = self.value_proj(level.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
            vals = vals.reshape(p * h, self.dh, hh, ww)
            loc_l = locs[:, :, :, li].permute(2, 1, 0, 3, 4).reshape(p * h, n * k, 2)
            samp = batched_grid_sample(vals, loc_l)
            samp = samp.reshape(p, h, self.dh, n, k).permute(3, 1, 0, 4, 2)  # (n,h,p,k,dh)
            inner = (a[:, :, :, li].unsqueeze(-1) * samp).sum(dim=3)  # (n,h,p,dh)
            per_cam = per_cam + wl[:, li].reshape(n, 1, 1, 1) * inner

        mixed = (wp.reshape(n, 1, p, 1) * per_cam).sum(dim=2)  # (n,h,dh)
        out = self.out_proj(mixed.reshape(n, h * self.dh))
        return out * valid.any(dim=1, keepdim=True).to(out.dtype)


class BEVDeformableAttention(nn.Module):
    """LiDAR-level cross-attention on the single-scale BEV map; K sampling
    points with weights normalized over the K slots per head. Centers
    outside the BEV extent produce an exactly zero output."""

    def __init__(self, d: int, f_l_dim: int, heads: int, points: int):
        super().__init__()
        self.heads = heads
        self.points = points
        self.dh = d // heads
        self.offsets = nn.Linear(d, heads * points * 2)
        self.attn_w = nn.Linear(d, heads * points)
        self.value_proj = nn.Linear(f_l_dim, d)
        self.out_proj = nn.Linear(d, d)
        _init_offsets(self.offsets, heads, points)
        nn.init.zeros_(self.attn_w.weight)
        nn.init.zeros_(self.attn_w.bias)

    def attention_weights(self, q: torch.Tensor) -> torch.Tensor:
        """(N, heads, K), softmax over K."""
        n = q.shape[0]
        return self.attn_w(q).reshape(n, self.heads, self.points).softmax(dim=-1)

    def forward(self, q: torch.Tensor, ref: torch.Tensor, bev: BEVGrid) -> torch.Tensor:
        n = q.shape[0]
        h, k = self.heads, self.points
        valid = (ref[:, 0] >= 0) & (ref[:, 0] <= 1) & (ref[:, 1] >= 0) & (ref[:, 1] <= 1)
        offs = self.offsets(q).reshape(n, h, k, 2)
        locs = ref.reshape(n, 1, 1, 2) + offs
        a = self.attention_weights(q)

        hh, ww = bev.data.shape[1], bev.data.shape[2]
        vals = self.value_proj(bev.data.permute(1, 2, 0)).permute(2, 0, 1)
        vals = vals.reshape(h, self.dh, hh, ww)
        loc = locs.permute(1, 0, 2, 3).reshape(h, n * k, 2)
        samp = batched_grid_sample(vals, loc).reshape(h, self.dh, n, k).permute(2, 0, 3, 1)
        mixed = (a.unsqueeze(-1) * samp).sum(dim=2)  # (n, h, dh)
        out = self.out_proj(mixed.reshape(n, h * self.dh))
        return out * valid.unsqueeze(1).to(out.dtype)


class DecoderLayer(nn.Module):
    """One modality layer: deformable cross-attention with a residual
    query update, a bounded center refinement, and a residual feedforward."""

    def __init__(self, kind: str, cfg: ModelConfig):
        super().__init__()
        if kind not in ("C", "L"):
            raise ValueError("layer kind must be 'C' or 'L'")
        self.kind = kind
        if kind == "C":
            self.attn = MultiViewDeformableAttention(
                cfg.d, cfg.d_c, cfg.n_heads, cfg.n_cameras, 3, cfg.k_img
            )
        else:
            self.attn = BEVDeformableAttention(cfg.d, cfg.f_l_dim, cfg.n_heads, cfg.k_lidar)
        self.f_reg = _mlp(cfg.d, 3)
        nn.init.zeros_(self.f_reg[-1].weight)
        nn.init.zeros_(self.f_reg[-1].bias)
        self.ffn = _mlp(cfg.d, cfg.d, hidden=cfg.ffn_ratio * cfg.d)
        self.center_step = cfg.center_step

    def refine(self, q_dec: torch.Tensor) -> torch.Tensor:
        """Bounded per-query center offset (tanh * max step)."""
        return torch.tanh(self.f_reg(q_dec)) * self.center_step


class CrossBlock(nn.Module):
    """A run of decoder layers with the block-level residual semantics."""

    def __init__(self, order: str, cfg: ModelConfig):
        super().__init__()
        self.order = order
        self.layers = nn.ModuleList(DecoderLayer(kind, cfg) for kind in order)
        self.norm = nn.LayerNorm(cfg.d) if cfg.block_layernorm else None

    def forward(self, q0: torch.Tensor, c0: torch.Tensor, ctx: DecodeContext):
        """Returns (q, c, intermediates) where intermediates is a list of
        (kind, decoded query, refined centers) per layer for deep
        supervision."""
        q, c = q0, c0
        inter = []
        for layer in self.layers:
            if layer.kind == "C":
                refs, valid = ctx.project_refs(c)
                attn_out = layer.attn(q, refs, valid, ctx.pyramid)
            else:
                ref = ctx.bev.metric_to_normalized(c[:, :2])
                attn_out = layer.attn(q, ref, ctx.bev)
            q_dec = attn_out + q
            c = c + layer.refine(q_dec)
            c = torch.minimum(torch.maximum(c, ctx.center_min), ctx.center_max)
            inter.append((layer.kind, q_dec, c))
            q = q_dec + layer.ffn(q_dec)
        q = q + q0
        if self.norm is not None:
            q = self.norm(q)
        return q, c, inter


class PredictionHeads(nn.Module):
    """Shared per-stage heads: class logits, log sizes, (sin, cos) yaw."""

    def __init__(self, d: int, num_classes: int):
        super().__init__()
        self.cls_head = _mlp(d, num_classes)
        self.box_head = _mlp(d, 5)
        # start with low foreground probability so early focal loss is calm
        nn.init.constant_(self.cls_head[-1].bias, -math.log((1.0 - 0.01) / 0.01))
        # near-unit sizes, but keep the yaw encoding away from (0, 0)
        # where the atan2 decode has no gradient
        nn.init.normal_(self.box_head[-1].weight, std=0.02)
        nn.init.zeros_(self.box_head[-1].bias)
        with torch.no_grad():
            self.box_head[-1].bias[4] = 0.5

    def stage_prediction(self, q: torch.Tensor, c: torch.Tensor, name: str) -> StagePrediction:
        box = self.box_head(q)
        return StagePrediction(
            class_logits=self.cls_head(q),
            centers=c,
            sizes=torch.exp(box[:, :3].clamp(-4.0, 4.0)),
            yaw_enc=box[:, 3:5],
            name=name,
        )


def predict_boxes(q: torch.Tensor, c: torch.Tensor, heads: PredictionHeads) -> list:
    """Decode one scored box per query from the final decoder state."""
    return heads.stage_prediction(q, c, "final").to_boxes()


class FusionDetector(nn.Module):
    """The full two-stage detector: pillar/BEV backbone, proposal network,
    image backbone + feature encoder, interleaved cross-modal decoder, and
    prediction heads."""

    def __init__(self, cfg: ModelConfig, voxel_cfg: VoxelGridConfig):
        super().__init__()
        self.cfg = cfg
        self.voxel_cfg = voxel_cfg
        self.bev_encoder = BEVEncoder(voxel_cfg, cfg.bev_channels, cfg.f_l_dim)
        self.proposal = ProposalNetwork(cfg.f_l_dim, cfg.num_classes, cfg.n_queries, voxel_cfg)
        self.blocks = nn.ModuleList(
            CrossBlock(order, cfg) for order in parse_decoder_order(cfg.decoder_order)
        )
        if self.blocks:
            self.image_encoder = ImageEncoder(cfg.image_widths, cfg.d_c)
            self.feature_encoder = ImageFeatureEncoder(cfg) if cfg.image_encoder_enabled else None
            self.center_embed = CenterEmbedding(cfg.d, scale=voxel_cfg.x_range[1])
            self.pse = PointSelectiveAugment(cfg.d) if cfg.pse_enabled else None
            self.q_proj = (
                nn.Linear(cfg.f_l_dim, cfg.d) if cfg.f_l_dim != cfg.d else nn.Identity()
            )
            self.heads = PredictionHeads(cfg.d, cfg.num_classes)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def stage1_parameters(self):
        yield from self.bev_encoder.parameters()
        yield from self.proposal.parameters()

    def stage2_parameters(self):
        stage1 = {id(p) for p in self.stage1_parameters()}
        image_backbone = {id(p) for p in self.image_encoder.parameters()} if self.blocks else set()
        for p in self.parameters():
            if id(p) not in stage1 and id(p) not in image_backbone:
                yield p

    def forward(
        self,
        cloud: PointCloud,
        images: list,
        calibs: list,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> dict:
        """Run the full pipeline on one scene.

        Returns {"stages": [StagePrediction...], "heatmap": ...,
        "proposal": QueryState, "final": (q, c) or None}. The first stage
        is always the proposal stage; with deep supervision every decoder
        layer contributes a stage, and the last stage is the final
        prediction state.
        """
        dtype = self.dtype
        pseudo = pillarize(cloud, self.voxel_cfg, dtype=dtype)
        bev = self.bev_encoder(pseudo)
        qstate, heat = self.proposal(bev)
        stages = [qstate.to_stage_prediction("proposal")]
        out = {"heatmap": heat, "proposal": qstate, "bev": bev, "final": None}

        if not self.blocks:
            out["stages"] = stages
            return out

        imgs = torch.as_tensor(np.stack(images), dtype=dtype)
        pyramid = self.image_encoder(imgs)
        if self.feature_encoder is not None:
            pyramid = self.feature_encoder(pyramid)

        c_e = self.center_embed(qstate.c)
        p_e = None
        if training and self.pse is not None:
            if rng is None:
                rng = np.random.default_rng(0)
            boxes = qstate.to_stage_prediction().to_boxes()
            rel = self.pse.sample_points(boxes, cloud, self.cfg.pse_points, rng)
            p_e = self.pse(rel.to(dtype))
        q = init_queries(self.q_proj(qstate.q), p_e, c_e)
        c = qstate.c

        ctx = DecodeContext.build(pyramid, bev, calibs, self.voxel_cfg, dtype)
        for bi, block in enumerate(self.blocks):
            q, c, inter = block(q, c, ctx)
            if self.cfg.deep_supervision:
                for li, (kind, q_dec, c_i) in enumerate(inter):
                    stages.append(
                        self.heads.stage_prediction(q_dec, c_i, f"block{bi}.{li}{kind}")
                    )
        stages.append(self.heads.stage_prediction(q, c, "final"))
        out["stages"] = stages
        out["final"] = (q, c)
        return out

    @torch.no_grad()
    def predict(self, cloud, images, calibs) -> list:
        """Final detections for one scene (no suppression; one box per
        query)."""
        out = self.forward(cloud, images, calibs, training=False)
        return out["stages"][-1].to_boxes()

    @torch.no_grad()
    def predict_proposal_only(self, cloud) -> list:
        """Stage-1-only baseline detections from the proposal network."""
        pseudo = pillarize(cloud, self.voxel_cfg, dtype=self.dtype)
        bev = self.bev_encoder(pseudo)
        qstate, _ = self.proposal(bev)
        return qstate.to_stage_prediction().to_boxes()
