"""Two-stage training: stage 1 trains the LiDAR stream (pillar/BEV
backbone + proposal network) with a heatmap loss plus the proposal-stage
set loss; stage 2 freezes it and trains the fusion stack with deep
supervision. AdamW with a cosine one-cycle learning-rate schedule and a
mirrored momentum cycle.

All randomness flows from per-(seed, epoch, sample) streams, so two
single-threaded runs with equal configs produce identical loss traces.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .assignment import CostWeights, total_loss
from .backbone import VoxelGridConfig, pillarize
from .corruption import augmentation_mode, filter_beams
from .fusion import FusionDetector, ModelConfig
from .geometry import Box3D, CameraCalib, Point3
from .proposal import gaussian_focal_loss, heatmap_targets
from .scene_synth import SceneSample


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage1_epochs: int = 10
    stage2_epochs: int = 6
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    momentum_low: float = 0.85
    momentum_high: float = 0.95
    warmup_frac: float = 0.4
    div: float = 10.0
    final_div: float = 1e4
    grad_clip: float = 10.0
    augment: bool = True
    rotation_range: tuple = (-math.pi / 4, math.pi / 4)
    scale_range: tuple = (0.9, 1.1)
    flip_prob: float = 0.5
    beam_aug: bool = True
    beam_aug_by_index: bool = True
    freeze_image_backbone: bool = True
    heatmap_weight: float = 1.0
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.stage1_epochs < 1:
            raise ValueError("stage-1 epochs must be >= 1")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["rotation_range"] = list(self.rotation_range)
        d["scale_range"] = list(self.scale_range)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        kw = dict(d)
        kw["rotation_range"] = tuple(kw["rotation_range"])
        kw["scale_range"] = tuple(kw["scale_range"])
        return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# Data augmentation


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

_FLIP_CAM = np.diag([-1.0, 1.0, 1.0])  # mirrors the camera x axis
_FLIP_EGO = np.diag([1.0, -1.0, 1.0])  # mirrors ego y


def augment_sample(
    sample: SceneSample,
    cfg: TrainConfig,
    rng: np.random.Generator,
    step: int | None = None,
    n_beams: int | None = None,
) -> SceneSample:
    """Jointly augment the point cloud, boxes, images, and calibrations.

    Order: rotation about z, then global scaling, then horizontal flip.
    The camera extrinsics are co-transformed so every scene point keeps
    its camera-frame coordinates; the flip mirrors images and principal
    points instead. With ``beam_aug`` and a step index, the randomized
    low-resolution beam augmentation is applied on trigger steps.
    """
    cloud = sample.cloud
    boxes = sample.gt_boxes
    images = sample.images
    calibs = sample.calibs

    if cfg.augment:
        theta = float(rng.uniform(*cfg.rotation_range))
        scale = float(rng.uniform(*cfg.scale_range))
        flip = bool(rng.random() < cfg.flip_prob)

        rz = _rot_z(theta)
        xyz = (cloud.xyz.astype(np.float64) @ rz.T) * scale
        if flip:
            xyz[:, 1] = -xyz[:, 1]
        cloud = type(cloud)(xyz, sample.cloud.intensity, sample.cloud.beam_id)

        new_boxes = []
        for b in boxes:
            ctr = rz @ b.center.to_array() * scale
            yaw = b.yaw + theta
            if flip:
                ctr[1] = -ctr[1]
                yaw = -yaw
            new_boxes.append(
                Box3D(
                    Point3.from_array(ctr),
                    tuple(s * scale for s in b.size),
                    yaw,
                    class_id=b.class_id,
                    score=b.score,
                )
            )
        boxes = new_boxes

        new_calibs = []
        for c in calibs:
            rot = c.rotation @ rz.T
            trans = c.translation * scale
            u0 = c.u0
            if flip:
                rot = _FLIP_CAM @ rot @ _FLIP_EGO
                trans = _FLIP_CAM @ trans
                u0 = c.image_w - c.u0
            new_calibs.append(
                CameraCalib(
                    fx=c.fx, fy=c.fy, u0=u0, v0=c.v0,
                    rotation=rot, translation=trans,
                    image_w=c.image_w, image_h=c.image_h,
                )
            )
        calibs = new_calibs
        if flip:
            images = [np.ascontiguousarray(img[:, :, ::-1]) for img in images]

    if cfg.beam_aug and step is not None:
        mode = augmentation_mode(step, cfg.seed)
        cloud = filter_beams(
            cloud, mode, by_beam_index=cfg.beam_aug_by_index, total_beams=n_beams
        )

    return SceneSample(
        cloud=cloud, images=images, calibs=calibs, gt_boxes=boxes,
        seed=sample.seed, index=sample.index,
    )


# ---------------------------------------------------------------------------
# One-cycle schedule


def _cos_interp(a: float, b: float, t: float) -> float:
    return b + (a - b) * (1.0 + math.cos(math.pi * min(max(t, 0.0), 1.0))) / 2.0


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig):
    """Cosine one-cycle: warm up from lr/div to lr over the first
    ``warmup_frac`` of steps, anneal to lr/final_div; momentum mirrors
    inversely within [momentum_low, momentum_high]. Returns (lr, momentum).
    """
    if not (0 <= step <= total_steps):
        raise ValueError("step out of range")
    warm = cfg.warmup_frac * total_steps
    if step <= warm and warm > 0:
        t = step / warm
        return (
            _cos_interp(cfg.lr / cfg.div, cfg.lr, t),
            _cos_interp(cfg.momentum_high, cfg.momentum_low, t),
        )
    denom = max(total_steps - warm, 1e-9)
    t = (step - warm) / denom
    return (
        _cos_interp(cfg.lr, cfg.lr / cfg.final_div, t),
        _cos_interp(cfg.momentum_low, cfg.momentum_high, t),
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path,
    model: FusionDetector,
    train_cfg: TrainConfig,
    weights: CostWeights,
    stage: int,
    step: int,
    dataset_fingerprint: str = "",
    config_fingerprint: str = "",
):
    """Documented container: config snapshots, named parameter arrays,
    torch RNG state, and the step counter."""
    payload = {
        "format": "crossfusion-checkpoint-v1",
        "model_config": model.cfg.to_dict(),
        "voxel_config": model.voxel_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "cost_weights": {"cls": weights.cls, "reg": weights.reg, "iou": weights.iou},
        "state_dict": model.state_dict(),
        "stage": stage,
        "step": step,
        "dataset_fingerprint": dataset_fingerprint,
        "config_fingerprint": config_fingerprint,
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (model, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "crossfusion-checkpoint-v1":
        raise ValueError(f"{path}: not a crossfusion checkpoint")
    model = FusionDetector(
        ModelConfig.from_dict(payload["model_config"]),
        VoxelGridConfig.from_dict(payload["voxel_config"]),
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# Training loops


def _check_finite(loss: torch.Tensor, diag: dict, dump_path):
    if torch.isfinite(loss):
        return
    if dump_path is not None:
        Path(dump_path).write_text(json.dumps(diag, indent=1, default=str))
    raise TrainingDiverged(f"non-finite loss at step {diag.get('step')}; dump: {dump_path}")


def _apply_schedule(opt: torch.optim.Optimizer, step: int, total: int, cfg: TrainConfig):
    lr, mom = lr_schedule(step, total, cfg)
    for g in opt.param_groups:
        g["lr"] = lr
        g["betas"] = (mom, 0.999)
    return lr, mom


def _loop(
    model,
    trainable,
    dataset,
    cfg: TrainConfig,
    epochs: int,
    sample_loss,
    log=None,
    dump_path=None,
    stage_name: str = "stage",
):
    """Shared epoch/batch loop; returns the per-step loss trace."""
    opt = torch.optim.AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(math.ceil(len(dataset) / cfg.batch_size), 1)
    total_steps = epochs * steps_per_epoch
    trace = []
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng((cfg.seed, 101, epoch)).permutation(len(dataset))
        for b0 in range(0, len(dataset), cfg.batch_size):
            lr, mom = _apply_schedule(opt, step, total_steps, cfg)
            batch = order[b0 : b0 + cfg.batch_size]
            opt.zero_grad(set_to_none=True)
            losses = []
            for idx in batch:
                losses.append(sample_loss(dataset[int(idx)], epoch, int(idx), step))
            loss = torch.stack(losses).mean()
            _check_finite(
                loss,
                {"stage": stage_name, "step": step, "epoch": epoch,
                 "losses": [float(x.detach()) for x in losses], "lr": lr},
                dump_path,
            )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            opt.step()
            val = float(loss.detach())
            trace.append(val)
            if log is not None:
                log({"stage": stage_name, "step": step, "epoch": epoch,
                     "loss": val, "lr": lr, "momentum": mom})
            step += 1
    return trace


def _setup_determinism(cfg: TrainConfig):
    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)


def train_stage1(
    dataset: list,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    voxel_cfg: VoxelGridConfig,
    weights: CostWeights | None = None,
    log=None,
    dump_path=None,
    model: FusionDetector | None = None,
):
    """Train the LiDAR stream. Returns (model, loss trace)."""
    if not dataset:
        raise ValueError("dataset is empty")
    weights = weights or CostWeights()
    _setup_determinism(cfg)
    if model is None:
        model = FusionDetector(model_cfg, voxel_cfg)
    model.train()
    trainable = list(model.stage1_parameters())
    num_classes = model_cfg.num_classes

    def sample_loss(sample, epoch, idx, step):
        rng = np.random.default_rng((cfg.seed, 11, epoch, idx))
        aug = augment_sample(sample, cfg, rng)  # beam augmentation is stage 2 only
        pseudo = pillarize(aug.cloud, voxel_cfg, dtype=model.dtype)
        bev = model.bev_encoder(pseudo)
        qstate, heat = model.proposal(bev)
        set_loss, _ = total_loss(
            [qstate.to_stage_prediction("proposal")], aug.gt_boxes, weights
        )
        heat_target = heatmap_targets(aug.gt_boxes, bev, num_classes, dtype=model.dtype)
        return set_loss + cfg.heatmap_weight * gaussian_focal_loss(heat, heat_target)

    trace = _loop(
        model, trainable, dataset, cfg, cfg.stage1_epochs, sample_loss,
        log=log, dump_path=dump_path, stage_name="stage1",
    )
    model.eval()
    return model, trace


def train_stage2(
    dataset: list,
    model: FusionDetector,
    cfg: TrainConfig,
    weights: CostWeights | None = None,
    log=None,
    dump_path=None,
    n_beams: int | None = None,
):
    """Freeze the stage-1 parameters (and optionally the image backbone)
    and train the fusion stack. Returns (model, loss trace)."""
    if not dataset:
        raise ValueError("dataset is empty")
    if not model.blocks:
        return model, []  # proposal-only configuration: nothing to train
    weights = weights or CostWeights()
    _setup_determinism(cfg)
    model.train()

    frozen = list(model.stage1_parameters())
    if cfg.freeze_image_backbone:
        frozen += list(model.image_encoder.parameters())
    for p in frozen:
        p.requires_grad_(False)
    frozen_ids = {id(p) for p in frozen}
    trainable = [p for p in model.parameters() if id(p) not in frozen_ids]

    def sample_loss(sample, epoch, idx, step):
        rng = np.random.default_rng((cfg.seed, 22, epoch, idx))
        aug = augment_sample(sample, cfg, rng, step=step, n_beams=n_beams)
        pse_rng = np.random.default_rng((cfg.seed, 7771, step, idx))
        out = model(aug.cloud, aug.images, aug.calibs, training=True, rng=pse_rng)
        loss, _ = total_loss(out["stages"], aug.gt_boxes, weights)
        return loss

    trace = _loop(
        model, trainable, dataset, cfg, cfg.stage2_epochs, sample_loss,
        log=log, dump_path=dump_path, stage_name="stage2",
    )
    model.eval()
    return model, trace


def train_both(
    dataset: list,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    voxel_cfg: VoxelGridConfig,
    weights: CostWeights | None = None,
    log=None,
    dump_path=None,
    n_beams: int | None = None,
):
    """Stage 1 followed by stage 2. Returns (model, combined trace)."""
    model, trace1 = train_stage1(
        dataset, cfg, model_cfg, voxel_cfg, weights, log=log, dump_path=dump_path
    )
    model, trace2 = train_stage2(
        dataset, model, cfg, weights, log=log, dump_path=dump_path, n_beams=n_beams
    )
    return model, trace1 + trace2
