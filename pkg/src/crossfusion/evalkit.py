"""Detection metrics, the LiDAR-corruption robustness suite, and the
ablation runner.

Evaluation matches detections to ground truth greedily by BEV center
distance (score order, same class, nearest unmatched ground truth within
the threshold) -- deliberately different from the Hungarian assignment
used for training supervision. AP integrates an interpolated
precision-recall curve over recall in (0.1, 1] with the 0.1 precision
floor removed; classes absent from the ground truth are skipped. The
velocity/attribute components of the full detection score need labels the
synthetic data does not carry, so the report exposes mAP plus the
translation / scale / orientation TP errors only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corruption import BeamMode, CorruptionSpec
from .geometry import Box3D, wrap_angle
from .scene_synth import SceneSample

EVAL_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_METRIC_THRESHOLD = 2.0
AP_RECALL_FLOOR = 0.1
AP_PRECISION_FLOOR = 0.1


def match_dets_to_gt(dets: list, gts: list, threshold: float):
    """Greedy TP/FP labeling at one center-distance threshold.

    ``dets`` must be score-sorted descending. Each detection matches the
    nearest unmatched same-class ground truth within ``threshold`` meters
    of BEV center distance; every ground truth matches at most once.
    Returns (labels, fn_indices): labels is a list of
    (det_index, 'TP'|'FP', gt_index or -1).
    """
    for a, b in zip(dets, dets[1:]):
        if a.score < b.score:
            raise ValueError("detections must be score-sorted descending")
    used = set()
    labels = []
    for i, det in enumerate(dets):
        best_j = -1
        best_d = math.inf
        for j, gt in enumerate(gts):
            if j in used or gt.class_id != det.class_id:
                continue
            d = math.hypot(det.center.x - gt.center.x, det.center.y - gt.center.y)
            if d <= threshold and d < best_d:
                best_d = d
                best_j = j
        if best_j >= 0:
            used.add(best_j)
            labels.append((i, "TP", best_j))
        else:
            labels.append((i, "FP", -1))
    fn = [j for j in range(len(gts)) if j not in used]
    return labels, fn


def average_precision(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float | None:
    """Normalized area under the interpolated PR curve over recall in
    (0.1, 1], with the 0.1 precision floor removed; None when the class
    has no ground truth."""
    if n_gt == 0:
        return None
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    grid = np.linspace(0.0, 1.0, 101)
    interp = np.zeros_like(grid)
    for i, r in enumerate(grid):
        mask = recall >= r - 1e-12
        interp[i] = precision[mask].max() if mask.any() else 0.0
    sel = grid > AP_RECALL_FLOOR + 1e-12
    vals = np.clip((interp[sel] - AP_PRECISION_FLOOR) / (1.0 - AP_PRECISION_FLOOR), 0.0, 1.0)
    return float(vals.mean())


def tp_errors(pairs: list):
    """(mATE, mASE, mAOE) over matched (detection, gt) pairs, or None when
    empty. mASE uses the volumetric IoU of the size-aligned boxes; yaw
    differences are wrapped into [0, pi]."""
    if not pairs:
        return None
    ate, ase, aoe = [], [], []
    for det, gt in pairs:
        ate.append(math.hypot(det.center.x - gt.center.x, det.center.y - gt.center.y))
        inter = math.prod(min(a, b) for a, b in zip(det.size, gt.size))
        union = math.prod(det.size) + math.prod(gt.size) - inter
        ase.append(1.0 - inter / union)
        aoe.append(abs(wrap_angle(det.yaw - gt.yaw)))
    return (float(np.mean(ate)), float(np.mean(ase)), float(np.mean(aoe)))


@dataclass
class EvalReport:
    label: str
    n_scenes: int
    ap: dict  # class_id -> {threshold -> AP or None}
    map_by_threshold: dict  # threshold -> mAP
    mean_ap: float
    mate: float | None
    mase: float | None
    maoe: float | None
    fingerprint: str = ""

    def map_at(self, threshold: float) -> float:
        return self.map_by_threshold[threshold]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_scenes": self.n_scenes,
            "ap": {str(c): {str(t): v for t, v in d.items()} for c, d in self.ap.items()},
            "map_by_threshold": {str(t): v for t, v in self.map_by_threshold.items()},
            "mean_ap": self.mean_ap,
            "mate": self.mate,
            "mase": self.mase,
            "maoe": self.maoe,
            "fingerprint": self.fingerprint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate_detections(
    per_scene_dets: list,
    per_scene_gts: list,
    num_classes: int,
    thresholds=EVAL_THRESHOLDS,
    label: str = "eval",
    fingerprint: str = "",
) -> EvalReport:
    """Aggregate AP/mAP and TP errors over a list of scenes."""
    scores = {(c, t): [] for c in range(num_classes) for t in thresholds}
    tps = {(c, t): [] for c in range(num_classes) for t in thresholds}
    n_gt = {c: 0 for c in range(num_classes)}
    tp_pairs = []

    for dets, gts in zip(per_scene_dets, per_scene_gts):
        dets = sorted(dets, key=lambda b: -b.score)
        for g in gts:
            n_gt[g.class_id] += 1
        for t in thresholds:
            labels, _ = match_dets_to_gt(dets, gts, t)
            for i, kind, j in labels:
                c = dets[i].class_id
                scores[(c, t)].append(dets[i].score)
                tps[(c, t)].append(1.0 if kind == "TP" else 0.0)
                if kind == "TP" and t == TP_METRIC_THRESHOLD:
                    tp_pairs.append((dets[i], gts[j]))

    ap = {}
    for c in range(num_classes):
        ap[c] = {}
        for t in thresholds:
            ap[c][t] = average_precision(
                np.asarray(scores[(c, t)]), np.asarray(tps[(c, t)]), n_gt[c]
            )
    map_by_t = {}
    for t in thresholds:
        vals = [ap[c][t] for c in range(num_classes) if ap[c][t] is not None]
        map_by_t[t] = float(np.mean(vals)) if vals else 0.0
    present = [v for c in range(num_classes) for v in ap[c].values() if v is not None]
    mean_ap = float(np.mean(present)) if present else 0.0

    errs = tp_errors(tp_pairs)
    return EvalReport(
        label=label,
        n_scenes=len(per_scene_gts),
        ap=ap,
        map_by_threshold=map_by_t,
        mean_ap=mean_ap,
        mate=errs[0] if errs else None,
        mase=errs[1] if errs else None,
        maoe=errs[2] if errs else None,
        fingerprint=fingerprint,
    )


def evaluate_model(
    model,
    dataset: list,
    mode: str = "fusion",
    thresholds=EVAL_THRESHOLDS,
    label: str = "eval",
    fingerprint: str = "",
    corruption: CorruptionSpec | None = None,
    corruption_seed: int = 0,
    n_beams: int | None = None,
) -> EvalReport:
    """Evaluate a detector (or its stage-1-only baseline) over a dataset,
    optionally through a LiDAR corruption applied per scene."""
    dets_all, gts_all = [], []
    model.eval()
    for sample in dataset:
        cloud = sample.cloud
        if corruption is not None:
            cloud = corruption.apply(
                cloud, seed=(corruption_seed + sample.index), total_beams=n_beams
            )
        if mode == "proposal":
            dets = model.predict_proposal_only(cloud)
        else:
            dets = model.predict(cloud, sample.images, sample.calibs)
        dets_all.append(dets)
        gts_all.append(sample.gt_boxes)
    return evaluate_detections(
        dets_all, gts_all, model.cfg.num_classes, thresholds, label, fingerprint
    )


# ---------------------------------------------------------------------------
# Robustness suite


def default_protocols(seed: int = 0) -> list:
    """Clean + 2 beam modes + 3 keep ratios + 4 FOV half-angles."""
    rows = [None]
    rows += [
        CorruptionSpec(kind="beams", beam_mode=BeamMode.BEAM16, by_beam_index=True, seed=seed),
        CorruptionSpec(kind="beams", beam_mode=BeamMode.BEAM4, by_beam_index=True, seed=seed),
    ]
    rows += [CorruptionSpec(kind="ratio", keep_ratio=r, seed=seed) for r in (0.5, 0.25, 0.125)]
    rows += [
        CorruptionSpec(kind="fov", half_angle=a, seed=seed)
        for a in (5 * math.pi / 6, 2 * math.pi / 3, math.pi / 2, math.pi / 3)
    ]
    return rows


def robustness_suite(
    model,
    dataset: list,
    protocols: list | None = None,
    seed: int = 0,
    n_beams: int | None = None,
    fingerprint: str = "",
) -> list:
    """Evaluate the fusion model and the stage-1-only baseline under every
    protocol, without re-training. Returns rows of
    {"protocol", "model", "report"}."""
    protocols = default_protocols(seed) if protocols is None else protocols
    rows = []
    for spec in protocols:
        plabel = "clean" if spec is None else spec.label()
        for mode in ("fusion", "proposal"):
            report = evaluate_model(
                model,
                dataset,
                mode=mode,
                label=f"{plabel}/{mode}",
                corruption=spec,
                corruption_seed=seed,
                n_beams=n_beams,
                fingerprint=fingerprint,
            )
            rows.append({"protocol": plabel, "model": mode, "report": report})
    return rows


def robustness_table(rows: list) -> str:
    """Plain-text table, one line per (protocol, model)."""
    out = [f"{'protocol':<18} {'model':<9} {'mAP':>7} {'mAP@2m':>7} {'mATE':>7} {'mAOE':>7}"]
    for r in rows:
        rep = r["report"]
        mate = f"{rep.mate:.3f}" if rep.mate is not None else "  -  "
        maoe = f"{rep.maoe:.3f}" if rep.maoe is not None else "  -  "
        out.append(
            f"{r['protocol']:<18} {r['model']:<9} {rep.mean_ap:7.3f} "
            f"{rep.map_at(TP_METRIC_THRESHOLD):7.3f} {mate:>7} {maoe:>7}"
        )
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Ablation suite


def ablation_variants() -> list:
    """The component-toggle rows, decoding-order variants, and fusion
    depth sweeps. Each entry: (name, overrides dict for ModelConfig)."""
    return [
        ("components/a) proposal-only", {"decoder_order": ""}),
        ("components/b) +CDB", {"image_encoder_enabled": False, "pse_enabled": False}),
        ("components/c) +CDB+IFE", {"pse_enabled": False}),
        ("components/d) +CDB+PSE", {"image_encoder_enabled": False}),
        ("components/e) full", {}),
        ("order/(LC)3", {"decoder_order": "(LC)3"}),
        ("order/3L3C", {"decoder_order": "3L3C"}),
        ("order/3C3L", {"decoder_order": "3C3L"}),
        ("order/(CL)3", {"decoder_order": "(CL)3"}),
        ("encoder-layers/1", {"encoder_layers": 1}),
        ("encoder-layers/2", {"encoder_layers": 2}),
        ("encoder-layers/3", {"encoder_layers": 3}),
        ("blocks/2", {"decoder_order": "(CL)2"}),
        ("blocks/3", {"decoder_order": "(CL)3"}),
        ("blocks/4", {"decoder_order": "(CL)4"}),
    ]


def ablation_suite(
    train_dataset: list,
    val_dataset: list,
    model_cfg,
    voxel_cfg,
    train_cfg,
    weights=None,
    variants: list | None = None,
    log=None,
) -> list:
    """Train and evaluate every requested configuration variant, sharing a
    single stage-1 checkpoint (all toggles are stage-2 concerns).

    Returns rows of {"variant", "order", "mAP", "mAP@2m", "finite"};
    directional expectations are logged, not asserted.
    """
    from .fusion import FusionDetector, ModelConfig
    from .trainer import train_stage1, train_stage2

    variants = ablation_variants() if variants is None else variants
    stage1_model, trace1 = train_stage1(
        train_dataset, train_cfg, model_cfg, voxel_cfg, weights, log=log
    )
    stage1_state = {k: v.clone() for k, v in stage1_model.state_dict().items()}

    rows = []
    for name, overrides in variants:
        cfg_v = ModelConfig.from_dict({**model_cfg.to_dict(), **overrides})
        torch.manual_seed(train_cfg.seed + 1)
        model = FusionDetector(cfg_v, voxel_cfg)
        own = model.state_dict()
        for k, v in stage1_state.items():
            if k in own and own[k].shape == v.shape:
                own[k] = v.clone()
        model.load_state_dict(own)
        trace = []
        if model.blocks:
            model, trace = train_stage2(train_dataset, model, train_cfg, weights, log=log)
        finite = all(math.isfinite(x) for x in trace)
        report = evaluate_model(
            model, val_dataset, mode="fusion" if model.blocks else "proposal", label=name
        )
        rows.append(
            {
                "variant": name,
                "order": cfg_v.decoder_order,
                "mAP": report.mean_ap,
                "mAP@2m": report.map_at(TP_METRIC_THRESHOLD),
                "finite": finite,
            }
        )
        if log is not None:
            log({"ablation": name, "mAP": report.mean_ap, "finite": finite})
    return rows


# ---------------------------------------------------------------------------
# BEV plots


def plot_bev(sample: SceneSample, dets: list, path, score_min: float = 0.3):
    """Ground truth (green) vs predictions (red) in bird's-eye view."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    pts = sample.cloud.xyz
    ax.scatter(pts[:, 0], pts[:, 1], s=0.2, c="#b0b0b0", linewidths=0)
    for b in sample.gt_boxes:
        corners = b.bev_corners()
        ax.fill(corners[:, 0], corners[:, 1], facecolor="none", edgecolor="green", lw=1.2)
    for b in dets:
        if b.score < score_min:
            continue
        corners = b.bev_corners()
        ax.fill(corners[:, 0], corners[:, 1], facecolor="none", edgecolor="red", lw=0.9)
    ax.set_aspect("equal")
    ax.set_xlim(-22, 22)
    ax.set_ylim(-22, 22)
    fig.savefig(path, dpi=110)
    plt.close(fig)
