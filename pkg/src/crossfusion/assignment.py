"""Bipartite label assignment and set-prediction losses.

Matching cost per (prediction, ground-truth) pair is a weighted sum of a
focal classification cost, an L1 cost over BEV center / size / (sin, cos)
yaw encoding, and a rotated-BEV IoU cost. The minimum-cost assignment is
solved exactly; ties between equally optimal assignments are broken
toward the lowest (row, col) lexicographic pair list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .geometry import Box3D, rotated_iou_bev_tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_EPS = 1e-7


@dataclass
class CostWeights:
    """Coefficients of the classification / regression / IoU cost terms.

    The same weights mix the corresponding loss terms.
    """

    cls: float = 1.0
    reg: float = 0.25
    iou: float = 0.25

    def __post_init__(self):
        if self.cls < 0 or self.reg < 0 or self.iou < 0:
            raise ValueError("cost weights must be nonnegative")
        if self.cls == 0 and self.reg == 0 and self.iou == 0:
            raise ValueError("cost weights must not all be zero")


@dataclass
class MatchResult:
    pairs: list  # (prediction index, gt index), sorted by prediction index
    unmatched_preds: list
    total: float


@dataclass
class StagePrediction:
    """Decoded per-query outputs of one supervised stage.

    sizes are in meters (already exponentiated); yaw_enc is the raw
    (sin, cos) regression, decoded with atan2 (scale-invariant).
    """

    class_logits: torch.Tensor  # (N, num_classes)
    centers: torch.Tensor  # (N, 3)
    sizes: torch.Tensor  # (N, 3) as (w, l, h)
    yaw_enc: torch.Tensor  # (N, 2) as (sin, cos)
    name: str = "stage"

    @property
    def n(self) -> int:
        return self.class_logits.shape[0]

    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.class_logits)

    def bev_boxes(self) -> torch.Tensor:
        """(N, 5) rows of [cx, cy, w, l, yaw] for IoU computations."""
        yaw = torch.atan2(self.yaw_enc[:, 0], self.yaw_enc[:, 1])
        return torch.cat(
            [self.centers[:, :2], self.sizes[:, 0:1], self.sizes[:, 1:2], yaw.unsqueeze(1)],
            dim=1,
        )

    def to_boxes(self) -> list:
        """Decode one scored box per query."""
        probs = self.probs().detach().cpu().numpy()
        centers = self.centers.detach().cpu().numpy()
        sizes = self.sizes.detach().cpu().numpy()
        yaw = torch.atan2(self.yaw_enc[:, 0], self.yaw_enc[:, 1]).detach().cpu().numpy()
        out = []
        for i in range(self.n):
            cls = int(probs[i].argmax())
            out.append(
                Box3D(
                    center=_point(centers[i]),
                    size=(max(sizes[i, 0], 1e-3), max(sizes[i, 1], 1e-3), max(sizes[i, 2], 1e-3)),
                    yaw=float(yaw[i]),
                    class_id=cls,
                    score=float(probs[i, cls]),
                )
            )
        return out


def _point(a):
    from .geometry import Point3

    return Point3(float(a[0]), float(a[1]), float(a[2]))


def focal_loss(p: float, target: int, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    """Scalar focal loss on a probability; p is clamped to (eps, 1-eps)."""
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    if target == 1:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p**gamma * math.log(1.0 - p)


def focal_loss_t(
    probs: torch.Tensor, targets: torch.Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA
) -> torch.Tensor:
    """Elementwise focal loss on probabilities against {0, 1} targets."""
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    pos = -alpha * (1.0 - p) ** gamma * torch.log(p)
    neg = -(1.0 - alpha) * p**gamma * torch.log(1.0 - p)
    return torch.where(targets > 0.5, pos, neg)


def gt_tensors(gt_boxes: list, dtype, device=None):
    """Stack ground-truth boxes into (centers, sizes, yaw_enc, classes)."""
    if len(gt_boxes) == 0:
        z = torch.zeros(0, 3, dtype=dtype, device=device)
        return z, z.clone(), torch.zeros(0, 2, dtype=dtype, device=device), torch.zeros(
            0, dtype=torch.long, device=device
        )
    centers = torch.tensor(
        [[b.center.x, b.center.y, b.center.z] for b in gt_boxes], dtype=dtype, device=device
    )
    sizes = torch.tensor([list(b.size) for b in gt_boxes], dtype=dtype, device=device)
    yaw_enc = torch.tensor(
        [[math.sin(b.yaw), math.cos(b.yaw)] for b in gt_boxes], dtype=dtype, device=device
    )
    classes = torch.tensor([b.class_id for b in gt_boxes], dtype=torch.long, device=device)
    return centers, sizes, yaw_enc, classes


def pairwise_cost(pred: StagePrediction, gt_boxes: list, weights: CostWeights) -> torch.Tensor:
    """(N, G) matching-cost matrix.

    cost[i][j] = cls * focal(p_i[class_j], 1)
               + reg * L1 over (BEV center, size, yaw encoding)
               + iou * (1 - rotated BEV IoU)
    """
    n = pred.n
    g = len(gt_boxes)
    if g == 0:
        return torch.zeros(n, 0, dtype=pred.centers.dtype)
    centers, sizes, yaw_enc, classes = gt_tensors(gt_boxes, pred.centers.dtype, pred.centers.device)

    probs = pred.probs()[:, classes]  # (N, G)
    cls_cost = focal_loss_t(probs, torch.ones_like(probs))

    pred_vec = torch.cat([pred.centers[:, :2], pred.sizes, pred.yaw_enc], dim=1)  # (N, 7)
    gt_vec = torch.cat([centers[:, :2], sizes, yaw_enc], dim=1)  # (G, 7)
    reg_cost = torch.cdist(pred_vec, gt_vec, p=1)

    pred_bev = pred.bev_boxes().unsqueeze(1).expand(n, g, 5).reshape(-1, 5)
    gt_yaw = torch.tensor([b.yaw for b in gt_boxes], dtype=centers.dtype, device=centers.device)
    gt_bev = torch.cat(
        [centers[:, :2], sizes[:, 0:1], sizes[:, 1:2], gt_yaw.unsqueeze(1)], dim=1
    ).unsqueeze(0).expand(n, g, 5).reshape(-1, 5)
    iou = rotated_iou_bev_tensor(pred_bev, gt_bev).reshape(n, g)

    return weights.cls * cls_cost + weights.reg * reg_cost + weights.iou * (1.0 - iou)


def _lsa_total(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    ri, ci = linear_sum_assignment(cost)
    return float(cost[ri, ci].sum())


def hungarian(cost) -> MatchResult:
    """Minimum-total-cost assignment with deterministic tie-breaking.

    Among all optimal assignments, returns the one whose (row, col) pair
    list, sorted by row, is lexicographically smallest. Matches
    min(#rows, #cols) pairs.
    """
    cost = np.asarray(
        cost.detach().cpu().numpy() if isinstance(cost, torch.Tensor) else cost, dtype=np.float64
    )
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost entries must be finite")
    n_rows, n_cols = cost.shape
    n_pairs = min(n_rows, n_cols)
    if n_pairs == 0:
        return MatchResult(pairs=[], unmatched_preds=list(range(n_rows)), total=0.0)

    total = _lsa_total(cost)
    tol = 1e-9 * max(1.0, abs(total))

    pairs = []
    cols_left = list(range(n_cols))
    fixed = 0.0
    prev_row = -1
    for slot in range(n_pairs):
        remaining = n_pairs - slot
        found = False
        for r in range(prev_row + 1, n_rows - remaining + 1):
            for c in cols_left:
                rest_cols = [cc for cc in cols_left if cc != c]
                sub = cost[np.ix_(range(r + 1, n_rows), rest_cols)] if remaining > 1 else cost[0:0, 0:0]
                cand = fixed + cost[r, c] + _lsa_total(sub)
                if cand <= total + tol:
                    pairs.append((r, c))
                    cols_left.remove(c)
                    fixed += cost[r, c]
                    prev_row = r
                    found = True
                    break
            if found:
                break
        if not found:  # should be unreachable for finite costs
            raise RuntimeError("lexicographic refinement failed to extend the assignment")

    matched_rows = {r for r, _ in pairs}
    unmatched = [r for r in range(n_rows) if r not in matched_rows]
    return MatchResult(pairs=pairs, unmatched_preds=unmatched, total=total)


def match_stage(pred: StagePrediction, gt_boxes: list, weights: CostWeights) -> MatchResult:
    if len(gt_boxes) == 0:
        return MatchResult(pairs=[], unmatched_preds=list(range(pred.n)), total=0.0)
    with torch.no_grad():
        cost = pairwise_cost(pred, gt_boxes, weights)
    return hungarian(cost)


def stage_loss(
    pred: StagePrediction,
    gt_boxes: list,
    weights: CostWeights,
    match: MatchResult | None = None,
):
    """Set-prediction loss for one stage.

    Classification: focal loss over all (query, class) entries, one-hot
    targets on matched queries, all-background otherwise. Regression / IoU:
    on matched pairs only. Terms are normalized by max(#gt, 1).
    """
    if match is None:
        match = match_stage(pred, gt_boxes, weights)
    dtype = pred.centers.dtype
    device = pred.centers.device
    centers, sizes, yaw_enc, classes = gt_tensors(gt_boxes, dtype, device)
    norm = float(max(len(gt_boxes), 1))

    cls_targets = torch.zeros(pred.n, pred.class_logits.shape[1], dtype=dtype, device=device)
    for i, j in match.pairs:
        cls_targets[i, classes[j]] = 1.0
    cls = focal_loss_t(pred.probs(), cls_targets).sum() / norm

    if match.pairs:
        pi = torch.tensor([i for i, _ in match.pairs], dtype=torch.long, device=device)
        gj = torch.tensor([j for _, j in match.pairs], dtype=torch.long, device=device)
        pred_vec = torch.cat([pred.centers, pred.sizes, pred.yaw_enc], dim=1)[pi]
        gt_vec = torch.cat([centers, sizes, yaw_enc], dim=1)[gj]
        reg = (pred_vec - gt_vec).abs().sum() / norm
        iou = rotated_iou_bev_tensor(pred.bev_boxes()[pi], _gt_bev(gt_boxes, dtype, device)[gj])
        iou_loss = (1.0 - iou).sum() / norm
    else:
        reg = torch.zeros((), dtype=dtype, device=device)
        iou_loss = torch.zeros((), dtype=dtype, device=device)

    total = weights.cls * cls + weights.reg * reg + weights.iou * iou_loss
    return total, {
        "cls": float(cls.detach()),
        "reg": float(reg.detach()),
        "iou": float(iou_loss.detach()),
        "total": float(total.detach()),
        "matched": len(match.pairs),
    }


def _gt_bev(gt_boxes: list, dtype, device) -> torch.Tensor:
    return torch.tensor(
        [[b.center.x, b.center.y, b.w, b.l, b.yaw] for b in gt_boxes], dtype=dtype, device=device
    )


def total_loss(
    stages: list,
    gt_boxes: list,
    weights: CostWeights,
    fixed_matches: list | None = None,
):
    """Average the per-stage set loss over all supervised stages.

    Numerically identical to averaging :func:`stage_loss` per stage; the
    matched-pair IoU terms of all stages run through one batched kernel
    call. ``fixed_matches`` (one MatchResult per stage) bypasses
    re-matching; used by gradient checks, where the piecewise-constant
    matching must be held fixed across perturbed evaluations.
    """
    if not stages:
        raise ValueError("need at least one prediction stage")
    dtype = stages[0].centers.dtype
    device = stages[0].centers.device
    centers, sizes, yaw_enc, classes = gt_tensors(gt_boxes, dtype, device)
    gt_vec_all = torch.cat([centers, sizes, yaw_enc], dim=1)
    gt_bev_all = _gt_bev(gt_boxes, dtype, device) if gt_boxes else None
    norm = float(max(len(gt_boxes), 1))

    cls_terms, reg_terms = [], []
    iou_pred_rows, iou_gt_rows, iou_stage_of = [], [], []
    matches = []
    for k, pred in enumerate(stages):
        match = fixed_matches[k] if fixed_matches is not None else match_stage(
            pred, gt_boxes, weights
        )
        matches.append(match)
        cls_targets = torch.zeros(pred.n, pred.class_logits.shape[1], dtype=dtype, device=device)
        for i, j in match.pairs:
            cls_targets[i, classes[j]] = 1.0
        cls_terms.append(focal_loss_t(pred.probs(), cls_targets).sum() / norm)
        if match.pairs:
            pi = torch.tensor([i for i, _ in match.pairs], dtype=torch.long, device=device)
            gj = torch.tensor([j for _, j in match.pairs], dtype=torch.long, device=device)
            pred_vec = torch.cat([pred.centers, pred.sizes, pred.yaw_enc], dim=1)[pi]
            reg_terms.append((pred_vec - gt_vec_all[gj]).abs().sum() / norm)
            iou_pred_rows.append(pred.bev_boxes()[pi])
            iou_gt_rows.append(gt_bev_all[gj])
            iou_stage_of.extend([k] * len(match.pairs))
        else:
            reg_terms.append(torch.zeros((), dtype=dtype, device=device))

    iou_terms = [torch.zeros((), dtype=dtype, device=device) for _ in stages]
    if iou_pred_rows:
        ious = rotated_iou_bev_tensor(torch.cat(iou_pred_rows), torch.cat(iou_gt_rows))
        one_minus = 1.0 - ious
        for k in range(len(stages)):
            sel = [i for i, s in enumerate(iou_stage_of) if s == k]
            if sel:
                iou_terms[k] = one_minus[sel].sum() / norm

    terms = []
    breakdown = {}
    for k, pred in enumerate(stages):
        loss_k = weights.cls * cls_terms[k] + weights.reg * reg_terms[k] + weights.iou * iou_terms[k]
        terms.append(loss_k)
        breakdown[pred.name if pred.name != "stage" else f"stage{k}"] = {
            "cls": float(cls_terms[k].detach()),
            "reg": float(reg_terms[k].detach()),
            "iou": float(iou_terms[k].detach()),
            "total": float(loss_k.detach()),
            "matched": len(matches[k].pairs),
        }
    total = torch.stack(terms).mean()
    return total, breakdown
