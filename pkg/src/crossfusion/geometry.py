"""Shared geometric primitives: camera projection, spherical coordinates,
grid sampling, and oriented-box operations.

Coordinate conventions used across the package:

Ego frame (right-handed): x forward, y left, z up, meters. LiDAR sits at
the ego origin.

Camera frame (right-handed, computer vision standard): x right, y down,
z forward along the optical axis. ``CameraCalib.rotation`` /
``CameraCalib.translation`` map ego points into this frame:
``p_cam = R @ p_ego + t``.

Image frame: u right, v down, pixels, origin at the top-left corner.

BEV grids: ``data[c, row, col]`` with ``col`` indexing x and ``row``
indexing y; row 0 / col 0 sit at the minimum corner of the extent.

Normalized sampling coordinates follow the align-corners convention:
0 maps to the first cell center, 1 to the last cell center. Locations
outside [0, 1]^2 sample the zero vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

EPS_DEPTH = 1e-6


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    w = math.remainder(a, math.tau)
    if w <= -math.pi:
        w = math.pi
    return w


@dataclass(frozen=True)
class Point3:
    """A 3D point in the ego/world frame, meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError("Point3 components must be finite")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Point3":
        return Point3(float(a[0]), float(a[1]), float(a[2]))


@dataclass
class CameraCalib:
    """Pinhole intrinsics plus a rigid ego-to-camera extrinsic transform."""

    fx: float
    fy: float
    u0: float
    v0: float
    rotation: np.ndarray  # 3x3, ego -> camera
    translation: np.ndarray  # 3-vector, meters
    image_w: int
    image_h: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.u0 < self.image_w and 0 < self.v0 < self.image_h):
            raise ValueError("principal point must lie inside the image")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.u0], [0.0, self.fy, self.v0], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "u0": self.u0,
            "v0": self.v0,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "image_w": self.image_w,
            "image_h": self.image_h,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraCalib":
        return CameraCalib(
            fx=d["fx"],
            fy=d["fy"],
            u0=d["u0"],
            v0=d["v0"],
            rotation=np.array(d["rotation"]),
            translation=np.array(d["translation"]),
            image_w=d["image_w"],
            image_h=d["image_h"],
        )


@dataclass
class Box3D:
    """An oriented 3D box: center, (w, l, h) size, yaw about +z.

    ``yaw`` is the heading of the length axis, wrapped into (-pi, pi].
    ``score`` is only meaningful on predictions.
    """

    center: Point3
    size: tuple  # (w, l, h), meters
    yaw: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        w, l, h = self.size
        if not (w > 0 and l > 0 and h > 0):
            raise ValueError("box size components must be strictly positive")
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")
        self.size = (float(w), float(l), float(h))
        self.yaw = wrap_angle(float(self.yaw))

    @property
    def w(self) -> float:
        return self.size[0]

    @property
    def l(self) -> float:
        return self.size[1]

    @property
    def h(self) -> float:
        return self.size[2]

    def bev_corners(self) -> np.ndarray:
        """Corners of the yaw-rotated BEV rectangle, CCW, shape (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.center.x, self.center.y])

    def corners_3d(self) -> np.ndarray:
        """All eight corners, shape (8, 3): bottom four then top four."""
        bev = self.bev_corners()
        zs = np.array([self.center.z - self.h / 2.0, self.center.z + self.h / 2.0])
        out = np.zeros((8, 3))
        for i, z in enumerate(zs):
            out[4 * i : 4 * i + 4, :2] = bev
            out[4 * i : 4 * i + 4, 2] = z
        return out

    def to_dict(self) -> dict:
        return {
            "center": [self.center.x, self.center.y, self.center.z],
            "size": list(self.size),
            "yaw": self.yaw,
            "class": self.class_id,
        }

    @staticmethod
    def from_dict(d: dict) -> "Box3D":
        return Box3D(
            center=Point3(*d["center"]),
            size=tuple(d["size"]),
            yaw=d["yaw"],
            class_id=d["class"],
            score=d.get("score", 1.0),
        )


@dataclass
class BEVGrid:
    """A dense metric bird's-eye-view feature map.

    ``data`` has shape (d, H, W); the extent is the metric rectangle the
    grid covers, with cell (row, col) centered at
    (x_min + (col + 0.5) * res, y_min + (row + 0.5) * res).
    """

    data: torch.Tensor
    extent: tuple  # ((x_min, x_max), (y_min, y_max))
    resolution: float

    def __post_init__(self):
        (x0, x1), (y0, y1) = self.extent
        d, h, w = self.data.shape
        if abs((x1 - x0) / self.resolution - w) > 1e-6 or abs((y1 - y0) / self.resolution - h) > 1e-6:
            raise ValueError("grid shape inconsistent with extent/resolution")

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    def metric_to_normalized(self, xy: torch.Tensor) -> torch.Tensor:
        """Map metric (x, y) points, shape (..., 2), to align-corners
        normalized sampling coordinates (x_norm, y_norm)."""
        (x0, _), (y0, _) = self.extent
        res = self.resolution
        tx = (xy[..., 0] - x0 - res / 2.0) / (res * max(self.width - 1, 1))
        ty = (xy[..., 1] - y0 - res / 2.0) / (res * max(self.height - 1, 1))
        return torch.stack([tx, ty], dim=-1)


# ---------------------------------------------------------------------------
# Camera projection


def project_to_camera(p: Point3, calib: CameraCalib, margin: float = 0.0):
    """Project an ego-frame point through a pinhole camera.

    Returns (u, v, depth) in pixels/meters, or None if the point lies at or
    behind the camera plane (depth <= 1e-6 m) or projects outside the image
    rectangle expanded by ``margin`` pixels.
    """
    p_cam = calib.rotation @ p.to_array() + calib.translation
    depth = p_cam[2]
    if depth <= EPS_DEPTH:
        return None
    u = calib.fx * p_cam[0] / depth + calib.u0
    v = calib.fy * p_cam[1] / depth + calib.v0
    if not (-margin <= u <= calib.image_w + margin and -margin <= v <= calib.image_h + margin):
        return None
    return (float(u), float(v), float(depth))


def unproject_from_camera(u: float, v: float, depth: float, calib: CameraCalib) -> Point3:
    """Inverse of :func:`project_to_camera` for a known depth."""
    x = (u - calib.u0) * depth / calib.fx
    y = (v - calib.v0) * depth / calib.fy
    p_cam = np.array([x, y, depth])
    p = calib.rotation.T @ (p_cam - calib.translation)
    return Point3.from_array(p)


def project_points_batch(points: np.ndarray, calib: CameraCalib, margin: float = 0.0):
    """Vectorized projection of (n, 3) ego points.

    Returns (uvd (n, 3) float64, valid (n,) bool); invalid rows are
    meaningless.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p_cam = pts @ calib.rotation.T + calib.translation
    depth = p_cam[:, 2]
    safe = np.where(depth > EPS_DEPTH, depth, 1.0)
    u = calib.fx * p_cam[:, 0] / safe + calib.u0
    v = calib.fy * p_cam[:, 1] / safe + calib.v0
    valid = (
        (depth > EPS_DEPTH)
        & (u >= -margin)
        & (u <= calib.image_w + margin)
        & (v >= -margin)
        & (v <= calib.image_h + margin)
    )
    return np.stack([u, v, depth], axis=1), valid


# ---------------------------------------------------------------------------
# Spherical coordinates


def to_spherical(p: Point3):
    """Cartesian -> (range, azimuth, inclination).

    azimuth = atan2(y, x) in (-pi, pi]; inclination = atan2(z, hypot(x, y))
    in [-pi/2, pi/2].
    """
    r = math.sqrt(p.x * p.x + p.y * p.y + p.z * p.z)
    if r == 0.0:
        raise ValueError("degenerate point")
    azimuth = math.atan2(p.y, p.x)
    if azimuth <= -math.pi:
        azimuth = math.pi
    inclination = math.atan2(p.z, math.hypot(p.x, p.y))
    return (r, azimuth, inclination)


def from_spherical(r: float, azimuth: float, inclination: float) -> Point3:
    xy = r * math.cos(inclination)
    return Point3(xy * math.cos(azimuth), xy * math.sin(azimuth), r * math.sin(inclination))


def spherical_angles_batch(points: np.ndarray):
    """Vectorized azimuth/inclination for an (n, 3) array. Returns
    (range, azimuth, inclination) arrays."""
    pts = np.asarray(points, dtype=np.float64)
    r = np.linalg.norm(pts, axis=1)
    azimuth = np.arctan2(pts[:, 1], pts[:, 0])
    inclination = np.arctan2(pts[:, 2], np.hypot(pts[:, 0], pts[:, 1]))
    return r, azimuth, inclination


# ---------------------------------------------------------------------------
# Grid sampling


def grid_sample_normalized(grid: torch.Tensor, locs: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling of a (d, H, W) grid at (..., 2) normalized
    (x, y) locations under the align-corners convention.

    Locations outside the closed unit square yield exact zeros (and zero
    gradient). Returns (..., d).
    """
    if grid.dim() != 3:
        raise ValueError("grid must have shape (d, H, W)")
    shape = locs.shape[:-1]
    flat = locs.reshape(1, 1, -1, 2)
    inside = (
        (flat[..., 0] >= 0.0)
        & (flat[..., 0] <= 1.0)
        & (flat[..., 1] >= 0.0)
        & (flat[..., 1] <= 1.0)
    )
    gs = flat * 2.0 - 1.0  # grid_sample expects [-1, 1]
    sampled = torch.nn.functional.grid_sample(
        grid.unsqueeze(0), gs.to(grid.dtype), mode="bilinear",
        padding_mode="zeros", align_corners=True,
    )  # (1, d, 1, n)
    sampled = sampled[0, :, 0, :] * inside.reshape(1, -1).to(grid.dtype)
    return sampled.T.reshape(*shape, grid.shape[0])


def batched_grid_sample(grids: torch.Tensor, locs: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling of (B, C, H, W) grids at (B, M, 2) normalized
    (x, y) locations; same align-corners / hard-zero-outside convention as
    :func:`grid_sample_normalized`. Returns (B, C, M)."""
    b, m, _ = locs.shape
    inside = (
        (locs[..., 0] >= 0.0)
        & (locs[..., 0] <= 1.0)
        & (locs[..., 1] >= 0.0)
        & (locs[..., 1] <= 1.0)
    )
    gs = (locs * 2.0 - 1.0).reshape(b, m, 1, 2)
    out = torch.nn.functional.grid_sample(
        grids, gs.to(grids.dtype), mode="bilinear", padding_mode="zeros", align_corners=True
    )[..., 0]
    return out * inside.reshape(b, 1, m).to(grids.dtype)


def bilinear_sample(grid, loc) -> np.ndarray:
    """Sample a (d, H, W) grid at one normalized (x, y) location.

    0 maps to the first cell center and 1 to the last (align-corners);
    out-of-bounds locations return the zero vector.
    """
    g = grid if isinstance(grid, torch.Tensor) else torch.as_tensor(np.asarray(grid, dtype=np.float64))
    if g.numel() == 0:
        raise ValueError("grid must be non-empty")
    loc_t = torch.as_tensor(loc, dtype=g.dtype if g.is_floating_point() else torch.float64)
    out = grid_sample_normalized(g.to(loc_t.dtype), loc_t.reshape(2))
    return out.detach().cpu().numpy()


# ---------------------------------------------------------------------------
# Rotated BEV IoU via convex polygon clipping


def _box_corners_t(boxes: torch.Tensor) -> torch.Tensor:
    """(n, 5) [cx, cy, w, l, yaw] -> CCW corners (n, 4, 2)."""
    cx, cy, w, l, yaw = boxes.unbind(-1)
    c, s = torch.cos(yaw), torch.sin(yaw)
    hl, hw = l / 2.0, w / 2.0
    lx = torch.stack([hl, -hl, -hl, hl], dim=-1)
    ly = torch.stack([hw, hw, -hw, -hw], dim=-1)
    gx = lx * c.unsqueeze(-1) - ly * s.unsqueeze(-1) + cx.unsqueeze(-1)
    gy = lx * s.unsqueeze(-1) + ly * c.unsqueeze(-1) + cy.unsqueeze(-1)
    return torch.stack([gx, gy], dim=-1)


def _clip_by_edge(verts, valid, e0, e1, cap):
    """One Sutherland-Hodgman step on batched padded polygons.

    verts: (n, cap, 2); valid: (n, cap) bool; e0, e1: (n, 2) edge endpoints
    of a CCW clip polygon (interior is to the left).
    """
    n = verts.shape[0]
    count = valid.sum(dim=1, keepdim=True)  # (n, 1)
    idx = torch.arange(cap, device=verts.device).expand(n, cap)
    nxt = torch.where(idx + 1 < count, idx + 1, torch.zeros_like(idx))

    edge = (e1 - e0).unsqueeze(1)  # (n, 1, 2)
    rel = verts - e0.unsqueeze(1)
    d = edge[..., 0] * rel[..., 1] - edge[..., 1] * rel[..., 0]  # (n, cap)
    inside = d >= 0

    v_next = torch.gather(verts, 1, nxt.unsqueeze(-1).expand(-1, -1, 2))
    d_next = torch.gather(d, 1, nxt)
    inside_next = torch.gather(inside, 1, nxt)

    crossing = valid & (inside != inside_next)
    denom = torch.where(crossing, d - d_next, torch.ones_like(d))
    t = (d / denom).unsqueeze(-1)
    inter = verts + t * (v_next - verts)

    out = torch.empty(n, 2 * cap, 2, dtype=verts.dtype, device=verts.device)
    out[:, 0::2] = verts
    out[:, 1::2] = inter
    keep = torch.zeros(n, 2 * cap, dtype=torch.bool, device=verts.device)
    keep[:, 0::2] = valid & inside
    keep[:, 1::2] = crossing

    # Stable compaction keeps polygon vertex order.
    order = torch.argsort((~keep).to(torch.int8), dim=1, stable=True)
    out = torch.gather(out, 1, order.unsqueeze(-1).expand(-1, -1, 2))[:, :cap]
    keep = torch.gather(keep, 1, order)[:, :cap]
    return out, keep


def _polygon_area(verts: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Shoelace area of batched padded CCW polygons."""
    n, cap, _ = verts.shape
    count = valid.sum(dim=1, keepdim=True)
    idx = torch.arange(cap, device=verts.device).expand(n, cap)
    nxt = torch.where(idx + 1 < count, idx + 1, torch.zeros_like(idx))
    v_next = torch.gather(verts, 1, nxt.unsqueeze(-1).expand(-1, -1, 2))
    cross = verts[..., 0] * v_next[..., 1] - verts[..., 1] * v_next[..., 0]
    cross = cross * valid.to(verts.dtype)
    area = 0.5 * cross.sum(dim=1)
    return torch.clamp(area, min=0.0) * (count.squeeze(1) >= 3).to(verts.dtype)


def rotated_iou_bev_tensor(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    """IoU of yaw-rotated BEV rectangles, batched and differentiable.

    boxes are (n, 5) rows of [cx, cy, w, l, yaw]; returns (n,).
    """
    cap = 8
    sub = _box_corners_t(boxes_a)
    clip = _box_corners_t(boxes_b)
    n = sub.shape[0]
    verts = torch.zeros(n, cap, 2, dtype=sub.dtype, device=sub.device)
    verts[:, :4] = sub
    valid = torch.zeros(n, cap, dtype=torch.bool, device=sub.device)
    valid[:, :4] = True
    for k in range(4):
        verts, valid = _clip_by_edge(verts, valid, clip[:, k], clip[:, (k + 1) % 4], cap)
    inter = _polygon_area(verts, valid)
    area_a = boxes_a[:, 2] * boxes_a[:, 3]
    area_b = boxes_b[:, 2] * boxes_b[:, 3]
    union = area_a + area_b - inter
    return inter / torch.clamp(union, min=1e-12)


def box_to_bev_tensor(box: Box3D) -> torch.Tensor:
    return torch.tensor(
        [box.center.x, box.center.y, box.w, box.l, box.yaw], dtype=torch.float64
    )


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """Exact IoU of the two boxes' yaw-rotated BEV rectangles."""
    if a.w * a.l <= 0 or b.w * b.l <= 0:
        raise ValueError("degenerate zero-area box")
    iou = rotated_iou_bev_tensor(
        box_to_bev_tensor(a).unsqueeze(0), box_to_bev_tensor(b).unsqueeze(0)
    )
    return float(iou[0])


# ---------------------------------------------------------------------------
# Box containment


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Indices of (n, 3+) points inside the box (closed intervals).

    Points are expressed in the box's yaw-aligned frame; containment is
    |x'| <= l/2, |y'| <= w/2, |z'| <= h/2 about the center.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros(0, dtype=np.int64)
    rel = pts[:, :3] - np.array([box.center.x, box.center.y, box.center.z])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xp = rel[:, 0] * c + rel[:, 1] * s
    yp = -rel[:, 0] * s + rel[:, 1] * c
    mask = (
        (np.abs(xp) <= box.l / 2.0)
        & (np.abs(yp) <= box.w / 2.0)
        & (np.abs(rel[:, 2]) <= box.h / 2.0)
    )
    return np.nonzero(mask)[0]
