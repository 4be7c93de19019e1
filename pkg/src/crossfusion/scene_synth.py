"""Deterministic synthetic multi-modal scenes: a ray-cast LiDAR sweep with
beam indices, P rasterized camera views, calibrations, and ground-truth
boxes.

Every scene is generated from an independent random stream derived from
(dataset seed, scene index), so scenes are reproducible in isolation and
generation order does not matter.

Dataset directory layout (all multi-byte values little-endian):

    meta.json                 config snapshot, seed, fingerprint
    scenes/<idx>/points.bin   packed records: x, y, z, intensity (float32)
                              followed by beam_id (uint16); 18 bytes/point
    scenes/<idx>/cam<p>.npyish  raw tensor: 8-byte magic b"CFTENSR1",
                              uint32 ndim, uint32 dims[ndim], float32 data
                              in C order
    scenes/<idx>/calib.json   {"cameras": [...]} pinhole + extrinsics
    scenes/<idx>/gt.json      {"boxes": [{center, size, yaw, class}], ...}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, CameraCalib, Point3, project_points_batch

POINT_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("beam_id", "<u2")]
)
TENSOR_MAGIC = b"CFTENSR1"


@dataclass
class PointCloud:
    """A LiDAR sweep: (n, 3) float32 coordinates plus per-point intensity
    in [0, 1] and the emitting beam's index."""

    xyz: np.ndarray
    intensity: np.ndarray
    beam_id: np.ndarray

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float32).reshape(-1, 3)
        self.intensity = np.ascontiguousarray(self.intensity, dtype=np.float32).reshape(-1)
        self.beam_id = np.ascontiguousarray(self.beam_id, dtype=np.uint16).reshape(-1)
        if not (len(self.xyz) == len(self.intensity) == len(self.beam_id)):
            raise ValueError("point attribute lengths disagree")

    def __len__(self) -> int:
        return len(self.xyz)

    def select(self, idx) -> "PointCloud":
        return PointCloud(self.xyz[idx], self.intensity[idx], self.beam_id[idx])

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros(0), np.zeros(0))


@dataclass
class SceneSample:
    cloud: PointCloud
    images: list  # P arrays (3, H, W) float32 in [0, 1]
    calibs: list  # P CameraCalib
    gt_boxes: list  # Box3D
    seed: int
    index: int = 0


@dataclass
class SynthConfig:
    n_scenes: int = 500
    objects_min: int = 2
    objects_max: int = 8
    num_classes: int = 3
    # per class: ((w_lo, w_hi), (l_lo, l_hi), (h_lo, h_hi)) -- kept disjoint
    # so each modality carries usable class evidence
    class_size_ranges: tuple = (
        ((1.6, 2.0), (3.6, 4.4), (1.4, 1.7)),
        ((2.3, 2.7), (5.6, 6.8), (2.5, 3.0)),
        ((0.5, 0.8), (0.5, 0.8), (1.6, 1.9)),
    )
    class_colors: tuple = ((0.88, 0.24, 0.20), (0.20, 0.45, 0.90), (0.25, 0.83, 0.30))
    beam_count: int = 32
    rays_per_beam: int = 512
    beam_band_deg: tuple = (-30.0, 10.0)
    range_noise_sigma: float = 0.01
    ground_noise: float = 0.02
    ground_z: float = -1.8
    lidar_max_range: float = 50.0
    n_cameras: int = 4
    hfov_deg: float = 95.0
    image_h: int = 64
    image_w: int = 128
    camera_height: float = 0.3
    camera_offset: float = 0.2
    place_radius: tuple = (3.0, 18.0)
    place_margin: float = 0.6
    detection_range: tuple = ((-20.0, 20.0), (-20.0, 20.0), (-3.0, 3.0))
    seed: int = 0

    def __post_init__(self):
        if self.beam_count < 4:
            raise ValueError("beam_count must be >= 4")
        if self.objects_min > self.objects_max or self.objects_min < 0:
            raise ValueError("objects_per_scene range is empty")
        if self.n_cameras < 1:
            raise ValueError("need at least one camera")
        if len(self.class_size_ranges) < self.num_classes:
            raise ValueError("missing size ranges for some classes")

    def to_dict(self) -> dict:
        return {
            "n_scenes": self.n_scenes,
            "objects_min": self.objects_min,
            "objects_max": self.objects_max,
            "num_classes": self.num_classes,
            "class_size_ranges": [[list(r) for r in c] for c in self.class_size_ranges],
            "class_colors": [list(c) for c in self.class_colors],
            "beam_count": self.beam_count,
            "rays_per_beam": self.rays_per_beam,
            "beam_band_deg": list(self.beam_band_deg),
            "range_noise_sigma": self.range_noise_sigma,
            "ground_noise": self.ground_noise,
            "ground_z": self.ground_z,
            "lidar_max_range": self.lidar_max_range,
            "n_cameras": self.n_cameras,
            "hfov_deg": self.hfov_deg,
            "image_h": self.image_h,
            "image_w": self.image_w,
            "camera_height": self.camera_height,
            "camera_offset": self.camera_offset,
            "place_radius": list(self.place_radius),
            "place_margin": self.place_margin,
            "detection_range": [list(r) for r in self.detection_range],
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        kw = dict(d)
        kw["class_size_ranges"] = tuple(
            tuple(tuple(r) for r in c) for c in kw["class_size_ranges"]
        )
        kw["class_colors"] = tuple(tuple(c) for c in kw["class_colors"])
        kw["beam_band_deg"] = tuple(kw["beam_band_deg"])
        kw["place_radius"] = tuple(kw["place_radius"])
        kw["detection_range"] = tuple(tuple(r) for r in kw["detection_range"])
        return SynthConfig(**kw)


# ---------------------------------------------------------------------------
# Camera rig


def build_camera_rig(cfg: SynthConfig) -> list:
    """Evenly spaced horizontal cameras covering the full azimuth circle."""
    calibs = []
    fx = (cfg.image_w / 2.0) / math.tan(math.radians(cfg.hfov_deg) / 2.0)
    for p in range(cfg.n_cameras):
        phi = 2.0 * math.pi * p / cfg.n_cameras
        c, s = math.cos(phi), math.sin(phi)
        # rows: camera right, down, forward expressed in the ego frame
        rot = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        cam_pos = np.array([cfg.camera_offset * c, cfg.camera_offset * s, cfg.camera_height])
        calibs.append(
            CameraCalib(
                fx=fx,
                fy=fx,
                u0=cfg.image_w / 2.0,
                v0=cfg.image_h / 2.0,
                rotation=rot,
                translation=-rot @ cam_pos,
                image_w=cfg.image_w,
                image_h=cfg.image_h,
            )
        )
    return calibs


# ---------------------------------------------------------------------------
# LiDAR simulation


def _ray_box_hits(dirs: np.ndarray, box: Box3D) -> np.ndarray:
    """Entry distance of origin-anchored rays into an oriented box.

    Returns (n,) distances; rays that miss get +inf. Slab test in the
    box's yaw-aligned frame.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # ego -> box
    center = np.array([box.center.x, box.center.y, box.center.z])
    o = -rot @ center
    d = dirs @ rot.T
    half = np.array([box.l / 2.0, box.w / 2.0, box.h / 2.0])

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # axis-parallel rays: inside the slab -> (-inf, inf), outside -> miss
    par = d == 0.0
    inside = np.abs(o) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_near <= t_far) & (t_far > 0)
    t = np.where(t_near > 0, t_near, t_far)  # rays starting inside exit at t_far
    return np.where(hit, t, np.inf)


def simulate_lidar(boxes: list, cfg: SynthConfig, rng: np.random.Generator | None = None) -> PointCloud:
    """Cast ``beam_count`` beams of evenly spaced azimuths; each ray keeps
    its first hit on a box surface or the ground plane, with Gaussian
    range noise. Hit points carry the emitting beam's index."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    B, R = cfg.beam_count, cfg.rays_per_beam
    inclinations = np.radians(np.linspace(cfg.beam_band_deg[0], cfg.beam_band_deg[1], B))
    azimuths = np.linspace(-math.pi, math.pi, R, endpoint=False)
    inc = np.repeat(inclinations, R)
    az = np.tile(azimuths, B)
    cos_i = np.cos(inc)
    dirs = np.stack([cos_i * np.cos(az), cos_i * np.sin(az), np.sin(inc)], axis=1)
    beam_ids = np.repeat(np.arange(B, dtype=np.uint16), R)

    t_best = np.full(len(dirs), np.inf)
    hit_obj = np.full(len(dirs), -1, dtype=np.int64)
    for i, box in enumerate(boxes):
        t = _ray_box_hits(dirs, box)
        better = t < t_best
        t_best = np.where(better, t, t_best)
        hit_obj = np.where(better, i, hit_obj)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore"):
        t_ground = np.where(dz < 0, cfg.ground_z / dz, np.inf)
    ground_first = t_ground < t_best
    t_best = np.where(ground_first, t_ground, t_best)
    hit_obj = np.where(ground_first, -1, hit_obj)

    valid = np.isfinite(t_best) & (t_best <= cfg.lidar_max_range) & (t_best > 0)
    t_noisy = np.where(valid, t_best, 0.0) + rng.normal(0.0, cfg.range_noise_sigma, size=len(dirs))
    pts = dirs * t_noisy[:, None]
    ground_mask = valid & (hit_obj < 0)
    pts[:, 2] += np.where(ground_mask, rng.normal(0.0, cfg.ground_noise, size=len(dirs)), 0.0)

    obj_base = rng.uniform(0.4, 0.9, size=max(len(boxes), 1))
    intensity = np.where(
        hit_obj >= 0,
        np.clip(obj_base[np.maximum(hit_obj, 0)] + rng.normal(0, 0.03, len(dirs)), 0, 1),
        rng.uniform(0.05, 0.25, size=len(dirs)),
    )
    return PointCloud(pts[valid], intensity[valid], beam_ids[valid])


# ---------------------------------------------------------------------------
# Camera rendering


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices in CCW order."""
    pts = np.unique(points, axis=0)
    if len(pts) < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and np.cross(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _fill_hull(image: np.ndarray, hull: np.ndarray, color: np.ndarray, noise: np.ndarray):
    """Paint the interior of a CCW convex hull (pixel-center test)."""
    if len(hull) < 3:
        return
    h, w = image.shape[1:]
    u0 = max(int(np.floor(hull[:, 0].min())), 0)
    u1 = min(int(np.ceil(hull[:, 0].max())) + 1, w)
    v0 = max(int(np.floor(hull[:, 1].min())), 0)
    v1 = min(int(np.ceil(hull[:, 1].max())) + 1, h)
    if u0 >= u1 or v0 >= v1:
        return
    uu, vv = np.meshgrid(np.arange(u0, u1) + 0.5, np.arange(v0, v1) + 0.5)
    inside = np.ones(uu.shape, dtype=bool)
    for k in range(len(hull)):
        a, b = hull[k], hull[(k + 1) % len(hull)]
        inside &= (b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0]) >= 0
    region = image[:, v0:v1, u0:u1]
    patch = color[:, None, None] + noise[:, v0:v1, u0:u1]
    image[:, v0:v1, u0:u1] = np.where(inside[None], patch, region)


def render_views(boxes: list, calibs: list, cfg: SynthConfig, rng: np.random.Generator | None = None) -> list:
    """Depth-ordered silhouette rasterization of each box into every view,
    filled with its class color over a textured-noise background."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    images = []
    for calib in calibs:
        img = 0.4 + 0.06 * rng.standard_normal((1, cfg.image_h, cfg.image_w))
        img = np.repeat(img, 3, axis=0) + 0.02 * rng.standard_normal((3, cfg.image_h, cfg.image_w))
        speckle = 0.03 * rng.standard_normal((3, cfg.image_h, cfg.image_w))

        order = []
        for i, box in enumerate(boxes):
            cam_depth = (calib.rotation @ box.center.to_array() + calib.translation)[2]
            order.append((cam_depth, i))
        order.sort(key=lambda t: -t[0])  # far -> near (painter's algorithm)

        for depth, i in order:
            box = boxes[i]
            uvd, valid = project_points_batch(box.corners_3d(), calib, margin=4 * cfg.image_w)
            if valid.sum() < 3 or depth <= 0.5:
                continue
            hull = _convex_hull(uvd[valid][:, :2])
            shade = float(np.clip(1.15 - depth / 35.0, 0.45, 1.0))
            color = shade * np.asarray(cfg.class_colors[box.class_id])
            _fill_hull(img, hull, color, speckle)
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return images


# ---------------------------------------------------------------------------
# Scene and dataset generation

_PLACEMENT_TRIES = 200


def _sample_boxes(cfg: SynthConfig, rng: np.random.Generator) -> list:
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    boxes = []
    (x_rng, y_rng, _) = cfg.detection_range
    for _ in range(n):
        cls = int(rng.integers(0, cfg.num_classes))
        (w_r, l_r, h_r) = cfg.class_size_ranges[cls]
        w = float(rng.uniform(*w_r))
        l = float(rng.uniform(*l_r))
        h = float(rng.uniform(*h_r))
        placed = False
        for _try in range(_PLACEMENT_TRIES):
            x = float(rng.uniform(x_rng[0], x_rng[1]))
            y = float(rng.uniform(y_rng[0], y_rng[1]))
            r = math.hypot(x, y)
            if not (cfg.place_radius[0] <= r <= cfg.place_radius[1]):
                continue
            yaw = float(rng.uniform(-math.pi, math.pi))
            diag = math.hypot(w, l) / 2.0
            ok = True
            for b in boxes:
                b_diag = math.hypot(b.w, b.l) / 2.0
                if math.hypot(b.center.x - x, b.center.y - y) < diag + b_diag + cfg.place_margin:
                    ok = False
                    break
            if ok:
                boxes.append(
                    Box3D(Point3(x, y, cfg.ground_z + h / 2.0), (w, l, h), yaw, class_id=cls)
                )
                placed = True
                break
        if not placed:
            raise RuntimeError(
                "could not place objects without BEV overlap; "
                "reduce objects_per_scene or enlarge the placement annulus"
            )
    return boxes


def generate_scene(cfg: SynthConfig, index: int) -> SceneSample:
    """Generate one scene from the stream derived from (seed, index)."""
    rng = np.random.default_rng((cfg.seed, index))
    boxes = _sample_boxes(cfg, rng)
    cloud = simulate_lidar(boxes, cfg, rng)
    calibs = build_camera_rig(cfg)
    images = render_views(boxes, calibs, cfg, rng)
    return SceneSample(
        cloud=cloud, images=images, calibs=calibs, gt_boxes=boxes, seed=cfg.seed, index=index
    )


def generate_dataset(cfg: SynthConfig) -> list:
    """All scenes for a config; deterministic given cfg.seed."""
    return [generate_scene(cfg, i) for i in range(cfg.n_scenes)]


# ---------------------------------------------------------------------------
# Dataset directory IO


def write_tensor(path: Path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(np.uint32(arr.ndim).tobytes())
        f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        f.write(arr.tobytes())


def read_tensor(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != TENSOR_MAGIC:
            raise ValueError(f"{path}: bad tensor magic {magic!r}")
        ndim = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        dims = np.frombuffer(f.read(4 * ndim), dtype="<u4").astype(int)
        data = np.frombuffer(f.read(), dtype="<f4")
    return data.reshape(dims)


def save_scene(sample: SceneSample, scene_dir: Path):
    scene_dir.mkdir(parents=True, exist_ok=True)
    rec = np.empty(len(sample.cloud), dtype=POINT_DTYPE)
    rec["x"], rec["y"], rec["z"] = sample.cloud.xyz.T
    rec["intensity"] = sample.cloud.intensity
    rec["beam_id"] = sample.cloud.beam_id
    rec.tofile(scene_dir / "points.bin")
    for p, img in enumerate(sample.images):
        write_tensor(scene_dir / f"cam{p}.npyish", img)
    (scene_dir / "calib.json").write_text(
        json.dumps({"cameras": [c.to_dict() for c in sample.calibs]}, sort_keys=True)
    )
    (scene_dir / "gt.json").write_text(
        json.dumps(
            {
                "boxes": [b.to_dict() for b in sample.gt_boxes],
                "seed": sample.seed,
                "index": sample.index,
            },
            sort_keys=True,
        )
    )


def load_scene(scene_dir: Path) -> SceneSample:
    rec = np.fromfile(scene_dir / "points.bin", dtype=POINT_DTYPE)
    cloud = PointCloud(
        np.stack([rec["x"], rec["y"], rec["z"]], axis=1), rec["intensity"], rec["beam_id"]
    )
    calib_doc = json.loads((scene_dir / "calib.json").read_text())
    calibs = [CameraCalib.from_dict(d) for d in calib_doc["cameras"]]
    images = []
    for p in range(len(calibs)):
        images.append(read_tensor(scene_dir / f"cam{p}.npyish"))
    gt_doc = json.loads((scene_dir / "gt.json").read_text())
    boxes = [Box3D.from_dict(d) for d in gt_doc["boxes"]]
    return SceneSample(
        cloud=cloud,
        images=images,
        calibs=calibs,
        gt_boxes=boxes,
        seed=gt_doc.get("seed", 0),
        index=gt_doc.get("index", 0),
    )


def save_dataset(samples: list, root: Path, cfg: SynthConfig, fingerprint: str = ""):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "crossfusion-dataset-v1",
        "fingerprint": fingerprint,
        "seed": cfg.seed,
        "n_scenes": len(samples),
        "config": cfg.to_dict(),
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    for sample in samples:
        save_scene(sample, root / "scenes" / f"{sample.index:05d}")


def load_dataset(root: Path):
    """Returns (samples, meta dict)."""
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    dirs = sorted((root / "scenes").iterdir())
    return [load_scene(d) for d in dirs], meta
