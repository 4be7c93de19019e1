"""LiDAR degradation protocols: low-resolution beam simulation, random
point reduction, field-of-view clipping, and the randomized-beam training
augmentation.

Beam reduction supports two semantics:

* inclination-band filtering -- keeps points whose vertical angle falls in
  a fixed set of degree intervals (the verbatim protocol definition);
* ``by_beam_index`` subsampling -- keeps every (B / target)-th beam using
  the sweep's beam_id metadata, which actually reduces the beam count on
  synthetic sweeps whose band spans the sensor's full vertical range.

The robustness suite uses the index-based variant on synthetic data; both
are exposed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .scene_synth import PointCloud
from .geometry import spherical_angles_batch

BEAM16_BANDS_DEG = ((-7.1, -5.8), (-4.5, -3.2), (-1.9, -0.6), (0.7, 2.0))
BEAM4_BANDS_DEG = ((-30.0, 10.0),)


class BeamMode(Enum):
    FULL = "full"
    BEAM16 = "beam16"
    BEAM4 = "beam4"

    @property
    def bands_deg(self) -> tuple:
        if self is BeamMode.BEAM16:
            return BEAM16_BANDS_DEG
        if self is BeamMode.BEAM4:
            return BEAM4_BANDS_DEG
        return ()

    @property
    def target_beams(self) -> int | None:
        if self is BeamMode.BEAM16:
            return 16
        if self is BeamMode.BEAM4:
            return 4
        return None


@dataclass
class CorruptionSpec:
    """One degradation protocol: kind in {beams, ratio, fov} with its
    parameter, plus the seed for the stochastic one."""

    kind: str
    beam_mode: BeamMode = BeamMode.FULL
    keep_ratio: float = 1.0
    half_angle: float = math.pi
    by_beam_index: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("beams", "ratio", "fov"):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.kind == "ratio" and not (0.0 < self.keep_ratio <= 1.0):
            raise ValueError("keep_ratio must be in (0, 1]")
        if self.kind == "fov" and not (0.0 < self.half_angle <= math.pi):
            raise ValueError("half_angle must be in (0, pi]")

    def apply(
        self, cloud: PointCloud, seed: int | None = None, total_beams: int | None = None
    ) -> PointCloud:
        if self.kind == "beams":
            return filter_beams(
                cloud, self.beam_mode, by_beam_index=self.by_beam_index, total_beams=total_beams
            )
        if self.kind == "ratio":
            return drop_points(cloud, self.keep_ratio, self.seed if seed is None else seed)
        return clip_fov(cloud, self.half_angle)

    def label(self) -> str:
        if self.kind == "beams":
            suffix = "/idx" if self.by_beam_index else "/band"
            return f"beams={self.beam_mode.value}{suffix}"
        if self.kind == "ratio":
            return f"ratio={self.keep_ratio:g}"
        return f"fov={self.half_angle:.4f}"


def filter_beams(
    cloud: PointCloud,
    mode: BeamMode,
    by_beam_index: bool = False,
    total_beams: int | None = None,
) -> PointCloud:
    """Reduce the sweep to a low-resolution beam set.

    Default semantics keep points whose inclination (degrees) lies in the
    mode's band union. With ``by_beam_index`` the sweep's beam_id metadata
    is subsampled to every (B / target)-th beam instead; ``total_beams``
    is the sensor's beam count B (defaults to max observed id + 1, which
    undercounts if the top beams returned nothing).
    """
    if mode is BeamMode.FULL:
        return cloud
    if len(cloud) == 0:
        return cloud
    if by_beam_index:
        total = int(cloud.beam_id.max()) + 1 if total_beams is None else total_beams
        stride = max(total // mode.target_beams, 1)
        return cloud.select(cloud.beam_id % stride == 0)
    _, _, inclination = spherical_angles_batch(cloud.xyz)
    inc_deg = np.degrees(inclination)
    keep = np.zeros(len(cloud), dtype=bool)
    for lo, hi in mode.bands_deg:
        keep |= (inc_deg >= lo) & (inc_deg <= hi)
    return cloud.select(keep)


def drop_points(cloud: PointCloud, keep_ratio: float, seed: int) -> PointCloud:
    """Keep floor(n * keep_ratio) points sampled uniformly without
    replacement; survivors retain their relative order."""
    if not (0.0 < keep_ratio <= 1.0):
        raise ValueError("keep_ratio must be in (0, 1]")
    if keep_ratio == 1.0 or len(cloud) == 0:
        return cloud
    n = len(cloud)
    k = int(math.floor(n * keep_ratio))
    rng = np.random.default_rng((seed, n))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return cloud.select(idx)


def clip_fov(cloud: PointCloud, half_angle: float) -> PointCloud:
    """Keep points with azimuth in the closed sector [-half_angle, +half_angle]."""
    if not (0.0 < half_angle <= math.pi):
        raise ValueError("half_angle must be in (0, pi]")
    if len(cloud) == 0 or half_angle == math.pi:
        return cloud
    _, azimuth, _ = spherical_angles_batch(cloud.xyz)
    return cloud.select((azimuth >= -half_angle) & (azimuth <= half_angle))


AUGMENTATION_PERIOD = 10
_AUG_CHOICES = (BeamMode.FULL, BeamMode.BEAM16, BeamMode.BEAM4)


def augmentation_mode(step: int, seed: int) -> BeamMode:
    """Randomized-beam training augmentation schedule.

    Returns FULL except on every 10th optimizer step, where a uniform
    choice among {FULL, BEAM16, BEAM4} is drawn from a stream keyed by
    (seed, step).
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if step % AUGMENTATION_PERIOD != 0:
        return BeamMode.FULL
    rng = np.random.default_rng((seed, step))
    return _AUG_CHOICES[int(rng.integers(0, len(_AUG_CHOICES)))]
