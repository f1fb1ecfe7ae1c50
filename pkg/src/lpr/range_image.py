"""Spherical projection of scans to range images and the overlap measure.

Conventions
-----------
Column ``u = floor(0.5 * (1 - atan2(y, x) / pi) * w) mod w`` and row
``v = floor((1 - (asin(z / r) + fov_up) / fov) * h)``. Rotating a cloud by
yaw ``theta`` moves azimuths by ``+theta`` and therefore columns by
``-theta * w / (2 pi)``: ``yaw_to_shift`` returns that amount modulo ``w``
and ``column_shift`` applies it with ``out[:, j] = in[:, (j - s) mod w]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud, Pose, apply_pose

SENTINEL = -1.0
IMAGE_MAGIC = b"LPRI"


class EmptyRangeImageError(ValueError):
    pass


class UndefinedOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionConfig:
    w: int = 360
    h: int = 32
    fov_up: float = 3.0
    fov_down: float = 25.0
    max_range: float = 100.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("image width and height must be positive")
        if self.fov_up + self.fov_down <= 0:
            raise ValueError("vertical field of view must be positive")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down


def default_delta(h: int) -> float:
    """Overlap pixel threshold: 1.2 m for sparse (<= 32 beam) images, else 1.0 m."""
    return 1.2 if h <= 32 else 1.0


@dataclass(frozen=True)
class RangeImage:
    data: np.ndarray
    fov_up: float | None = None
    fov_down: float | None = None
    max_range: float | None = None

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2 or d.size == 0:
            raise ValueError(f"range image must be a non-empty 2-D grid, got shape {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.data != SENTINEL

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def replace(self, data) -> RangeImage:
        return RangeImage(data, self.fov_up, self.fov_down, self.max_range)


def _pixel_coords(points: np.ndarray, cfg: ProjectionConfig):
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    fov = np.radians(cfg.fov)
    up = np.radians(cfg.fov_up)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.floor(0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.w)
        v = np.floor((1.0 - (np.arcsin(np.clip(z / r, -1.0, 1.0)) + up) / fov) * cfg.h)
    ok = (r > 0) & (r <= cfg.max_range) & (v >= 0) & (v < cfg.h)
    u = np.mod(np.where(ok, u, 0), cfg.w).astype(np.int64)
    v = np.where(ok, v, 0).astype(np.int64)
    return u, v, r, ok


def project_point(p, cfg: ProjectionConfig):
    """Pixel ``(u, v, r)`` of one point, or ``None`` when out of view."""
    u, v, r, ok = _pixel_coords(np.asarray(p, dtype=np.float64).reshape(1, 3), cfg)
    if not ok[0]:
        return None
    return int(u[0]), int(v[0]), float(r[0])


def project_cloud(cloud: PointCloud | np.ndarray, cfg: ProjectionConfig) -> RangeImage:
    """Range image keeping the nearest point per pixel; unhit pixels hold -1."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.shape[0] == 0:
        raise EmptyRangeImageError("empty range image")
    u, v, r, ok = _pixel_coords(pts, cfg)
    if not np.any(ok):
        raise EmptyRangeImageError("empty range image")
    flat = np.full(cfg.h * cfg.w, np.inf)
    np.minimum.at(flat, v[ok] * cfg.w + u[ok], r[ok])
    flat[np.isinf(flat)] = SENTINEL
    return RangeImage(flat.reshape(cfg.h, cfg.w), cfg.fov_up, cfg.fov_down, cfg.max_range)


def yaw_to_shift(theta: float, w: int) -> int:
    """Column shift produced by rotating the scan by yaw ``theta`` (radians)."""
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    return int(np.floor(-theta * w / (2.0 * np.pi) + 0.5)) % w


def column_shift(img: RangeImage | np.ndarray, s: int):
    """Circular shift along the width axis (last axis for raw arrays)."""
    if isinstance(img, RangeImage):
        return img.replace(np.roll(img.data, int(s), axis=1))
    return np.roll(img, int(s), axis=-1)


def reproject(reference: PointCloud, pose_ref: Pose, pose_query: Pose, cfg: ProjectionConfig) -> RangeImage:
    """Project the reference scan as seen from the query sensor pose."""
    if np.array_equal(pose_ref.matrix, pose_query.matrix):
        return project_cloud(reference, cfg)
    rel = pose_query.inverse() @ pose_ref
    return project_cloud(apply_pose(reference, rel), cfg)


def compute_overlap(query_img: RangeImage, reproj_ref_img: RangeImage, delta: float) -> float:
    """Fraction of pixels whose ranges agree within ``delta``.

    The count is over pixels valid in both images, normalised by the
    smaller of the two valid-pixel counts.
    """
    q, r = query_img.data, reproj_ref_img.data
    if q.shape != r.shape:
        raise ValueError(f"overlap needs equal image shapes, got {q.shape} and {r.shape}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    vq, vr = q != SENTINEL, r != SENTINEL
    denom = min(int(np.count_nonzero(vq)), int(np.count_nonzero(vr)))
    if denom == 0:
        raise UndefinedOverlapError("undefined overlap")
    both = vq & vr
    diff = np.abs(q[both].astype(np.float64) - r[both].astype(np.float64))
    return int(np.count_nonzero(diff <= delta)) / denom


def write_range_image(path, img: RangeImage) -> None:
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<II", img.h, img.w))
        f.write(np.ascontiguousarray(img.data, dtype="<f4").tobytes())


def read_range_image(path, cfg: ProjectionConfig | None = None) -> RangeImage:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not a range image file (bad magic)")
    h, w = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * h * w:
        raise ValueError(f"{path}: size does not match {h}x{w} header")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).copy()
    if cfg is None:
        return RangeImage(data)
    return RangeImage(data, cfg.fov_up, cfg.fov_down, cfg.max_range)
