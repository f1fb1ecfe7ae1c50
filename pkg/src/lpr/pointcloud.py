"""Point clouds, rigid poses and a ray-cast synthetic LiDAR world.

The world is a flat ground plane populated with vertical cylinders and
yaw-oriented boxes. ``simulate_scan`` casts one ray per (beam, azimuth)
pair; azimuths and elevations sit at pixel centres of the matching range
image so that pixel-aligned yaw rotations map points onto pixel centres
again.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

SCAN_MAGIC = b"LPRC"
ORTHO_TOL = 1e-9


class EmptyScanError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """N x 3 array of points in the sensor frame (metres)."""

    points: np.ndarray
    sensor_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)


@dataclass(frozen=True)
class Pose:
    """Rigid transform p_world = R @ p_sensor + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m, orthonormalize: bool = False) -> Pose:
        """Build from a 3x4 or 4x4 matrix.

        ``orthonormalize`` snaps the rotation onto SO(3) via SVD, which is
        needed for pose files written with few significant digits.
        """
        m = np.asarray(m, dtype=np.float64)
        R, t = m[:3, :3], m[:3, 3]
        if orthonormalize:
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
            if np.linalg.det(R) < 0:
                U[:, -1] *= -1
                R = U @ Vt
        return cls(R, t)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        # (self @ other) applies `other` first, then `self`
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


def yaw_rotation(theta: float) -> Pose:
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(R, np.zeros(3))


def yaw_pose(x: float, y: float, z: float, theta: float) -> Pose:
    return Pose(yaw_rotation(theta).rotation, np.array([x, y, z], dtype=np.float64))


def apply_pose(cloud: PointCloud, pose: Pose) -> PointCloud:
    pts = cloud.points @ pose.rotation.T + pose.translation
    return PointCloud(pts, cloud.sensor_id)


# --------------------------------------------------------------------------
# synthetic world


@dataclass(frozen=True)
class Cylinder:
    x: float
    y: float
    radius: float
    height: float


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    half_x: float
    half_y: float
    yaw: float
    height: float


@dataclass(frozen=True)
class SyntheticWorld:
    """Static obstacles standing on a flat ground plane.

    ``ground_height=None`` removes the ground, which is only useful for
    tests that need isolated obstacles.
    """

    cylinders: tuple[Cylinder, ...] = ()
    boxes: tuple[Box, ...] = ()
    ground_height: float | None = 0.0
    rng_seed: int = 0

    @property
    def landmarks(self) -> list:
        return [*self.cylinders, *self.boxes]

    @cached_property
    def _cyl(self) -> np.ndarray:
        return np.array([[c.x, c.y, c.radius, c.height] for c in self.cylinders],
                        dtype=np.float64).reshape(-1, 4)

    @cached_property
    def _box(self) -> np.ndarray:
        return np.array([[b.x, b.y, b.half_x, b.half_y, b.yaw, b.height] for b in self.boxes],
                        dtype=np.float64).reshape(-1, 6)

    @property
    def base(self) -> float:
        return 0.0 if self.ground_height is None else self.ground_height

    @classmethod
    def random(cls, seed: int, n_landmarks: int = 400, extent: float = 150.0,
               keep_clear: np.ndarray | None = None, clearance: float = 4.0,
               ground_height: float | None = 0.0, box_fraction: float = 0.4) -> SyntheticWorld:
        """Scatter landmarks uniformly over [-extent, extent]^2.

        Landmarks whose footprint comes within ``clearance`` metres of any
        xy point in ``keep_clear`` are rejected and redrawn, so trajectories
        never start inside an obstacle.
        """
        if n_landmarks < 50:
            raise ValueError("a synthetic world needs at least 50 landmarks")
        rng = np.random.default_rng(seed)
        clear = None if keep_clear is None else np.asarray(keep_clear, dtype=np.float64)[:, :2]
        cylinders, boxes = [], []
        attempts = 0
        while len(cylinders) + len(boxes) < n_landmarks:
            attempts += 1
            if attempts > 200 * n_landmarks:
                raise RuntimeError("could not place landmarks; reduce clearance or count")
            x, y = rng.uniform(-extent, extent, size=2)
            is_box = rng.random() < box_fraction
            if is_box:
                hx, hy = rng.uniform(0.5, 4.0, size=2)
                size = float(np.hypot(hx, hy))
            else:
                r = rng.uniform(0.2, 1.5)
                size = r
            height = rng.uniform(2.5, 12.0)
            yaw = rng.uniform(-np.pi, np.pi)
            if clear is not None and len(clear):
                d = np.min(np.hypot(clear[:, 0] - x, clear[:, 1] - y))
                if d < clearance + size:
                    continue
            if is_box:
                boxes.append(Box(float(x), float(y), float(hx), float(hy), float(yaw), float(height)))
            else:
                cylinders.append(Cylinder(float(x), float(y), float(r), float(height)))
        return cls(tuple(cylinders), tuple(boxes), ground_height, seed)


def _cylinder_spans(ox, oy, cos_az, sin_az, cyl):
    """Horizontal entry/exit distances of each azimuth ray through each cylinder."""
    px, py = ox - cyl[:, 0], oy - cyl[:, 1]
    b = cos_az[:, None] * px + sin_az[:, None] * py
    c = px * px + py * py - cyl[:, 2] ** 2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    s_in, s_out = -b - root, -b + root
    hit = disc > 0
    return np.where(hit, s_in, np.inf), np.where(hit, s_out, -np.inf)


def _box_spans(ox, oy, cos_az, sin_az, box):
    c, s = np.cos(box[:, 4]), np.sin(box[:, 4])
    px, py = ox - box[:, 0], oy - box[:, 1]
    lo_x, lo_y = c * px + s * py, -s * px + c * py
    dx = cos_az[:, None] * c + sin_az[:, None] * s
    dy = -cos_az[:, None] * s + sin_az[:, None] * c
    s_in = np.full(dx.shape, -np.inf)
    s_out = np.full(dx.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for o, d, half in ((lo_x, dx, box[:, 2]), (lo_y, dy, box[:, 3])):
            t1 = (-half - o) / d
            t2 = (half - o) / d
            par = d == 0
            inside = np.abs(o) <= half
            t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
            t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
            s_in = np.maximum(s_in, np.minimum(t1, t2))
            s_out = np.minimum(s_out, np.maximum(t1, t2))
    hit = s_in <= s_out
    return np.where(hit, s_in, np.inf), np.where(hit, s_out, -np.inf)


def beam_angles(beams: int, horizontal_samples: int, fov_up: float, fov_down: float):
    """Elevation and azimuth (radians) of every beam and column.

    Both sit at pixel centres of a ``beams`` x ``horizontal_samples`` image
    under the row/column mapping of :func:`lpr.range_image.project_cloud`,
    so row ``i`` holds elevation ``fov * (1 - (i + 0.5) / beams) - fov_up``.
    """
    fov = np.radians(fov_up + fov_down)
    el = fov * (1.0 - (np.arange(beams) + 0.5) / beams) - np.radians(fov_up)
    az = np.pi * (1.0 - (2.0 * np.arange(horizontal_samples) + 1.0) / horizontal_samples)
    return el, az


def beam_directions(beams: int, horizontal_samples: int, fov_up: float, fov_down: float) -> np.ndarray:
    """Unit ray directions in the sensor frame, row-major (beam, column)."""
    el, az = np.meshgrid(*beam_angles(beams, horizontal_samples, fov_up, fov_down), indexing="ij")
    d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    return d.reshape(-1, 3)


def simulate_scan(world: SyntheticWorld, pose: Pose, beams: int = 32, horizontal_samples: int = 360,
                  fov_up: float = 3.0, fov_down: float = 25.0, max_range: float = 100.0,
                  noise_sigma: float = 0.0, noise_seed: int = 0) -> PointCloud:
    """Ray-cast a scan of ``world`` from ``pose``; returns sensor-frame points.

    The sensor must be upright (yaw-only rotation): every ray is then a
    vertical half-plane per column, obstacle sides are found in 2-D and the
    beam elevation only decides where along that span the ray is.
    """
    if beams < 8 or horizontal_samples < 90:
        raise ValueError("need beams >= 8 and horizontal_samples >= 90")
    if fov_up <= 0 or fov_down <= 0:
        raise ValueError("fov_up and fov_down must be positive")
    if np.max(np.abs(pose.rotation[2] - (0.0, 0.0, 1.0))) > 1e-9:
        raise ValueError("simulate_scan needs an upright sensor (yaw-only pose)")
    el, az = beam_angles(beams, horizontal_samples, fov_up, fov_down)
    ox, oy, oz = pose.translation
    world_az = az + pose.yaw
    cos_az, sin_az = np.cos(world_az), np.sin(world_az)
    slope = np.tan(el)[:, None]               # dz per metre of horizontal travel
    base = world.base

    # nearest horizontal hit distance per (beam, column)
    best = np.full((beams, horizontal_samples), np.inf)
    if world.ground_height is not None:
        with np.errstate(divide="ignore"):
            sg = np.where(slope < 0, (world.ground_height - oz) / slope, np.inf)
        best = np.broadcast_to(np.where(sg > 0, sg, np.inf), best.shape).copy()

    for arr, spans in ((world._cyl, _cylinder_spans), (world._box, _box_spans)):
        if not len(arr):
            continue
        reach = arr[:, 2] if spans is _cylinder_spans else np.hypot(arr[:, 2], arr[:, 3])
        near = np.hypot(arr[:, 0] - ox, arr[:, 1] - oy) - reach <= max_range
        arr = arr[near]
        if not len(arr):
            continue
        top = base + arr[:, -1]
        s_in, s_out = spans(ox, oy, cos_az, sin_az, arr)
        col, k = np.nonzero((s_in > 0) & (s_in <= max_range))
        if not len(col):
            continue
        s_in, s_out, top = s_in[col, k], s_out[col, k], top[k]
        # part of the horizontal span where the ray height lies in [base, top]
        with np.errstate(divide="ignore", invalid="ignore"):
            z_lo = (base - oz) / slope
            z_hi = (top - oz) / slope
        lo = np.where(slope > 0, z_lo, np.where(slope < 0, z_hi, -np.inf))
        hi = np.where(slope > 0, z_hi, np.where(slope < 0, z_lo, np.inf))
        if not base <= oz:
            lo = np.where(slope == 0, np.inf, lo)
        flat_top = (slope == 0) & (oz > top)
        lo = np.where(flat_top, np.inf, lo)
        s_hit = np.maximum(s_in, lo)
        s_hit = np.where(s_hit <= np.minimum(s_out, hi), s_hit, np.inf)
        np.minimum.at(best, (np.repeat(np.arange(beams), len(col)), np.tile(col, beams)), s_hit.reshape(-1))

    t = best / np.cos(el)[:, None]
    if noise_sigma > 0:
        rng = np.random.default_rng([world.rng_seed, noise_seed])
        t = t + rng.normal(0.0, noise_sigma, size=t.shape)
    keep = (np.isfinite(t) & (t > 0) & (t <= max_range)).reshape(-1)
    if not np.any(keep):
        raise EmptyScanError("empty scan")
    local = beam_directions(beams, horizontal_samples, fov_up, fov_down)
    return PointCloud(local[keep] * t.reshape(-1)[keep, None], sensor_id=f"synthetic-{beams}")


# --------------------------------------------------------------------------
# trajectories

PATTERNS = ("loop", "reverse-loop", "linear")


@dataclass(frozen=True)
class TrajectorySpec:
    """Declarative trajectory.

    ``loop`` drives a circular circuit of ``revisit_after`` poses once and
    then revisits the circuit from its start; ``reverse-loop`` revisits it
    driving the opposite way; ``linear`` drives a straight line.
    Revisit poses are offset sideways by up to ``lateral_offset`` metres.
    """

    pattern: str = "loop"
    steps: int = 100
    step_length: float = 1.0
    revisit_after: int | None = None
    lateral_offset: float = 0.3
    yaw_jitter: float = 0.02
    sensor_height: float = 1.8
    seed: int = 0
    center: tuple[float, float] = field(default=(0.0, 0.0))

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown trajectory pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.lateral_offset > 0.5:
            raise ValueError("lateral_offset must stay within 0.5 m")

    @property
    def first_pass(self) -> int:
        if self.pattern == "linear":
            return self.steps
        n = self.revisit_after if self.revisit_after is not None else self.steps // 2
        if not 2 <= n <= self.steps:
            raise ValueError("revisit_after must lie in [2, steps]")
        return n


@dataclass(frozen=True)
class Segment:
    role: str          # "Database" or "Query"
    direction: str     # "Same" or "Reverse"
    first_pass_index: int


def trajectory_poses(spec: TrajectorySpec, ground_height: float = 0.0) -> tuple[list[Pose], list[Segment]]:
    """Poses and per-pose segment labels for ``spec`` (no scans)."""
    z = ground_height + spec.sensor_height
    cx, cy = spec.center
    n1 = spec.first_pass
    if spec.pattern == "linear":
        poses = [yaw_pose(cx + k * spec.step_length, cy, z, 0.0) for k in range(spec.steps)]
        return poses, [Segment("Database", "Same", k) for k in range(spec.steps)]

    radius = n1 * spec.step_length / (2.0 * np.pi)
    rng = np.random.default_rng(spec.seed)

    def on_circuit(m: int, offset: float = 0.0, reverse: bool = False, jitter: float = 0.0) -> Pose:
        phi = 2.0 * np.pi * m / n1
        r = radius + offset
        heading = phi + np.pi / 2.0 + (np.pi if reverse else 0.0) + jitter
        return yaw_pose(cx + r * np.cos(phi), cy + r * np.sin(phi), z, heading)

    poses = [on_circuit(m) for m in range(n1)]
    segments = [Segment("Database", "Same", m) for m in range(n1)]
    reverse = spec.pattern == "reverse-loop"
    for k in range(spec.steps - n1):
        m = (n1 - 1 - k) % n1 if reverse else k % n1
        off = rng.uniform(-spec.lateral_offset, spec.lateral_offset)
        jit = rng.uniform(-spec.yaw_jitter, spec.yaw_jitter)
        poses.append(on_circuit(m, off, reverse, jit))
        segments.append(Segment("Query", "Reverse" if reverse else "Same", m))
    return poses, segments


def world_for_trajectory(spec: TrajectorySpec, seed: int, n_landmarks: int = 400,
                         extent: float | None = None, clearance: float = 4.0,
                         ground_height: float | None = 0.0) -> SyntheticWorld:
    """Random world whose landmarks keep clear of the trajectory's path."""
    poses, _ = trajectory_poses(spec)
    path = np.array([p.translation[:2] for p in poses])
    if extent is None:
        reach = np.max(np.abs(path - np.asarray(spec.center))) if len(path) else 0.0
        extent = float(reach + 60.0)
    return SyntheticWorld.random(seed, n_landmarks=n_landmarks, extent=extent,
                                 keep_clear=path, clearance=clearance, ground_height=ground_height)


def generate_trajectory(world: SyntheticWorld, spec: TrajectorySpec, beams: int = 32,
                        horizontal_samples: int = 360, fov_up: float = 3.0, fov_down: float = 25.0,
                        max_range: float = 100.0, noise_sigma: float = 0.0) -> list[tuple[Pose, PointCloud]]:
    poses, _ = trajectory_poses(spec, world.base)
    return [(p, simulate_scan(world, p, beams, horizontal_samples, fov_up, fov_down, max_range,
                              noise_sigma=noise_sigma, noise_seed=k))
            for k, p in enumerate(poses)]


# --------------------------------------------------------------------------
# file formats


def write_scan(path, cloud: PointCloud) -> None:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as f:
        f.write(SCAN_MAGIC)
        f.write(struct.pack("<I", pts.shape[0]))
        f.write(pts.tobytes())


def read_scan(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != SCAN_MAGIC:
        raise ValueError(f"{path}: not a scan file (bad magic)")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 12 * n:
        raise ValueError(f"{path}: expected {n} points, file size {len(raw)} does not match")
    pts = np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, 3)
    return PointCloud(pts.astype(np.float64))


def write_poses(path, poses: Sequence[Pose]) -> None:
    with open(path, "w") as f:
        for p in poses:
            row = p.matrix[:3, :4].reshape(-1)
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_poses(path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 12:
            raise ValueError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        poses.append(Pose.from_matrix(np.array(vals).reshape(3, 4), orthonormalize=True))
    return poses
