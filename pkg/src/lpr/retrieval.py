"""Exact descriptor search and place-recognition metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .pointcloud import PointCloud, Pose, apply_pose, yaw_rotation
from .range_image import ProjectionConfig, project_cloud
from .training import POSITIVE_OVERLAP, OverlapTable

log = logging.getLogger(__name__)

DB_MAGIC = b"LPRD"
LOOP_EXCLUSION = 100


class EmptyDatabaseError(ValueError):
    pass


class NoEvaluableQueriesError(ValueError):
    pass


@dataclass
class DescriptorDatabase:
    """Row-aligned descriptors and metadata; rows must be unit norm, ids unique."""

    descriptors: np.ndarray
    ids: np.ndarray | None = None
    poses: list[Pose | None] | None = None
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.descriptors, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError(f"descriptors must be a 2-D matrix, got shape {d.shape}")
        self.descriptors = d
        n = d.shape[0]
        self.ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (n,):
            raise ValueError("one id per descriptor row is required")
        if len(np.unique(self.ids)) != n:
            raise ValueError("descriptor ids must be unique")
        if self.timestamps is None:
            self.timestamps = np.arange(n, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.poses is None:
            self.poses = [None] * n
        if len(self.poses) != n or self.timestamps.shape != (n,):
            raise ValueError("metadata length does not match descriptor count")
        if n:
            norms = np.linalg.norm(d.astype(np.float64), axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-4:
                raise ValueError("descriptor rows must have unit L2 norm")

    def __len__(self):
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def row_of(self, entry_id: int) -> int:
        hits = np.nonzero(self.ids == entry_id)[0]
        if not len(hits):
            raise KeyError(entry_id)
        return int(hits[0])

    def subset(self, rows) -> DescriptorDatabase:
        rows = np.asarray(rows, dtype=np.int64)
        return DescriptorDatabase(self.descriptors[rows], self.ids[rows],
                                  [self.poses[r] for r in rows], self.timestamps[rows])

    # ---- file format ------------------------------------------------------

    def save(self, path) -> None:
        meta = io.StringIO()
        wr = csv.writer(meta, lineterminator="\n")
        wr.writerow(["id", "timestamp"] + [f"p{k}" for k in range(12)])
        for i, ts, pose in zip(self.ids, self.timestamps, self.poses):
            row = [] if pose is None else [repr(float(v)) for v in pose.matrix[:3, :4].reshape(-1)]
            wr.writerow([int(i), repr(float(ts))] + row)
        with open(path, "wb") as f:
            f.write(DB_MAGIC)
            f.write(struct.pack("<II", len(self), self.dim))
            f.write(np.ascontiguousarray(self.descriptors, dtype="<f4").tobytes())
            f.write(meta.getvalue().encode("utf-8"))

    @classmethod
    def load(cls, path) -> DescriptorDatabase:
        raw = Path(path).read_bytes()
        if raw[:4] != DB_MAGIC:
            raise ValueError(f"{path}: not a descriptor database (bad magic)")
        n, dim = struct.unpack("<II", raw[4:12])
        end = 12 + 4 * n * dim
        if len(raw) < end:
            raise ValueError(f"{path}: truncated descriptor block")
        desc = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=12).reshape(n, dim).astype(np.float32)
        rows = list(csv.reader(io.StringIO(raw[end:].decode("utf-8"))))
        if not rows or rows[0][:2] != ["id", "timestamp"] or len(rows) - 1 != n:
            raise ValueError(f"{path}: metadata block does not list {n} entries")
        ids, ts, poses = [], [], []
        for row in rows[1:]:
            ids.append(int(row[0]))
            ts.append(float(row[1]))
            vals = [float(v) for v in row[2:] if v != ""]
            poses.append(Pose.from_matrix(np.array(vals).reshape(3, 4), orthonormalize=True) if vals else None)
        return cls(desc, np.array(ids), poses, np.array(ts))


def distances(db: DescriptorDatabase, q: np.ndarray) -> np.ndarray:
    """Euclidean distance from ``q`` to every row, computed by direct differences."""
    diff = db.descriptors.astype(np.float64) - np.asarray(q, dtype=np.float64).reshape(1, -1)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _rank(dist: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # ascending distance, ties to the lower id
    return np.lexsort((ids, dist))


def query(db: DescriptorDatabase, q, top_k: int = 1, exclude: tuple[int, int] | None = None
          ) -> list[tuple[int, float]]:
    """Brute-force nearest neighbours as ``(id, distance)`` pairs.

    ``exclude`` is a half-open row window ``(start, stop)`` left out of the
    search, e.g. the most recent scans during loop closing.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if len(db) and q.shape[0] != db.dim:
        raise ValueError(f"query has dimension {q.shape[0]}, database has {db.dim}")
    keep = np.ones(len(db), dtype=bool)
    if exclude is not None:
        keep[max(exclude[0], 0):max(exclude[1], 0)] = False
    rows = np.nonzero(keep)[0]
    if not len(rows):
        raise EmptyDatabaseError("database is empty after exclusion")
    dist = distances(db, q)[rows]
    ids = db.ids[rows]
    order = _rank(dist, ids)[:max(int(top_k), 0)]
    return [(int(ids[k]), float(dist[k])) for k in order]


# --------------------------------------------------------------------------
# metrics


@dataclass
class EvalResult:
    auc: float
    f1max: float
    recall_at: dict[int, float]
    pr_curve: list[tuple[float, float]] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    n_queries: int = 0
    n_loop_queries: int = 0
    one_percent_n: int = 1

    @property
    def recall_at_1(self) -> float:
        return self.recall_at[1]

    @property
    def recall_at_1pct(self) -> float:
        return self.recall_at[self.one_percent_n]


def precision_recall_sweep(top1_dist: np.ndarray, top1_true: np.ndarray, n_positive: int):
    """Precision/recall at every distinct top-1 distance used as the acceptance threshold."""
    order = np.argsort(top1_dist, kind="stable")
    d, hit = top1_dist[order], top1_true[order].astype(np.int64)
    tp = np.cumsum(hit)
    predicted = np.arange(1, len(d) + 1)
    # last index of each run of equal distances
    last = np.nonzero(np.append(d[1:] != d[:-1], True))[0]
    precision = tp[last] / predicted[last]
    recall = tp[last] / n_positive
    return d[last], precision, recall


def auc_f1(precision: np.ndarray, recall: np.ndarray) -> tuple[float, float]:
    """Trapezoidal area under the PR curve anchored at recall 0, and the best F1."""
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[precision[0]], precision])
    auc = float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return min(max(auc, 0.0), 1.0), float(np.max(f1))


def one_percent(n: int) -> int:
    return max(1, math.ceil(0.01 * n))


def evaluate_loop_closing(descriptors: np.ndarray, table: OverlapTable, exclusion: int = LOOP_EXCLUSION,
                          ids: Sequence[int] | None = None) -> EvalResult:
    """Loop-closure metrics over a scan stream.

    Scan ``i`` searches the scans more than ``exclusion`` indices older.
    Its top-1 match is correct when the overlap ``table[i, match]`` exceeds
    0.3; a query counts toward recall when any searchable scan qualifies.
    """
    desc = np.asarray(descriptors, dtype=np.float64)
    n = desc.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
    if n < 200:
        log.warning("loop-closure evaluation on only %d scans; curves will be coarse", n)
    n1 = one_percent(n)
    top1_d, top1_true, loop_hits = [], [], {1: 0, n1: 0}
    n_loop = 0
    for i in range(n):
        m = i - exclusion
        if m <= 0:
            continue
        diff = desc[:m] - desc[i]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        order = _rank(dist, ids[:m])
        truth = np.array([table.get(int(ids[i]), int(j)) > POSITIVE_OVERLAP for j in ids[:m]])
        top1_d.append(dist[order[0]])
        top1_true.append(bool(truth[order[0]]))
        if truth.any():
            n_loop += 1
            for N in loop_hits:
                loop_hits[N] += bool(truth[order[:N]].any())
    if n_loop == 0:
        raise NoEvaluableQueriesError("no evaluable queries")
    thr, precision, recall = precision_recall_sweep(np.array(top1_d), np.array(top1_true), n_loop)
    auc, f1max = auc_f1(precision, recall)
    return EvalResult(auc, f1max, {N: v / n_loop for N, v in sorted(loop_hits.items())},
                      list(zip(precision.tolist(), recall.tolist())), thr.tolist(),
                      len(top1_d), n_loop, n1)


def evaluate_place_recognition(db: DescriptorDatabase, query_ids: Sequence[int], query_descriptors: np.ndarray,
                               table: OverlapTable, ns: Sequence[int] = tuple(range(1, 26))) -> dict[int, float]:
    """recall@N: share of queries with a true reference (overlap > 0.3) among their top N.

    Queries with no true reference anywhere in the database are left out.
    """
    if not len(db):
        raise EmptyDatabaseError("database is empty")
    qd = np.asarray(query_descriptors, dtype=np.float64)
    X = db.descriptors.astype(np.float64)
    max_n = max(ns)
    hits = {N: 0 for N in ns}
    n_eval = 0
    for qid, q in zip(query_ids, qd):
        truth = np.array([table.get(int(qid), int(j)) > POSITIVE_OVERLAP for j in db.ids])
        if not truth.any():
            continue
        n_eval += 1
        diff = X - q
        order = _rank(np.sqrt(np.einsum("ij,ij->i", diff, diff)), db.ids)[:max_n]
        first = np.nonzero(truth[order])[0]
        if len(first):
            for N in ns:
                hits[N] += int(first[0] < N)
    if n_eval == 0:
        raise NoEvaluableQueriesError("no evaluable queries")
    return {N: hits[N] / n_eval for N in ns}


YAW_ANGLES = tuple(range(0, 360, 30))


def rotated_descriptors(clouds: Sequence[PointCloud], params: M.ModelParams, cfg: ProjectionConfig,
                        angle_deg: float) -> np.ndarray:
    """Descriptors of every cloud after a sensor-frame yaw rotation by ``angle_deg``."""
    rot = yaw_rotation(np.radians(angle_deg))
    imgs = [project_cloud(c if angle_deg == 0 else apply_pose(c, rot), cfg).data for c in clouds]
    return M.extract(np.stack(imgs), params)


def yaw_sweep_eval(db: DescriptorDatabase, query_ids: Sequence[int], query_clouds: Sequence[PointCloud],
                   params: M.ModelParams, cfg: ProjectionConfig, table: OverlapTable,
                   angles: Sequence[float] = YAW_ANGLES) -> dict[float, float]:
    """recall@1 against the unrotated database with every query rotated by each angle."""
    if len(query_ids) != len(query_clouds):
        raise ValueError("one cloud per query id is required")
    out = {}
    for a in angles:
        desc = rotated_descriptors(query_clouds, params, cfg, a)
        out[a] = evaluate_place_recognition(db, query_ids, desc, table, ns=(1,))[1]
        log.info("yaw %g deg: recall@1 %.4f", a, out[a])
    return out


# --------------------------------------------------------------------------
# output files


def write_pr_curve(path, result: EvalResult) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["threshold", "precision", "recall"])
        for t, (p, r) in zip(result.thresholds, result.pr_curve):
            wr.writerow([repr(t), repr(p), repr(r)])


def write_recall_at(path, recall_at: dict[int, float]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["n", "recall"])
        for n, r in sorted(recall_at.items()):
            wr.writerow([n, repr(r)])


def write_yaw_sweep(path, sweep: dict[float, float]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["angle_deg", "recall_at_1"])
        for a, r in sorted(sweep.items()):
            wr.writerow([a, repr(r)])


def recall_svg(recall_at: dict[int, float], title: str = "recall@N", width: int = 480, height: int = 320) -> str:
    """Self-contained SVG line chart of recall against N."""
    pad = 40
    ns = sorted(recall_at)
    lo, hi = ns[0], max(ns[-1], ns[0] + 1)
    sx = lambda n: pad + (n - lo) / (hi - lo) * (width - 2 * pad)
    sy = lambda r: height - pad - r * (height - 2 * pad)
    pts = " ".join(f"{sx(n):.1f},{sy(recall_at[n]):.1f}" for n in ns)
    ticks = "".join(f'<text x="{pad - 6}" y="{sy(v) + 4:.1f}" font-size="10" text-anchor="end">{v:.1f}</text>'
                    for v in (0.0, 0.5, 1.0))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<rect width="100%" height="100%" fill="white"/>'
            f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>'
            f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>'
            f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>{ticks}'
            f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="11">N</text>'
            f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/></svg>\n')
