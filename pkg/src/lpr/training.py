"""Overlap-supervised tuple sampling and lazy triplet training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .pointcloud import PointCloud, Pose
from .range_image import (EmptyRangeImageError, ProjectionConfig, RangeImage, UndefinedOverlapError,
                          compute_overlap, project_cloud, reproject)
from .tensor import Tensor

log = logging.getLogger(__name__)

POSITIVE_OVERLAP = 0.3


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    k_p: int = 6
    k_n: int = 6
    alpha: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_tuples: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.k_p < 1 or self.k_n < 1:
            raise ValueError("k_p and k_n must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_tuples < 1:
            raise ValueError("invalid learning rate, epochs or batch size")


@dataclass(frozen=True)
class TrainingTuple:
    query_index: int
    positive_indices: tuple[int, ...]
    negative_indices: tuple[int, ...]


class OverlapTable:
    """Sparse (query, reference) -> overlap map; absent pairs count as 0."""

    def __init__(self, values: dict[tuple[int, int], float] | None = None, failures: int = 0):
        self.values: dict[tuple[int, int], float] = dict(values or {})
        self.failures = failures
        self._by_query: dict[int, dict[int, float]] | None = None

    def __len__(self):
        return len(self.values)

    def __contains__(self, key) -> bool:
        return key in self.values

    def __eq__(self, other):
        return isinstance(other, OverlapTable) and self.values == other.values

    def get(self, i: int, j: int) -> float:
        return self.values.get((i, j), 0.0)

    def set(self, i: int, j: int, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"overlap must lie in [0, 1], got {value}")
        self.values[(i, j)] = float(value)
        self._by_query = None

    def row(self, i: int) -> dict[int, float]:
        if self._by_query is None:
            rows: dict[int, dict[int, float]] = {}
            for (a, b), v in self.values.items():
                rows.setdefault(a, {})[b] = v
            self._by_query = rows
        return self._by_query.get(i, {})

    def positives(self, i: int, universe: Iterable[int] | None = None) -> list[int]:
        allowed = None if universe is None else set(universe)
        return sorted(j for j, v in self.row(i).items()
                      if v > POSITIVE_OVERLAP and j != i and (allowed is None or j in allowed))

    def negatives(self, i: int, universe: Iterable[int]) -> list[int]:
        row = self.row(i)
        return [j for j in sorted(set(universe)) if j != i and row.get(j, 0.0) <= POSITIVE_OVERLAP]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["i", "j", "overlap"])
            for (i, j) in sorted(self.values):
                wr.writerow([i, j, repr(self.values[(i, j)])])

    @classmethod
    def read_csv(cls, path) -> OverlapTable:
        with open(path, newline="") as f:
            rd = csv.reader(f)
            header = next(rd, None)
            if header != ["i", "j", "overlap"]:
                raise ValueError(f"{path}: expected header i,j,overlap")
            table = cls()
            for row in rd:
                if row:
                    table.set(int(row[0]), int(row[1]), float(row[2]))
        return table


def build_overlap_table(scans: Sequence[tuple[Pose, PointCloud]], cfg: ProjectionConfig, delta: float,
                        candidate_radius: float = 100.0, queries: Iterable[int] | None = None,
                        references: Iterable[int] | None = None) -> OverlapTable:
    """Ground-truth overlap for every (query, reference) pair within ``candidate_radius``.

    Pairs whose projection fails are stored as 0 and counted in ``failures``.
    """
    if len(scans) < 2:
        raise ValueError("need at least two scans")
    queries = range(len(scans)) if queries is None else list(queries)
    references = range(len(scans)) if references is None else list(references)
    refs = np.asarray(list(references), dtype=np.int64)
    xyz = np.array([p.translation for p, _ in scans])
    table = OverlapTable()
    failures = 0
    for i in queries:
        pose_q, cloud_q = scans[i]
        try:
            img_q = project_cloud(cloud_q, cfg)
        except EmptyRangeImageError:
            img_q = None
        near = refs[np.linalg.norm(xyz[refs] - xyz[i], axis=1) <= candidate_radius]
        for j in near:
            j = int(j)
            pose_r, cloud_r = scans[j]
            try:
                if img_q is None:
                    raise EmptyRangeImageError("empty range image")
                value = compute_overlap(img_q, reproject(cloud_r, pose_r, pose_q, cfg), delta)
            except (EmptyRangeImageError, UndefinedOverlapError):
                value = 0.0
                failures += 1
            table.values[(int(i), j)] = value
    if failures:
        log.warning("overlap table: %d pairs failed to project and were stored as 0", failures)
    table.failures = failures
    return table


def sample_tuple(table: OverlapTable, query_index: int, cfg: TrainConfig, rng: np.random.Generator,
                 universe: Sequence[int]) -> TrainingTuple | None:
    """Uniformly sample k_p positives and k_n negatives; None when the query must be skipped."""
    pos = table.positives(query_index, universe)
    neg = table.negatives(query_index, universe)
    if len(pos) < cfg.k_p or len(neg) < cfg.k_n:
        return None
    p = rng.choice(len(pos), size=cfg.k_p, replace=False)
    n = rng.choice(len(neg), size=cfg.k_n, replace=False)
    return TrainingTuple(query_index, tuple(pos[k] for k in p), tuple(neg[k] for k in n))


def raw_triplet_loss(vq: Tensor, vps: Tensor, vns: Tensor, alpha: float) -> Tensor:
    """k_p * (alpha + max_p d(q, p)) - sum_n d(q, n) with squared Euclidean d.

    ``vq`` is (..., d); ``vps`` and ``vns`` are (..., k, d). Leading batch
    dimensions are kept.
    """
    if vps.shape[-2] == 0 or vns.shape[-2] == 0:
        raise ValueError("lazy triplet loss needs at least one positive and one negative")
    q = vq.reshape(*vq.shape[:-1], 1, vq.shape[-1])
    dp = T.tsum((vps - q) * (vps - q), axis=-1)
    dn = T.tsum((vns - q) * (vns - q), axis=-1)
    k_p = vps.shape[-2]
    return (T.tmax(dp, axis=-1) + alpha) * float(k_p) - T.tsum(dn, axis=-1)


def lazy_triplet_loss(vq, vps, vns, alpha: float) -> Tensor:
    """Clamped lazy triplet loss; never negative."""
    vq, vps, vns = (T.as_tensor(v) for v in (vq, vps, vns))
    if vps.ndim == 1:
        vps = vps.reshape(1, -1)
    if vns.ndim == 1:
        vns = vns.reshape(1, -1)
    return T.relu(raw_triplet_loss(vq, vps, vns, alpha))


class Adam:
    def __init__(self, params: M.ModelParams, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params}
        self.v = {k: np.zeros_like(t.data) for k, t in params}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


@dataclass
class TrainResult:
    params: M.ModelParams
    history: list[tuple[int, float, float]] = field(default_factory=list)
    skipped_queries: int = 0

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["step", "raw_loss", "clamped_loss"])
            for step, raw, clamped in self.history:
                wr.writerow([step, repr(raw), repr(clamped)])


def tuple_loss(images: np.ndarray, tuples: Sequence[TrainingTuple], params: M.ModelParams,
               alpha: float) -> tuple[Tensor, float]:
    """Mean clamped loss over tuples (graph attached) and the mean raw value."""
    idx = [i for t in tuples for i in (t.query_index, *t.positive_indices, *t.negative_indices)]
    desc = M.forward(M.images_to_tensor(images[idx], params.config, params["gdg.centers"].data.dtype), params)
    k_p, k_n = len(tuples[0].positive_indices), len(tuples[0].negative_indices)
    desc = desc.reshape(len(tuples), 1 + k_p + k_n, -1)
    q, pos, neg = T.split(desc, 1, [1, k_p, k_n])
    raw = raw_triplet_loss(q.reshape(len(tuples), -1), pos, neg, alpha)
    loss = T.mean(T.relu(raw))
    return loss, float(np.mean(raw.data))


def train(images, table: OverlapTable, model_config: M.ModelConfig, train_config: TrainConfig,
          params: M.ModelParams | None = None, universe: Sequence[int] | None = None,
          callback: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Train with Adam on tuples drawn from ``universe`` (default: every image).

    ``images`` is an (n, h, w) array or a list of range images indexed like
    the overlap table. Aborts with ``DivergenceError`` on a NaN loss.
    """
    if not isinstance(images, np.ndarray):
        images = np.stack([im.data if isinstance(im, RangeImage) else im for im in images])
    images = np.asarray(images, dtype=np.float32)
    universe = list(range(len(images))) if universe is None else sorted(universe)
    if params is None:
        params = M.init_params(model_config, train_config.rng_seed)
    rng = np.random.default_rng(train_config.rng_seed)
    eligible = [q for q in universe
                if len(table.positives(q, universe)) >= train_config.k_p
                and len(table.negatives(q, universe)) >= train_config.k_n]
    if not eligible:
        raise ValueError("no query has enough positives and negatives to form a tuple")
    result = TrainResult(params, skipped_queries=len(universe) - len(eligible))
    opt = Adam(params, lr=train_config.learning_rate)
    step = 0
    for _ in range(train_config.epochs):
        order = rng.permutation(eligible)
        for start in range(0, len(order), train_config.batch_tuples):
            tuples = [sample_tuple(table, int(q), train_config, rng, universe)
                      for q in order[start:start + train_config.batch_tuples]]
            params.zero_grad()
            loss, raw = tuple_loss(images, tuples, params, train_config.alpha)
            value = loss.item()
            if not (math.isfinite(value) and math.isfinite(raw)):
                raise DivergenceError(f"loss became NaN at step {step + 1}")
            if loss.requires_grad:
                T.backward(loss)
            opt.step()
            step += 1
            result.history.append((step, raw, value))
            if callback is not None:
                callback(step, raw, value)
    return result
