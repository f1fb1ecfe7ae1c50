"""Command-line entry point: ``lpr generate | overlap | train | extract | evaluate | sweep-yaw``.

Every command validates its inputs before creating any output. Exit codes:
0 success, 1 validation error, 2 runtime error, 3 divergence guard.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import model as M
from . import retrieval as R
from . import training as TR
from .pointcloud import (PATTERNS, PointCloud, Pose, TrajectorySpec, generate_trajectory, read_poses,
                         read_scan, trajectory_poses, world_for_trajectory, write_poses, write_scan)
from .range_image import ProjectionConfig, default_delta, project_cloud

log = logging.getLogger("lpr")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class ValidationError(Exception):
    pass


# --------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Flat key=value experiment configuration.

    The defaults describe the desk-scale synthetic benchmark: a 600-scan
    loop whose last 200 scans revisit the first 400.
    """

    # world and trajectory
    seed: int = 1
    pattern: str = "loop"
    steps: int = 600
    revisit_after: int = 400
    step_length: float = 2.0
    lateral_offset: float = 0.3
    yaw_jitter: float = 0.02
    n_landmarks: int = 4000
    clearance: float = 3.0
    noise_sigma: float = 0.0
    # projection
    w: int = 180
    h: int = 16
    fov_up: float = 3.0
    fov_down: float = 25.0
    max_range: float = 100.0
    delta: float = 0.0  # 0 picks the beam-count default
    candidate_radius: float = 50.0
    # model
    d_model: int = 32
    n_head: int = 4
    d_ffn: int = 64
    num_tm_blocks: int = 1
    d_inter: int = 64
    d_output: int = 32
    n_clusters: int = 8
    range_scale: float = 50.0
    # training
    k_p: int = 6
    k_n: int = 6
    alpha: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 3
    batch_tuples: int = 1

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValidationError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.candidate_radius <= 0 or self.delta < 0:
            raise ValidationError("candidate_radius must be positive and delta non-negative")
        try:
            self.trajectory()
            self.projection()
            self.model()
            self.training()
        except (ValueError, M.ConfigError) as exc:
            raise ValidationError(str(exc)) from exc

    @classmethod
    def from_text(cls, text: str, source: str = "config") -> RunConfig:
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{source}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
            conv = {"int": int, "float": float, "str": str}[types[key]]
            try:
                values[key] = conv(raw)
            except ValueError:
                raise ValidationError(f"{source}:{lineno}: {key} expects {types[key]}, got {raw!r}") from None
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def replace(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **kw)

    def trajectory(self) -> TrajectorySpec:
        return TrajectorySpec(self.pattern, steps=self.steps, step_length=self.step_length,
                              revisit_after=self.revisit_after, lateral_offset=self.lateral_offset,
                              yaw_jitter=self.yaw_jitter, seed=self.seed)

    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(w=self.w, h=self.h, fov_up=self.fov_up, fov_down=self.fov_down,
                                max_range=self.max_range)

    @property
    def overlap_delta(self) -> float:
        return self.delta or default_delta(self.h)

    def model(self) -> M.ModelConfig:
        return M.ModelConfig(h=self.h, w=self.w, d_model=self.d_model, n_head=self.n_head, d_ffn=self.d_ffn,
                             num_tm_blocks=self.num_tm_blocks, d_inter=self.d_inter, d_output=self.d_output,
                             n_clusters=self.n_clusters, range_scale=self.range_scale)

    def training(self) -> TR.TrainConfig:
        return TR.TrainConfig(k_p=self.k_p, k_n=self.k_n, alpha=self.alpha, learning_rate=self.learning_rate,
                              epochs=self.epochs, batch_tuples=self.batch_tuples, rng_seed=self.seed)


def load_config(path: str | None, seed: int | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file not found: {path}")
        cfg = RunConfig.from_text(p.read_text(), str(p))
    return cfg if seed is None else cfg.replace(seed=seed)


# --------------------------------------------------------------------------
# data directories


@dataclass
class Dataset:
    root: Path
    config: RunConfig
    poses: list[Pose]
    roles: list[str]

    @property
    def database_ids(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == "Database"]

    @property
    def query_ids(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == "Query"]

    def scan_path(self, i: int) -> Path:
        return self.root / "scans" / f"{i:06d}.bin"

    def scan(self, i: int) -> PointCloud:
        return read_scan(self.scan_path(i))

    def scans(self) -> list[tuple[Pose, PointCloud]]:
        return [(p, self.scan(i)) for i, p in enumerate(self.poses)]

    def images(self, cfg: ProjectionConfig) -> np.ndarray:
        return np.stack([project_cloud(self.scan(i), cfg).data for i in range(len(self.poses))])


def open_dataset(path) -> Dataset:
    root = Path(path)
    for name in ("poses.txt", "manifest.csv", "run.cfg"):
        if not (root / name).is_file():
            raise ValidationError(f"{root}: missing {name}; run 'lpr generate' first")
    cfg = RunConfig.from_text((root / "run.cfg").read_text(), str(root / "run.cfg"))
    poses = read_poses(root / "poses.txt")
    with open(root / "manifest.csv", newline="") as f:
        roles = [row["role"] for row in csv.DictReader(f)]
    if len(roles) != len(poses):
        raise ValidationError(f"{root}: manifest lists {len(roles)} scans but poses.txt has {len(poses)}")
    missing = [i for i in range(len(poses)) if not (root / "scans" / f"{i:06d}.bin").is_file()]
    if missing:
        raise ValidationError(f"{root}: {len(missing)} scan files missing (first: {missing[0]:06d}.bin)")
    return Dataset(root, cfg, poses, roles)


def generate_dataset(cfg: RunConfig, out: Path) -> None:
    spec = cfg.trajectory()
    world = world_for_trajectory(spec, seed=cfg.seed, n_landmarks=cfg.n_landmarks, clearance=cfg.clearance)
    scans = generate_trajectory(world, spec, cfg.h, cfg.w, cfg.fov_up, cfg.fov_down, cfg.max_range,
                                cfg.noise_sigma)
    _, segments = trajectory_poses(spec, world.base)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    for i, (_, cloud) in enumerate(scans):
        write_scan(out / "scans" / f"{i:06d}.bin", cloud)
    write_poses(out / "poses.txt", [p for p, _ in scans])
    with open(out / "manifest.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["index", "pattern", "role", "direction", "first_pass_index"])
        for i, seg in enumerate(segments):
            wr.writerow([i, cfg.pattern, seg.role, seg.direction, seg.first_pass_index])
    (out / "run.cfg").write_text(cfg.to_text())


def load_or_build_table(data: Dataset, table_path: str | None) -> TR.OverlapTable:
    if table_path is not None:
        return TR.OverlapTable.read_csv(table_path)
    if (data.root / "overlap.csv").is_file():
        return TR.OverlapTable.read_csv(data.root / "overlap.csv")
    cfg = data.config
    log.info("building overlap table (radius %.0f m)", cfg.candidate_radius)
    return TR.build_overlap_table(data.scans(), cfg.projection(), cfg.overlap_delta, cfg.candidate_radius)


# --------------------------------------------------------------------------
# commands: each validates first, then returns a zero-argument runner


def _out_required(args) -> Path:
    if args.out is None:
        raise ValidationError("--out is required")
    return Path(args.out)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {path}")
    return p


def cmd_generate(args):
    cfg = load_config(args.config, args.seed)
    out = _out_required(args)
    if out.exists() and any(out.iterdir()):
        raise ValidationError(f"output directory {out} is not empty")

    def run():
        out.mkdir(parents=True, exist_ok=True)
        generate_dataset(cfg, out)
        log.info("wrote %d scans to %s", cfg.steps, out)
    return run


def cmd_overlap(args):
    data = open_dataset(args.data)
    out = _out_required(args)

    def run():
        cfg = data.config
        table = TR.build_overlap_table(data.scans(), cfg.projection(), cfg.overlap_delta, cfg.candidate_radius)
        table.write_csv(out)
        log.info("%d overlap pairs written (%d failures)", len(table), table.failures)
    return run


def cmd_train(args):
    data = open_dataset(args.data)
    cfg = data.config
    if args.config is not None or args.seed is not None:
        override = load_config(args.config, args.seed) if args.config else cfg.replace(seed=args.seed)
        for key in ("w", "h", "fov_up", "fov_down", "max_range"):
            if getattr(override, key) != getattr(cfg, key):
                raise ValidationError(f"config {key}={getattr(override, key)} does not match the dataset "
                                      f"({getattr(cfg, key)})")
        cfg = override
    if args.table is not None:
        _require_file(args.table, "overlap table")
    out = _out_required(args)

    def run():
        table = load_or_build_table(data, args.table)
        images = data.images(cfg.projection())
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "model.lprw"

        def progress(step, raw, clamped):
            if step % 100 == 0:
                log.info("step %d  loss %.5f (raw %.5f)", step, clamped, raw)
        try:
            result = TR.train(images, table, cfg.model(), cfg.training(), universe=data.database_ids,
                              callback=progress)
        except TR.DivergenceError:
            for p in (ckpt, Path(str(ckpt) + ".cfg"), out / "loss.csv"):
                p.unlink(missing_ok=True)
            raise
        result.params.save(ckpt)
        result.write_history(out / "loss.csv")
        log.info("trained %d steps; %d queries skipped", len(result.history), result.skipped_queries)
    return run


def _load_checkpoint(path) -> M.ModelParams:
    p = _require_file(path, "checkpoint")
    try:
        return M.ModelParams.load(p)
    except (ValueError, OSError, M.ConfigError) as exc:
        raise ValidationError(f"cannot load checkpoint {path}: {exc}") from exc


def _check_dims(params: M.ModelParams, proj: ProjectionConfig) -> None:
    mc = params.config
    if (mc.h, mc.w) != (proj.h, proj.w):
        raise ValidationError(f"checkpoint expects {mc.h}x{mc.w} range images, scans project to "
                              f"{proj.h}x{proj.w}")


def cmd_extract(args):
    params = _load_checkpoint(args.checkpoint)
    data = open_dataset(args.data)
    proj = data.config.projection()
    _check_dims(params, proj)
    out = _out_required(args)

    def run():
        rows, times = [], []
        for i in range(len(data.poses)):
            img = project_cloud(data.scan(i), proj).data
            t0 = time.perf_counter()
            rows.append(M.extract(img[None], params)[0])
            times.append(time.perf_counter() - t0)
        db = R.DescriptorDatabase(np.stack(rows), np.arange(len(rows)), list(data.poses),
                                  np.arange(len(rows), dtype=np.float64))
        db.save(out)
        ms = 1e3 * np.asarray(times)
        print(f"extracted {len(rows)} descriptors: {ms.mean():.2f} +- {ms.std():.2f} ms/scan", file=sys.stderr)
    return run


def cmd_evaluate(args):
    db = R.DescriptorDatabase.load(_require_file(args.db, "descriptor database"))
    table = TR.OverlapTable.read_csv(_require_file(args.table, "overlap table"))
    if args.mode == "place":
        if args.data is None:
            raise ValidationError("--data is required in place mode (it supplies the query split)")
        data = open_dataset(args.data)
        if len(data.roles) != len(db):
            raise ValidationError(f"dataset has {len(data.roles)} scans, database {len(db)} rows")
    out = _out_required(args)

    def run():
        if args.mode == "stream":
            res = R.evaluate_loop_closing(db.descriptors, table, ids=db.ids)
            recall = res.recall_at
            summary = {"auc": res.auc, "f1max": res.f1max, "recall_at_1": res.recall_at_1,
                       "recall_at_1pct": res.recall_at_1pct, "loop_queries": res.n_loop_queries}
        else:
            ref = db.subset([db.row_of(i) for i in data.database_ids])
            qrows = [db.row_of(i) for i in data.query_ids]
            recall = R.evaluate_place_recognition(ref, data.query_ids, db.descriptors[qrows], table)
            res = None
            summary = {"recall_at_1": recall[1],
                       "recall_at_1pct": recall.get(R.one_percent(len(ref)), float("nan"))}
        out.mkdir(parents=True, exist_ok=True)
        if res is not None:
            R.write_pr_curve(out / "pr_curve.csv", res)
        R.write_recall_at(out / "recall_at.csv", recall)
        with open(out / "metrics.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["metric", "value"])
            for k, v in summary.items():
                wr.writerow([k, repr(v)])
        if args.svg:
            (out / "recall_at.svg").write_text(R.recall_svg(recall))
        for k, v in summary.items():
            print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    return run


def cmd_sweep_yaw(args):
    params = _load_checkpoint(args.checkpoint)
    db = R.DescriptorDatabase.load(_require_file(args.db, "descriptor database"))
    table = TR.OverlapTable.read_csv(_require_file(args.table, "overlap table"))
    data = open_dataset(args.data)
    proj = data.config.projection()
    _check_dims(params, proj)
    if params.config.d_output != db.dim:
        raise ValidationError(f"checkpoint emits {params.config.d_output}-d descriptors, database holds {db.dim}-d")
    out = _out_required(args)

    def run():
        ref = db.subset([db.row_of(i) for i in data.database_ids])
        clouds = [data.scan(i) for i in data.query_ids]
        sweep = R.yaw_sweep_eval(ref, data.query_ids, clouds, params, proj, table)
        out.parent.mkdir(parents=True, exist_ok=True)
        R.write_yaw_sweep(out, sweep)
        vals = list(sweep.values())
        print(f"recall@1 over {len(vals)} angles: min {min(vals):.4f} max {max(vals):.4f}")
    return run


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (default 1)")
    common.add_argument("--out", help="output path")

    ap = argparse.ArgumentParser(prog="lpr", description="Yaw-invariant LiDAR place recognition experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common], help="simulate a synthetic trajectory")
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("overlap", parents=[common], help="write the ground-truth overlap table")
    p.add_argument("data")
    p.set_defaults(func=cmd_overlap)
    p = sub.add_parser("train", parents=[common], help="train on the database scans")
    p.add_argument("data")
    p.add_argument("--table", help="overlap table (built on the fly when absent)")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("extract", parents=[common], help="compute one descriptor per scan")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.set_defaults(func=cmd_extract)
    p = sub.add_parser("evaluate", parents=[common], help="loop-closing or place-recognition metrics")
    p.add_argument("db")
    p.add_argument("--table", required=True)
    p.add_argument("--mode", choices=("stream", "place"), default="stream")
    p.add_argument("--data", help="dataset directory (place mode)")
    p.add_argument("--svg", action="store_true", help="also write recall_at.svg")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("sweep-yaw", parents=[common], help="recall@1 under 30 degree query rotations")
    p.add_argument("checkpoint")
    p.add_argument("db")
    p.add_argument("data")
    p.add_argument("--table", required=True)
    p.set_defaults(func=cmd_sweep_yaw)
    return ap


def _setup_logging():
    level = os.environ.get("LPR_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=args.threads)
    except ImportError:  # pragma: no cover
        limit = nullcontext()
    with limit:
        try:
            run = args.func(args)
        except (ValidationError, ValueError, M.ConfigError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        try:
            run()
        except TR.DivergenceError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except Exception as exc:
            log.debug("runtime failure", exc_info=True)
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
