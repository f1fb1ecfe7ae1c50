"""Shared synthetic-sequence builders for the test suite."""

import numpy as np

from lpr import training as TR
from lpr.cli import RunConfig
from lpr.pointcloud import generate_trajectory, trajectory_poses, world_for_trajectory
from lpr.range_image import project_cloud


class Sequence:
    def __init__(self, cfg: RunConfig, with_table: bool = True):
        self.cfg = cfg
        spec = cfg.trajectory()
        self.world = world_for_trajectory(spec, seed=cfg.seed, n_landmarks=cfg.n_landmarks, clearance=cfg.clearance)
        self.scans = generate_trajectory(self.world, spec, cfg.h, cfg.w, cfg.fov_up, cfg.fov_down, cfg.max_range,
                                         cfg.noise_sigma)
        _, self.segments = trajectory_poses(spec, self.world.base)
        self.proj = cfg.projection()
        self.images = np.stack([project_cloud(c, self.proj).data for _, c in self.scans])
        self.database = [i for i, s in enumerate(self.segments) if s.role == "Database"]
        self.queries = [i for i, s in enumerate(self.segments) if s.role == "Query"]
        self.table = (TR.build_overlap_table(self.scans, self.proj, cfg.overlap_delta, cfg.candidate_radius)
                      if with_table else None)


def small_loop(**kw) -> RunConfig:
    base = dict(steps=160, revisit_after=120, step_length=2.0, n_landmarks=1500, h=8, w=90, d_model=16,
                n_head=2, d_ffn=32, d_inter=32, d_output=16, n_clusters=4, epochs=2)
    base.update(kw)
    return RunConfig(**base)
