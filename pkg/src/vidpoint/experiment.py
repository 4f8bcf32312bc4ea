"""Dataset recipes and the encoder input path shared by the CLI and the
acceptance experiments.

Encoder inputs are produced per raw camera-frame cloud as::

    raw --FPS--> ViewNet --> transform applied to the raw cloud (world frame)
        --> run_pipeline (crop, plane removal, outlier filter, normalize, FPS)

The "no-viewnet" ablation skips the first two steps and runs the pipeline
directly on the camera-frame cloud, with a crop box expressed in that frame.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .disentangle import ObservationSet
from .geometry import FrameTag, PointCloud, farthest_point_sampling
from .preprocess import PipelineConfig, run_pipeline
from .synthscene import (CameraSamplingRange, SceneConfig, default_reference_camera,
                         make_triplet, random_scene, sample_camera, scripted_episode)
from .viewnet import ViewNetParams, predict_batch, prepare_triplet

log = logging.getLogger(__name__)

# world frame: the table top is z = 0 and spans about +/-0.6 x +/-0.4 m
WORLD_CROP = ((-0.9, -0.7, -0.1), (0.9, 0.7, 0.7))


@dataclass(frozen=True)
class SamplingSpec:
    """Serializable form of :class:`CameraSamplingRange`."""

    yaw_range: float = 70.0
    pitch_range: float = 7.5
    distance_scale: tuple = (0.9, 1.1)
    target: tuple = (0.0, 0.0, 0.05)
    resolution: int = 240
    fov_deg: float = 60.0
    ref_distance: float = 1.0
    ref_elevation_deg: float = 40.0

    def build(self) -> CameraSamplingRange:
        ref = default_reference_camera(self.resolution, self.resolution, self.ref_distance,
                                       self.ref_elevation_deg, self.target, self.fov_deg)
        return CameraSamplingRange(ref, tuple(self.target), self.yaw_range, self.pitch_range,
                                   tuple(self.distance_scale))


@dataclass(frozen=True)
class DataSpec:
    train_triplets: int = 2000
    test_triplets: int = 200
    train_episodes: int = 64
    eval_episodes: int = 16
    episode_length: int = 20
    # caps on stored cloud sizes; about 85% of a 240x240 render is table, and
    # episode clouds must keep enough effector points to survive the
    # outlier filter after the table is removed
    triplet_points: int = 2048
    episode_points: int = 8192
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    scene: SceneConfig = field(default_factory=SceneConfig)


def _child_seeds(seed, tag, n):
    ss = np.random.SeedSequence([seed, tag])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def _triplet_job(args):
    s, spec = args
    sampling = spec.sampling.build()
    rng = np.random.default_rng(s)
    scene = random_scene(int(rng.integers(2**31)), spec.scene)
    cam, _ = sample_camera(sampling, rng)
    return make_triplet(scene, sampling.reference, cam, spec.triplet_points,
                        int(rng.integers(2**31)))


def _episode_job(args):
    s, spec = args
    rng = np.random.default_rng(s)
    scene = random_scene(int(rng.integers(2**31)), spec.scene)
    return scripted_episode(scene, spec.episode_length, int(rng.integers(2**31)),
                            spec.sampling.build(), spec.episode_points)


def _map(fn, seeds, spec, workers):
    jobs = [(s, spec) for s in seeds]
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def generate_triplets(n, seed, spec: DataSpec, tag=0, workers=1) -> list:
    """``n`` raw triplets, each from its own random scene and camera. Every
    item has its own child seed, so the output does not depend on
    ``workers``."""
    return _map(_triplet_job, _child_seeds(seed, 100 + tag, n), spec, workers)


def generate_episodes(n, seed, spec: DataSpec, tag=0, workers=1) -> list:
    return _map(_episode_job, _child_seeds(seed, 200 + tag, n), spec, workers)


def prepare_triplets(triplets, n_points, seed=0) -> list:
    return [prepare_triplet(t, n_points, seed + i) for i, t in enumerate(triplets)]


def align_clouds(params: ViewNetParams, clouds, seed=0, chunk=64) -> list:
    """Warp raw camera-frame clouds into the world frame with transforms
    predicted from their FPS subsamples."""
    out = []
    for start in range(0, len(clouds), chunk):
        part = clouds[start:start + chunk]
        sub = np.stack([farthest_point_sampling(c, params.n_points, seed)[0].points
                        for c in part])
        for c, tf in zip(part, predict_batch(params, sub)):
            out.append(PointCloud(tf.apply_points(c.points), frame_tag=FrameTag.WORLD))
    return out


def pipeline_for(config: PipelineConfig, aligned: bool) -> PipelineConfig:
    """World-frame crop for aligned clouds, the configured camera-frame
    crop otherwise."""
    return replace(config, crop_bounds=WORLD_CROP) if aligned else config


def _pipeline_job(args):
    points, cfg = args
    return run_pipeline(PointCloud(points), cfg).points


def build_observations(episodes, pipeline: PipelineConfig,
                       viewnet: ViewNetParams | None = None, workers=1) -> ObservationSet:
    """Encoder inputs ``(E, T, N, 3)`` for both views of every frame."""
    frames = [f for e in episodes for f in e.frames]
    ref = [f.ref_cloud for f in frames]
    rand = [f.rand_cloud for f in frames]
    if viewnet is not None:
        ref = align_clouds(viewnet, ref)
        rand = align_clouds(viewnet, rand)
    cfg = pipeline_for(pipeline, viewnet is not None)
    jobs = [(c.points, cfg) for c in ref + rand]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(_pipeline_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        out = [_pipeline_job(j) for j in jobs]
    e, t = len(episodes), len(episodes[0].frames)
    shape = (e, t, cfg.target_points, 3)
    ref_arr = np.stack(out[:len(ref)]).reshape(shape)
    rand_arr = np.stack(out[len(ref):]).reshape(shape)
    yaw = np.array([f.rand_view[0] for f in frames]).reshape(e, t)
    return ObservationSet(ref_arr, rand_arr, yaw)
