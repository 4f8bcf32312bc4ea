"""Parametric tabletop scenes, analytic ray-cast depth rendering, random
camera sampling, scripted episodes and alignment triplets.

Rendering is exact: each pixel ray is intersected in closed form with the
table rectangle and every sphere/box/cylinder, so unprojected pixels lie
on the analytic surfaces to floating-point precision.
"""

from __future__ import annotations

import enum
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import GeometryError
from .geometry import (CameraModel, DepthImage, FrameTag, PointCloud,
                       Sim3Transform, look_at_pose, unproject_depth)
from .preprocess import PlaneModel

log = logging.getLogger(__name__)

_EPS = 1e-9


class PrimitiveKind(str, enum.Enum):
    SPHERE = "sphere"
    BOX = "box"
    CYLINDER = "cylinder"


_SIZE_ARITY = {PrimitiveKind.SPHERE: 1, PrimitiveKind.BOX: 3, PrimitiveKind.CYLINDER: 2}


@dataclass(frozen=True, eq=False)
class Primitive:
    """A solid with a rigid pose (world <- local).

    ``size`` is ``(radius,)`` for spheres, half extents ``(hx, hy, hz)``
    for boxes and ``(radius, half_height)`` for cylinders (axis = local z).
    """

    kind: PrimitiveKind
    pose: Sim3Transform
    size: tuple
    id: str

    def __post_init__(self):
        kind = PrimitiveKind(self.kind)
        size = tuple(float(s) for s in self.size)
        if len(size) != _SIZE_ARITY[kind] or min(size) <= 0:
            raise GeometryError(f"bad {kind.value} extents {size}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "size", size)

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    def moved_to(self, position) -> Primitive:
        return replace(self, pose=Sim3Transform(self.pose.rotation, position))

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points) - self.pose.translation) @ self.pose.matrix

    def surface_distance(self, points) -> np.ndarray:
        """Unsigned distance from world points to the primitive surface."""
        p = self.to_local(points)
        if self.kind is PrimitiveKind.SPHERE:
            return np.abs(np.linalg.norm(p, axis=1) - self.size[0])
        if self.kind is PrimitiveKind.BOX:
            q = np.abs(p) - np.asarray(self.size)
        else:
            q = np.stack([np.hypot(p[:, 0], p[:, 1]) - self.size[0],
                          np.abs(p[:, 2]) - self.size[1]], axis=1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def intersect(self, origin, dirs) -> np.ndarray:
        """Smallest ray parameter > 0 for rays ``origin + t * dirs`` (inf = miss)."""
        R = self.pose.matrix
        o = (np.asarray(origin) - self.pose.translation) @ R
        d = dirs @ R
        if self.kind is PrimitiveKind.SPHERE:
            return _hit_sphere(o, d, self.size[0])
        if self.kind is PrimitiveKind.BOX:
            return _hit_box(o, d, np.asarray(self.size))
        return _hit_cylinder(o, d, *self.size)


def _first_positive(t_near, t_far):
    t = np.where(t_near > _EPS, t_near, t_far)
    return np.where(t > _EPS, t, np.inf)


def _hit_sphere(o, d, r):
    a = (d * d).sum(1)
    b = d @ o
    c = o @ o - r * r
    disc = b * b - a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # numerically stable roots of a t^2 + 2 b t + c = 0
    qv = -(b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = qv / a
        t2 = np.where(qv != 0, c / qv, 0.0)
    t = _first_positive(np.minimum(t1, t2), np.maximum(t1, t2))
    return np.where(ok, t, np.inf)


def _hit_box(o, d, half):
    d_safe = np.where(np.abs(d) < 1e-300, 1e-300, d)
    t1 = (-half - o) / d_safe
    t2 = (half - o) / d_safe
    t_near = np.minimum(t1, t2).max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    hit = (t_near <= t_far) & (t_far > _EPS)
    return np.where(hit, _first_positive(t_near, t_far), np.inf)


def _hit_cylinder(o, d, r, hh):
    best = np.full(len(d), np.inf)
    # lateral surface
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = d[:, 0] * o[0] + d[:, 1] * o[1]
    c = o[0] ** 2 + o[1] ** 2 - r * r
    disc = b * b - a * c
    ok = (disc >= 0) & (a > 1e-300)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    qv = -(b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        roots = (np.where(ok, qv / a, np.inf), np.where(ok & (qv != 0), c / qv, np.inf))
    for t in roots:
        z = o[2] + t * d[:, 2]
        valid = ok & (t > _EPS) & (np.abs(z) <= hh)
        best = np.where(valid & (t < best), t, best)
    # caps
    dz = np.where(np.abs(d[:, 2]) < 1e-300, 1e-300, d[:, 2])
    for zc in (-hh, hh):
        t = (zc - o[2]) / dz
        x = o[0] + t * d[:, 0]
        y = o[1] + t * d[:, 1]
        valid = (t > _EPS) & (x * x + y * y <= r * r)
        best = np.where(valid & (t < best), t, best)
    return best


@dataclass(frozen=True)
class Table:
    """Finite horizontal rectangle ``z = height`` centered at ``center``."""

    height: float = 0.0
    center: tuple = (0.0, 0.0)
    half_extents: tuple = (0.6, 0.4)

    @property
    def plane(self) -> PlaneModel:
        return PlaneModel(np.array([0.0, 0.0, 1.0]), self.height)

    def intersect(self, origin, dirs) -> np.ndarray:
        dz = np.where(np.abs(dirs[:, 2]) < 1e-300, 1e-300, dirs[:, 2])
        t = (self.height - origin[2]) / dz
        x = origin[0] + t * dirs[:, 0] - self.center[0]
        y = origin[1] + t * dirs[:, 1] - self.center[1]
        inside = (np.abs(x) <= self.half_extents[0]) & (np.abs(y) <= self.half_extents[1])
        return np.where(inside & (t > _EPS), t, np.inf)

    def surface_distance(self, points) -> np.ndarray:
        return np.abs(np.asarray(points)[:, 2] - self.height)


@dataclass(frozen=True, eq=False)
class Scene:
    """Table, static objects and one moving effector.

    Render labels: 0 = table, 1..n = ``objects``, n+1 = effector.
    """

    table: Table | None = field(default_factory=Table)
    objects: tuple = ()
    effector: Primitive | None = None
    target_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.id for o in self.surfaces()[1:]]
        if len(ids) != len(set(ids)):
            raise GeometryError(f"duplicate primitive ids in scene: {ids}")

    def surfaces(self) -> list:
        """Label-ordered surfaces (None where the table is absent)."""
        out = [self.table, *self.objects]
        if self.effector is not None:
            out.append(self.effector)
        return out

    @property
    def target(self) -> Primitive:
        for o in self.objects:
            if o.id == self.target_id:
                return o
        raise GeometryError(f"target {self.target_id!r} not in scene")

    def with_effector_at(self, position) -> Scene:
        return replace(self, effector=self.effector.moved_to(position))


@dataclass(frozen=True)
class SceneConfig:
    table_half_extents: tuple = (0.6, 0.4)
    min_objects: int = 2
    max_objects: int = 4
    object_size: tuple = (0.03, 0.07)
    effector_radius: float = 0.05
    effector_height: tuple = (0.25, 0.4)
    # minimum horizontal distance from the effector start to its target
    min_travel: float = 0.45
    # fixed landmark standing in for the robot base
    base_position: tuple = (-0.45, 0.25)
    base_size: tuple = (0.06, 0.08)


def random_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Tabletop with a fixed base cylinder, random objects and an effector
    hovering above the table. ``objects[1]`` is the effector's target."""
    rng = np.random.default_rng(seed)
    hx, hy = config.table_half_extents
    r_base, h_base = config.base_size
    objects = [Primitive(PrimitiveKind.CYLINDER,
                         Sim3Transform(translation=(*config.base_position, h_base)),
                         (r_base, h_base), "base")]
    taken = [(np.asarray(config.base_position), r_base)]
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    kinds = list(PrimitiveKind)
    for i in range(n):
        kind = kinds[int(rng.integers(len(kinds)))]
        s = rng.uniform(*config.object_size)
        for _ in range(100):
            xy = rng.uniform((-hx + 0.1, -hy + 0.1), (hx - 0.1, hy - 0.1))
            if all(np.linalg.norm(xy - c) > s + r + 0.03 for c, r in taken):
                break
        taken.append((xy, s))
        yaw = rng.uniform(-np.pi, np.pi)
        if kind is PrimitiveKind.SPHERE:
            size, z = (s,), s
        elif kind is PrimitiveKind.BOX:
            size = (s, s * rng.uniform(0.6, 1.0), s * rng.uniform(0.6, 1.0))
            z = size[2]
        else:
            size = (s * 0.8, s)
            z = s
        pose = Sim3Transform.from_matrix(Rotation.from_euler("z", yaw).as_matrix(), (*xy, z))
        objects.append(Primitive(kind, pose, size, f"obj{i}"))
    target = objects[1].pose.translation[:2]
    best, best_d = None, -1.0
    for _ in range(100):
        xy = rng.uniform((-hx + 0.1, -hy + 0.1), (hx - 0.1, hy - 0.1))
        d = float(np.linalg.norm(xy - target))
        if d > best_d:
            best, best_d = xy, d
        if d >= config.min_travel:
            break
    start = (*best, rng.uniform(*config.effector_height))
    effector = Primitive(PrimitiveKind.SPHERE, Sim3Transform(translation=start),
                         (config.effector_radius,), "effector")
    return Scene(Table(0.0, (0.0, 0.0), (hx, hy)), tuple(objects), effector, "obj0")


def render_depth(scene: Scene, cam: CameraModel) -> DepthImage:
    """Ray-cast every pixel center; depth is the camera-frame z of the
    nearest hit, 0 (the invalid marker) where nothing is hit."""
    dirs_cam = cam.pixel_rays()
    dirs = dirs_cam @ cam.pose.matrix.T
    origin = cam.center
    best = np.full(len(dirs), np.inf)
    labels = np.full(len(dirs), -1, dtype=np.int32)
    for label, surf in enumerate(scene.surfaces()):
        if surf is None:
            continue
        t = surf.intersect(origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        labels[closer] = label
    depth = np.where(np.isfinite(best), best, 0.0).reshape(cam.height, cam.width)
    return DepthImage(depth, 0.0, labels.reshape(cam.height, cam.width))


def surface_residuals(scene: Scene, cam: CameraModel, depth: DepthImage) -> np.ndarray:
    """Distance of every unprojected valid pixel to the surface that the
    label image says it came from."""
    cloud, (vv, uu) = unproject_depth(depth, cam, return_pixels=True)
    world = cam.pose.apply_points(cloud.points)
    labels = depth.labels[vv, uu]
    res = np.empty(len(world))
    for label, surf in enumerate(scene.surfaces()):
        sel = labels == label
        if sel.any():
            res[sel] = surf.surface_distance(world[sel])
    return res


@dataclass(frozen=True, eq=False)
class CameraSamplingRange:
    """Orbit ranges (degrees, +/-) around the reference camera's look-at
    ``target``; ``distance_scale`` multiplies the camera-target distance."""

    reference: CameraModel
    target: tuple = (0.0, 0.0, 0.05)
    yaw_range: float = 70.0
    pitch_range: float = 7.5
    distance_scale: tuple = (0.9, 1.1)

    def __post_init__(self):
        lo, hi = self.distance_scale
        if not 0 < lo <= hi:
            raise GeometryError("distance_scale must satisfy 0 < lo <= hi")
        if self.yaw_range < 0 or self.pitch_range < 0:
            raise GeometryError("angle ranges must be non-negative")


def default_reference_camera(width=240, height=240, distance=1.0, elevation_deg=40.0,
                             target=(0.0, 0.0, 0.05), fov_deg=60.0) -> CameraModel:
    """Camera on the -x side of the table looking down at ``target``."""
    el = np.radians(elevation_deg)
    eye = np.asarray(target) + distance * np.array([-np.cos(el), 0.0, np.sin(el)])
    return CameraModel.from_fov(width, height, fov_deg, look_at_pose(eye, target))


def default_sampling(**kw) -> CameraSamplingRange:
    return CameraSamplingRange(reference=default_reference_camera(**kw))


def orbit_camera(ref: CameraModel, target, yaw_deg=0.0, pitch_deg=0.0, scale=1.0) -> CameraModel:
    """Rotate the reference pose about the vertical axis through ``target``
    by ``yaw_deg``, then about the camera's horizontal right axis through
    ``target`` by ``pitch_deg`` (positive raises the camera), then scale the
    camera-target distance."""
    target = np.asarray(target, dtype=np.float64)
    R0 = ref.pose.matrix
    right = R0[:, 0]
    R_yaw = Rotation.from_rotvec(np.radians(yaw_deg) * np.array([0.0, 0.0, 1.0])).as_matrix()
    right_yawed = R_yaw @ right
    R_pitch = Rotation.from_rotvec(np.radians(pitch_deg) * right_yawed).as_matrix()
    R = R_pitch @ R_yaw
    eye = target + scale * (R @ (ref.center - target))
    pose = Sim3Transform.from_matrix(R @ R0, eye)
    return ref.with_pose(pose)


def sample_camera(rng_range: CameraSamplingRange, rng) -> tuple:
    """Draw a random orbit camera. Returns ``(camera, (yaw, pitch, scale))``."""
    rng = np.random.default_rng(rng)
    yaw = float(rng.uniform(-rng_range.yaw_range, rng_range.yaw_range))
    pitch = float(rng.uniform(-rng_range.pitch_range, rng_range.pitch_range))
    scale = float(rng.uniform(*rng_range.distance_scale))
    if yaw == 0 and pitch == 0 and scale == 1:
        return rng_range.reference, (yaw, pitch, scale)
    return (orbit_camera(rng_range.reference, rng_range.target, yaw, pitch, scale),
            (yaw, pitch, scale))


# -- batch rendering --------------------------------------------------------

@dataclass(frozen=True)
class ThroughputReport:
    """Throughput accounting: ``total_fps = environments * fps_env``.

    One environment frame consists of ``cameras`` renders.
    """

    workers: int
    jobs: int
    resolution: tuple
    environments: int
    cameras: int
    steps: int
    elapsed_s: float
    fps_env: float
    total_fps: float
    renders_per_s: float

    @classmethod
    def from_timing(cls, workers, jobs, resolution, environments, cameras, elapsed):
        steps = jobs // max(1, environments * cameras)
        fps_env = steps / elapsed
        return cls(workers, jobs, tuple(resolution), environments, cameras, steps,
                   elapsed, fps_env, environments * fps_env, jobs / elapsed)

    def identity_holds(self, rel=1e-12) -> bool:
        return abs(self.total_fps - self.environments * self.fps_env) <= rel * self.total_fps

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["resolution"] = list(self.resolution)
        d["identity_T_eq_K_x_fps_env"] = self.identity_holds()
        return d


def _render_job(job):
    return render_depth(*job)


def default_workers() -> int:
    n = os.cpu_count() or 1
    cap = os.environ.get("VIDPOINT_THREADS")
    return max(1, min(n, int(cap))) if cap else n


def render_batch(jobs, workers: int = 1, cameras_per_env: int = 2):
    """Render ``(scene, camera)`` jobs, in order, on a process pool.

    Returns ``(images, report)``. Results are identical to serial
    rendering for any worker count.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    jobs = list(jobs)
    t0 = time.perf_counter()
    if workers == 1:
        images = [_render_job(j) for j in jobs]
    else:
        chunk = max(1, len(jobs) // (4 * workers))
        with ProcessPoolExecutor(workers) as pool:
            images = list(pool.map(_render_job, jobs, chunksize=chunk))
    elapsed = time.perf_counter() - t0
    res = (jobs[0][1].width, jobs[0][1].height) if jobs else (0, 0)
    envs = max(1, len(jobs) // cameras_per_env)
    report = ThroughputReport.from_timing(workers, len(jobs), res, envs,
                                          cameras_per_env, max(elapsed, 1e-12))
    return images, report


# -- episodes and triplets ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class Frame:
    timestep: int
    scene: Scene
    ref_cloud: PointCloud
    rand_cloud: PointCloud
    rand_camera: CameraModel
    rand_view: tuple  # (yaw_deg, pitch_deg, distance_scale)


@dataclass(frozen=True, eq=False)
class Episode:
    frames: tuple
    seed: int
    ref_camera: CameraModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        steps = [f.timestep for f in self.frames]
        if steps and (steps[0] != 0 or any(b <= a for a, b in zip(steps, steps[1:]))):
            raise GeometryError("episode timesteps must increase strictly from 0")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True, eq=False)
class Triplet:
    """``p_org`` (random camera frame), ``p_world`` (same points, world
    frame, index-aligned) and ``p_ref`` (reference camera, world frame).
    ``extrinsics`` maps ``p_org`` onto ``p_world``."""

    p_org: PointCloud
    p_world: PointCloud
    p_ref: PointCloud
    extrinsics: Sim3Transform = field(default_factory=Sim3Transform)

    def __post_init__(self):
        if len(self.p_org) != len(self.p_world):
            raise GeometryError("p_org and p_world must be index-aligned")


def _subsample(cloud: PointCloud, n, rng):
    if n is None or len(cloud) <= n:
        return cloud, np.arange(len(cloud))
    idx = np.sort(rng.choice(len(cloud), n, replace=False))
    return cloud.subset(idx), idx


def effector_path(start, goal, length: int, seed: int) -> np.ndarray:
    """Smooth seeded path ``(length, 3)`` from ``start`` to ``goal``.

    Constant-speed progress along the segment plus a sideways bump that
    vanishes at both ends; the bump is bounded so the distance to ``goal``
    shrinks overall. Equal steps keep consecutive frames distinguishable.
    """
    rng = np.random.default_rng(seed)
    start, goal = np.asarray(start, float), np.asarray(goal, float)
    s = np.linspace(0.0, 1.0, length)
    span = goal - start
    side = np.cross(span, [0.0, 0.0, 1.0])
    if np.linalg.norm(side) < 1e-9:
        side = np.array([1.0, 0.0, 0.0])
    side /= np.linalg.norm(side)
    amp = rng.uniform(-0.25, 0.25) * np.linalg.norm(span)
    return start + s[:, None] * span + (amp * np.sin(np.pi * s))[:, None] * side


def _goal_above(target: Primitive, effector: Primitive) -> np.ndarray:
    # half height above the center: sphere radius, box z half-extent, cylinder half height
    top = target.size[{PrimitiveKind.SPHERE: 0, PrimitiveKind.BOX: 2,
                       PrimitiveKind.CYLINDER: 1}[target.kind]]
    hover = top + effector.size[0] + 0.01
    start = effector.position
    d0 = np.linalg.norm(start - target.position)
    if d0 <= hover:
        return target.position + 0.5 * (start - target.position)
    return target.position + np.array([0.0, 0.0, hover])


def scripted_episode(scene: Scene, length: int, seed: int,
                     sampling: CameraSamplingRange | None = None,
                     cloud_points: int | None = None) -> Episode:
    """Move the effector toward the target; at each step render the
    reference camera and a freshly sampled random camera.

    ``cloud_points`` caps each camera-frame cloud by seeded uniform
    subsampling.
    """
    if length < 2:
        raise ValueError("episodes need at least 2 timesteps")
    sampling = sampling or default_sampling()
    rng = np.random.default_rng(seed)
    path = effector_path(scene.effector.position, _goal_above(scene.target, scene.effector),
                         length, int(rng.integers(2**31)))
    ref = sampling.reference
    frames = []
    for t in range(length):
        snap = scene.with_effector_at(path[t])
        cam, view = sample_camera(sampling, rng)
        ref_cloud, _ = _subsample(unproject_depth(render_depth(snap, ref), ref), cloud_points, rng)
        rand_cloud, _ = _subsample(unproject_depth(render_depth(snap, cam), cam), cloud_points, rng)
        frames.append(Frame(t, snap, ref_cloud, rand_cloud, cam, view))
    return Episode(tuple(frames), seed, ref)


def make_triplet(scene: Scene, ref_cam: CameraModel, rand_cam: CameraModel,
                 cloud_points: int | None = None, seed: int = 0) -> Triplet:
    rng = np.random.default_rng(seed)
    p_org, _ = _subsample(unproject_depth(render_depth(scene, rand_cam), rand_cam),
                          cloud_points, rng)
    p_world = p_org.with_points(rand_cam.pose.apply_points(p_org.points), FrameTag.WORLD)
    ref_cloud, _ = _subsample(unproject_depth(render_depth(scene, ref_cam), ref_cam),
                              cloud_points, rng)
    p_ref = PointCloud(ref_cam.pose.apply_points(ref_cloud.points), frame_tag=FrameTag.WORLD)
    return Triplet(p_org, p_world, p_ref, rand_cam.pose)
