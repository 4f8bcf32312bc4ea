"""Core geometric types and kernels.

Conventions used throughout the package:

* points are ``(K, 3)`` float64 arrays in meters;
* quaternions are stored scalar-first ``(w, x, y, z)`` with ``w >= 0``;
* cameras follow the OpenCV convention (x right, y down, z forward) and
  their pose maps camera coordinates into the world frame;
* similarity transforms act as ``p' = scale * R @ p + translation``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import GeometryError, ShapeError

# above this many pairwise distances the k-d tree beats brute force
_BRUTE_FORCE_PAIRS = 1 << 20


class FrameTag(str, enum.Enum):
    CAMERA = "camera"
    WORLD = "world"
    NORMALIZED = "normalized"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """K points with optional per-point channels, tagged with their frame."""

    points: np.ndarray
    channels: np.ndarray | None = None
    frame_tag: FrameTag = FrameTag.CAMERA

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"points must be (K, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.channels is not None:
            ch = np.asarray(self.channels, dtype=np.float64)
            if ch.ndim == 1:
                ch = ch[:, None]
            if ch.shape[0] != pts.shape[0]:
                raise ShapeError(
                    f"channels has {ch.shape[0]} rows for {pts.shape[0]} points")
            object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "frame_tag", FrameTag(self.frame_tag))

    def __len__(self):
        return self.points.shape[0]

    def subset(self, indices) -> PointCloud:
        ch = None if self.channels is None else self.channels[indices]
        return PointCloud(self.points[indices], ch, self.frame_tag)

    def with_points(self, points, frame_tag=None) -> PointCloud:
        return PointCloud(points, self.channels,
                          self.frame_tag if frame_tag is None else frame_tag)


def _canonical_quat(q):
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0 else q


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """Similarity transform: unit quaternion rotation, translation, scale."""

    rotation: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise GeometryError(f"rotation quaternion is not unit: |q|={np.linalg.norm(q)}")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        s = float(self.scale)
        if not s > 0 or not np.isfinite(s):
            raise GeometryError(f"scale must be positive, got {s}")
        if not np.isfinite(t).all():
            raise GeometryError("translation must be finite")
        object.__setattr__(self, "rotation", _canonical_quat(q))
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> Sim3Transform:
        return cls()

    @classmethod
    def from_matrix(cls, rotation, translation=(0.0, 0.0, 0.0), scale=1.0):
        """Build from a 3x3 rotation matrix."""
        R = np.asarray(rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ShapeError(f"rotation matrix must be 3x3, got {R.shape}")
        q = Rotation.from_matrix(R).as_quat(scalar_first=True)
        return cls(q / np.linalg.norm(q), translation, scale)

    @cached_property
    def matrix(self) -> np.ndarray:
        """The 3x3 rotation matrix."""
        return Rotation.from_quat(self.rotation, scalar_first=True).as_matrix()

    def as_matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.matrix
        m[:3, 3] = self.translation
        return m

    def apply_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.matrix.T + self.translation

    def allclose(self, other: Sim3Transform, atol=1e-9) -> bool:
        return (np.allclose(self.matrix, other.matrix, atol=atol, rtol=0)
                and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
                and abs(self.scale - other.scale) <= atol)


def sim3_apply(t: Sim3Transform, cloud: PointCloud) -> PointCloud:
    """Warp every point by ``scale * R p + translation``; channels pass through."""
    return cloud.with_points(t.apply_points(cloud.points))


def sim3_compose(a: Sim3Transform, b: Sim3Transform) -> Sim3Transform:
    """Return the transform equivalent to applying ``b`` first, then ``a``."""
    ra = Rotation.from_quat(a.rotation, scalar_first=True)
    rb = Rotation.from_quat(b.rotation, scalar_first=True)
    q = (ra * rb).as_quat(scalar_first=True)
    t = a.scale * (a.matrix @ b.translation) + a.translation
    return Sim3Transform(q / np.linalg.norm(q), t, a.scale * b.scale)


def sim3_inverse(t: Sim3Transform) -> Sim3Transform:
    q = t.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    inv_s = 1.0 / t.scale
    return Sim3Transform(q, -inv_s * (t.matrix.T @ t.translation), inv_s)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera; ``pose`` maps camera coordinates to world (scale 1)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Sim3Transform = field(default_factory=Sim3Transform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")
        if abs(self.pose.scale - 1.0) > 1e-12:
            raise GeometryError("camera pose must be rigid (scale 1)")

    @classmethod
    def from_fov(cls, width=240, height=240, fov_deg=60.0, pose=None):
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height,
                   pose if pose is not None else Sim3Transform())

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics):
        return cls.from_fov(pose=look_at_pose(eye, target, up), **intrinsics)

    def with_pose(self, pose: Sim3Transform) -> CameraModel:
        return CameraModel(self.fx, self.fy, self.cx, self.cy,
                           self.width, self.height, pose)

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions ``(H*W, 3)`` with unit z, row-major.

        A ray parameter along these directions equals camera-frame depth.
        """
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        return np.stack([((uu - self.cx) / self.fx).ravel(),
                         ((vv - self.cy) / self.fy).ravel(),
                         np.ones(uu.size)], axis=1)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Sim3Transform:
    """World<-camera pose of a camera at ``eye`` with optical axis on ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise GeometryError("eye and target coincide")
    forward /= n
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise GeometryError("view direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Sim3Transform.from_matrix(np.stack([right, down, forward], axis=1), eye)


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Per-pixel camera-frame depth; ``invalid`` marks pixels with no hit.

    ``labels`` optionally records which scene surface produced each pixel
    (-1 for no hit).
    """

    values: np.ndarray
    invalid: float = 0.0
    labels: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def valid_mask(self) -> np.ndarray:
        v = self.values
        return np.isfinite(v) & (v != self.invalid) & (v > 0)


def unproject_depth(d: DepthImage, cam: CameraModel, return_pixels=False):
    """Lift valid depth pixels to a camera-frame cloud.

    Pixel ``(u, v)`` with depth ``z`` becomes ``((u-cx) z/fx, (v-cy) z/fy, z)``.
    With ``return_pixels`` also returns the ``(v, u)`` index arrays.
    """
    if d.values.shape != (cam.height, cam.width):
        raise ShapeError(
            f"depth image {d.values.shape} does not match camera "
            f"{(cam.height, cam.width)}")
    vv, uu = np.nonzero(d.valid_mask)
    z = d.values[vv, uu].astype(np.float64)
    pts = np.stack([(uu - cam.cx) * z / cam.fx, (vv - cam.cy) * z / cam.fy, z], axis=1)
    cloud = PointCloud(pts, frame_tag=FrameTag.CAMERA)
    if return_pixels:
        return cloud, (vv, uu)
    return cloud


def project_points(points, cam: CameraModel) -> np.ndarray:
    """Camera-frame points to ``(u, v, z)`` rows (pixel coordinates + depth)."""
    p = np.asarray(points, dtype=np.float64)
    z = p[:, 2]
    return np.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy, z], axis=1)


def _as_points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def nearest_neighbors(src, dst):
    """For each row of ``src``: index of and squared distance to its nearest
    row of ``dst``. Ties go to the lowest ``dst`` index in the brute-force path."""
    a, b = _as_points(src), _as_points(dst)
    if len(a) == 0 or len(b) == 0:
        raise GeometryError("nearest_neighbors needs non-empty inputs")
    if len(a) * len(b) <= _BRUTE_FORCE_PAIRS:
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        idx = d2.argmin(axis=1)
    else:
        _, idx = cKDTree(b).query(a)
    # recompute from coordinates so both paths agree to the last bit
    return idx, ((a - b[idx]) ** 2).sum(-1)


def chamfer_distance(a, b) -> float:
    """Mean squared nearest-neighbor distance, summed over both directions."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise GeometryError("chamfer distance is undefined for empty clouds")
    _, dab = nearest_neighbors(pa, pb)
    _, dba = nearest_neighbors(pb, pa)
    return float(dab.mean() + dba.mean())


def farthest_point_sampling(cloud, m: int, seed: int = 0, first_index=None):
    """Greedy max-min subset of ``m`` points.

    The first index is drawn uniformly with ``seed`` unless ``first_index``
    is given; ties go to the lowest index. Returns ``(subcloud, indices)``.
    """
    pts = _as_points(cloud)
    k = len(pts)
    if not 1 <= m <= k:
        raise GeometryError(f"cannot sample {m} of {k} points")
    if first_index is None:
        first_index = int(np.random.default_rng(seed).integers(k))
    idx = np.empty(m, dtype=np.int64)
    idx[0] = first_index
    dist = ((pts - pts[first_index]) ** 2).sum(1)
    dist[first_index] = -1.0
    for i in range(1, m):
        j = int(np.argmax(dist))
        idx[i] = j
        np.minimum(dist, ((pts - pts[j]) ** 2).sum(1), out=dist)
        # keeps exact duplicates selectable once distinct points are exhausted
        dist[idx[: i + 1]] = -1.0
    if isinstance(cloud, PointCloud):
        return cloud.subset(idx), idx
    return PointCloud(pts[idx]), idx


def rotation_from_6d(r) -> np.ndarray:
    """Gram-Schmidt two 3-vectors into a right-handed rotation (columns)."""
    r = np.asarray(r, dtype=np.float64).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-8:
        raise GeometryError("first 6D column is (near) zero")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < 1e-8:
        raise GeometryError("6D columns are (near) parallel")
    b2 = u2 / n2
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def rotation_from_6d_batch(r):
    """Vectorized ``rotation_from_6d`` over rows of ``(B, 6)``.

    Returns ``(R, cache)`` where ``cache`` feeds :func:`rotation_6d_backward`.
    """
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[:, :3], r[:, 3:]
    n1 = np.linalg.norm(a1, axis=1, keepdims=True)
    if (n1 < 1e-8).any():
        raise GeometryError("first 6D column is (near) zero")
    b1 = a1 / n1
    dot = (b1 * a2).sum(1, keepdims=True)
    u2 = a2 - dot * b1
    n2 = np.linalg.norm(u2, axis=1, keepdims=True)
    if (n2 < 1e-8).any():
        raise GeometryError("6D columns are (near) parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    R = np.stack([b1, b2, b3], axis=2)
    return R, (a2, n1, n2, b1, b2, dot)


def rotation_6d_backward(grad_R, cache):
    """Vector-Jacobian product of :func:`rotation_from_6d_batch`."""
    a2, n1, n2, b1, b2, dot = cache
    g1 = grad_R[:, :, 0].copy()
    g2 = grad_R[:, :, 1].copy()
    g3 = grad_R[:, :, 2]
    # b3 = b1 x b2
    g1 += np.cross(b2, g3)
    g2 += np.cross(g3, b1)
    # b2 = u2 / |u2|
    gu2 = (g2 - b2 * (b2 * g2).sum(1, keepdims=True)) / n2
    # u2 = a2 - (b1.a2) b1
    ga2 = gu2 - b1 * (b1 * gu2).sum(1, keepdims=True)
    g1 -= dot * gu2 + a2 * (b1 * gu2).sum(1, keepdims=True)
    # b1 = a1 / |a1|
    ga1 = (g1 - b1 * (b1 * g1).sum(1, keepdims=True)) / n1
    return np.concatenate([ga1, ga2], axis=1)
