"""Point-cloud preprocessing: workspace crop, RANSAC plane removal,
statistical outlier filtering, truncated min-max normalization and FPS,
plus the training-time augmentation suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import ConfigError, GeometryError, PipelineError
from .geometry import (FrameTag, PointCloud, Sim3Transform,
                       farthest_point_sampling, sim3_apply)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RansacParams:
    distance_threshold: float = 0.005
    iterations: int = 100
    min_inlier_fraction: float = 0.2


@dataclass(frozen=True)
class OutlierParams:
    k_neighbors: int = 16
    std_ratio: float = 2.0
    enabled: bool = True


@dataclass(frozen=True)
class NormalizeParams:
    lo_percentile: float = 1.0
    hi_percentile: float = 99.0


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for :func:`run_pipeline`.

    ``crop_bounds`` is ``((xmin, ymin, zmin), (xmax, ymax, zmax))`` in the
    frame of the incoming cloud. The default is a camera-frame depth slab
    sized for the synthetic tabletop scenes. ``plane_repeats`` is the
    number of RANSAC planes removed per cloud.
    """

    crop_bounds: tuple = ((-1.5, -1.5, 0.05), (1.5, 1.5, 2.5))
    ransac: RansacParams = field(default_factory=RansacParams)
    outlier: OutlierParams = field(default_factory=OutlierParams)
    normalize: NormalizeParams = field(default_factory=NormalizeParams)
    target_points: int = 512
    seed: int = 0
    plane_repeats: int = 1

    def __post_init__(self):
        lo, hi = self.normalize.lo_percentile, self.normalize.hi_percentile
        if not 0 <= lo < hi <= 100:
            raise ConfigError(f"need 0 <= lo_percentile < hi_percentile <= 100, got {lo}, {hi}")
        if self.target_points < 1:
            raise ConfigError("target_points must be >= 1")
        if self.ransac.distance_threshold <= 0:
            raise ConfigError("ransac.distance_threshold must be > 0")
        _check_box(self.crop_bounds)


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for :func:`augment`; rotation in radians per axis."""

    rotation_range: tuple = (0.0, 0.0, 0.0)
    translation_range: tuple = (0.0, 0.0, 0.0)
    scale_range: tuple = (1.0, 1.0)
    dropout_rate: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("scale_range must satisfy 0 < lo <= hi")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True, eq=False)
class PlaneModel:
    """Plane ``normal . x = offset``."""

    normal: np.ndarray
    offset: float
    inlier_count: int = 0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise GeometryError("plane normal must be a unit vector")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def distances(self, points) -> np.ndarray:
        return np.abs(np.asarray(points) @ self.normal - self.offset)


@dataclass(frozen=True, eq=False)
class NormStats:
    lo: np.ndarray
    hi: np.ndarray
    degenerate: np.ndarray

    def invert(self, points) -> np.ndarray:
        """Map normalized coordinates back (exact for non-clamped points)."""
        span = np.where(self.degenerate, 0.0, self.hi - self.lo)
        return np.asarray(points) * span + self.lo


def _check_box(bounds):
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    if lo.shape != (3,) or hi.shape != (3,) or not (lo < hi).all():
        raise ConfigError(f"invalid crop box {bounds}")
    return lo, hi


def crop_workspace(cloud: PointCloud, bounds) -> PointCloud:
    """Keep points inside the closed axis-aligned box, in order."""
    lo, hi = _check_box(bounds)
    p = cloud.points
    return cloud.subset(np.all((p >= lo) & (p <= hi), axis=1))


def _orient(normal, offset):
    # deterministic sign: dominant component positive
    if normal[np.argmax(np.abs(normal))] < 0:
        return -normal, -offset
    return normal, offset


def fit_plane_lstsq(points):
    """Total-least-squares plane through ``points``: ``(normal, offset)``."""
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1] / np.linalg.norm(vt[-1])
    return _orient(n, float(n @ c))


def fit_plane_ransac(cloud: PointCloud, params: RansacParams = RansacParams(),
                     seed: int = 0) -> PlaneModel | None:
    """Seeded RANSAC plane fit with a final least-squares refit on inliers.

    Returns None when the best candidate explains less than
    ``min_inlier_fraction`` of the points.
    """
    pts = cloud.points
    k = len(pts)
    if k < 3:
        raise GeometryError(f"RANSAC needs at least 3 points, got {k}")
    rng = np.random.default_rng(seed)
    best_count, best = -1, None
    for _ in range(params.iterations):
        i, j, l = rng.choice(k, 3, replace=False)
        n = np.cross(pts[j] - pts[i], pts[l] - pts[i])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        count = int(np.count_nonzero(np.abs(pts @ n - n @ pts[i]) <= params.distance_threshold))
        if count > best_count:
            best_count, best = count, (n, float(n @ pts[i]))
    if best is None or best_count < params.min_inlier_fraction * k:
        return None
    n, d = best
    inliers = pts[np.abs(pts @ n - d) <= params.distance_threshold]
    n, d = fit_plane_lstsq(inliers)
    count = int(np.count_nonzero(np.abs(pts @ n - d) <= params.distance_threshold))
    return PlaneModel(n, d, count)


def remove_plane(cloud: PointCloud, plane: PlaneModel, distance_threshold: float) -> PointCloud:
    return cloud.subset(plane.distances(cloud.points) > distance_threshold)


def knn_mean_distances(points, k: int) -> np.ndarray:
    """Mean Euclidean distance from each point to its ``k`` nearest others."""
    d, _ = cKDTree(points).query(points, k=k + 1)
    # column 0 is the point itself (distance 0, also for exact duplicates)
    return d[:, 1:].mean(axis=1)


def statistical_outlier_filter(cloud: PointCloud, k_neighbors: int = 16,
                               std_ratio: float = 2.0) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mu + std_ratio * sigma."""
    if len(cloud) <= k_neighbors:
        raise GeometryError(
            f"outlier filter needs more than {k_neighbors} points, got {len(cloud)}")
    md = knn_mean_distances(cloud.points, k_neighbors)
    mu, sigma = md.mean(), md.std()
    # absorbs round-off when all mean distances are equal
    limit = mu + std_ratio * sigma + 1e-12 * max(1.0, mu)
    return cloud.subset(md <= limit)


def nearest_rank_percentile(values, pct: float) -> float:
    """Value at rank ceil(pct/100 * N) of the sorted data (rank >= 1)."""
    return float(np.percentile(values, pct, method="inverted_cdf"))


def truncated_minmax_normalize(cloud: PointCloud, lo_pct: float = 1.0, hi_pct: float = 99.0):
    """Clamp each axis to its [lo_pct, hi_pct] percentiles and map to [0, 1].

    Axes with (near) zero spread map to 0.5 and are flagged in the stats.
    """
    if len(cloud) < 2:
        raise GeometryError("normalization needs at least 2 points")
    p = cloud.points
    lo = np.array([nearest_rank_percentile(p[:, a], lo_pct) for a in range(3)])
    hi = np.array([nearest_rank_percentile(p[:, a], hi_pct) for a in range(3)])
    degenerate = (hi - lo) < 1e-9
    span = np.where(degenerate, 1.0, hi - lo)
    out = (np.clip(p, lo, hi) - lo) / span
    out[:, degenerate] = 0.5
    stats = NormStats(lo, hi, degenerate)
    return cloud.with_points(out, FrameTag.NORMALIZED), stats


def run_pipeline(cloud: PointCloud, config: PipelineConfig) -> PointCloud:
    """crop -> plane removal -> outlier filter -> normalize -> FPS/pad.

    The output always has exactly ``config.target_points`` points in
    [0, 1]^3. A stage that leaves the cloud unusable raises
    :class:`PipelineError` naming that stage.
    """
    seed = config.seed
    out = crop_workspace(cloud, config.crop_bounds)
    if len(out) == 0:
        raise PipelineError("crop", "no points inside the workspace bounds")

    for rep in range(config.plane_repeats):
        if len(out) < 3:
            break
        plane = fit_plane_ransac(out, config.ransac, seed + rep)
        if plane is None:
            break
        out = remove_plane(out, plane, config.ransac.distance_threshold)
    if len(out) == 0:
        raise PipelineError("plane", "plane removal left no points")

    if config.outlier.enabled and len(out) > config.outlier.k_neighbors:
        out = statistical_outlier_filter(out, config.outlier.k_neighbors,
                                         config.outlier.std_ratio)
    if len(out) < 2:
        raise PipelineError("normalize", f"only {len(out)} point(s) left to normalize")

    out, _ = truncated_minmax_normalize(out, config.normalize.lo_percentile,
                                        config.normalize.hi_percentile)
    n = config.target_points
    if len(out) >= n:
        out, _ = farthest_point_sampling(out, n, seed)
    else:
        rng = np.random.default_rng(seed)
        extra = rng.integers(len(out), size=n - len(out))
        out = out.subset(np.concatenate([np.arange(len(out)), extra]))
    return out


def augment(cloud: PointCloud, config: AugmentConfig, seed: int | None = None,
            return_indices=False):
    """Random similarity warp about the centroid, dropout with duplicate
    padding (K preserved), then Gaussian coordinate noise.

    With ``return_indices`` also returns, for each output point, the index
    of the input point it derives from.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    k = len(cloud)
    rot = np.asarray(config.rotation_range, float)
    trans = np.asarray(config.translation_range, float)
    angles = rng.uniform(-rot, rot)
    shift = rng.uniform(-trans, trans)
    s = rng.uniform(*config.scale_range)
    idx = np.arange(k)
    if k == 0:
        return (cloud, idx) if return_indices else cloud

    c = cloud.points.mean(axis=0)
    R = Rotation.from_euler("xyz", angles).as_matrix()
    warp = Sim3Transform.from_matrix(R, c + shift - s * (R @ c), s)
    out = sim3_apply(warp, cloud)

    if config.dropout_rate > 0:
        keep = rng.random(k) >= config.dropout_rate
        survivors = np.flatnonzero(keep)
        if len(survivors) == 0:
            survivors = np.array([rng.integers(k)])
        dropped = np.flatnonzero(~keep)
        idx = idx.copy()
        idx[dropped] = rng.choice(survivors, size=len(dropped))
        out = out.subset(idx)
    if config.noise_sigma > 0:
        out = out.with_points(out.points + rng.normal(0.0, config.noise_sigma, (k, 3)))
    return (out, idx) if return_indices else out
