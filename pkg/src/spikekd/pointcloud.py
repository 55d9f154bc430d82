"""Point-cloud preprocessing and rigid-invariant distance-histogram features.

Each point is described by the histogram of its Euclidean distances to all
other points of the cloud: ``k`` uniform bins on ``[0, w)`` plus one
overflow bin for distances ``>= w``, divided by the cloud size. Only
pairwise distances enter, so the descriptor is unchanged by any rotation or
translation of the cloud.
"""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin

from ._seeding import derive_rng, hash64
from ._validation import as_points, as_vector


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "points", as_points(self.points))

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class HistogramFeatures:
    per_point: np.ndarray
    bin_count: int
    range_width: float


def _points(pc):
    return pc.points if isinstance(pc, PointCloud) else as_points(pc)


def _like(pc, points):
    source = pc.source if isinstance(pc, PointCloud) else "synthetic"
    return PointCloud(points, source)


def voxel_downsample(pc, voxel_size=2.0):
    """Replace the points of every occupied voxel by their centroid.

    Output points are ordered by voxel index.
    """
    pts = _points(pc)
    if len(pts) == 0:
        raise ValueError("cannot voxelize an empty cloud")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    keys = np.floor(pts / voxel_size).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    # one integer per voxel, ordered like the (x, y, z) index tuples
    flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    _, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return _like(pc, sums / counts[:, None])


def subsample(pc, n=1000, rng_seed=0):
    """Uniform subset of ``n`` points without replacement; order preserved."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = _points(pc)
    if len(pts) <= n:
        return _like(pc, pts.copy())
    rng = derive_rng(rng_seed, "subsample")
    idx = np.sort(rng.choice(len(pts), size=n, replace=False))
    return _like(pc, pts[idx])


def sample_ellipsoid_surface(spike, n=30000, rng_seed=0):
    """Area-uniform surface samples of an ellipsoidal spike.

    Uniform directions on the unit sphere are stretched onto the ellipsoid
    and accepted with probability proportional to the local area stretch.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    axes = np.asarray(spike.semi_axes, dtype=float)
    rng = derive_rng(rng_seed, "ellipsoid_surface")
    accepted = []
    total = 0
    g_max = 1.0 / axes.min()
    while total < n:
        m = max(64, int(1.3 * (n - total)) + 16)
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = np.sqrt(np.sum((u / axes) ** 2, axis=1))
        keep = rng.random(m) * g_max < g
        accepted.append(u[keep] * axes)
        total += int(keep.sum())
    local = np.vstack(accepted)[:n]
    return PointCloud(local @ np.asarray(spike.orientation).T + spike.center, "synthetic")


def simulate_partial(pc, view_direction, keep_fraction):
    """Keep the ``keep_fraction`` of points furthest along ``view_direction``."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    pts = _points(pc)
    d = as_vector(view_direction, 3, "view_direction")
    d = d / np.linalg.norm(d)
    n_keep = max(1, int(round(keep_fraction * len(pts))))
    if n_keep >= len(pts):
        return _like(pc, pts.copy())
    order = np.argsort(-(pts @ d), kind="stable")
    idx = np.sort(order[:n_keep])
    return _like(pc, pts[idx])


_BLOCK_ELEMENTS = 1 << 16


def distance_histograms(pc, k, w=60.0):
    """Per-point histograms of distances to all other points.

    Bins are half-open ``[i w/k, (i+1) w/k)``; distances ``>= w`` land in the
    overflow bin ``k``. The point's zero distance to itself is not counted,
    and counts are divided by the number of points, so every row sums to
    ``(n - 1) / n``.
    """
    pts = _points(pc)
    n = len(pts)
    if n < 2:
        raise ValueError("distance histograms need at least two points")
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = np.empty((n, k + 1), dtype=np.int64)
    # row blocks keep the working set in cache, so cost stays quadratic in n
    step = max(1, _BLOCK_ELEMENTS // n)
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        d = cdist(pts[lo:hi], pts)
        bins = np.where(d < w, np.floor(d * (k / w)), k).astype(np.int64)
        np.minimum(bins, k, out=bins)
        bins += (k + 1) * np.arange(hi - lo)[:, None]
        counts[lo:hi] = np.bincount(bins.ravel(), minlength=(hi - lo) * (k + 1)).reshape(-1, k + 1)
    counts[:, 0] -= 1
    return HistogramFeatures(counts / n, k, float(w))


def rigid_transform(pc, rotation, translation):
    R = np.asarray(rotation, dtype=float)
    if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
        raise ValueError("rotation must be orthonormal")
    if np.linalg.det(R) <= 0:
        raise ValueError("rotation must have determinant +1")
    t = as_vector(translation, 3, "translation")
    return _like(pc, _points(pc) @ R.T + t)


def prepare_cloud(points, voxel_size=2.0, n_points=1000, rng_seed=0):
    """Voxelize then subsample, the normalisation applied before featurizing."""
    return subsample(voxel_downsample(points, voxel_size), n_points, rng_seed)


class DistanceHistogramTransformer(BaseEstimator, TransformerMixin):
    """Turn raw clouds into per-point distance histograms.

    Parameters
    ----------
    bins : int
        Number of uniform bins below ``width``; one overflow bin is added.
    width : float
        Distance range in mm covered by the uniform bins.
    voxel_size : float or None
        Voxel edge for downsampling; ``None`` skips voxelization.
    n_points : int or None
        Subsample size after voxelization; ``None`` keeps every point.
    random_state : int
        Seed for subsampling.
    """

    def __init__(self, bins=30, width=60.0, voxel_size=2.0, n_points=1000, random_state=0):
        self.bins = bins
        self.width = width
        self.voxel_size = voxel_size
        self.n_points = n_points
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.n_features_out_ = self.bins + 1
        return self

    def _prepare(self, cloud, i):
        pc = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
        if self.voxel_size is not None:
            pc = voxel_downsample(pc, self.voxel_size)
        if self.n_points is not None:
            pc = subsample(pc, self.n_points, rng_seed=hash64(self.random_state, "cloud", i))
        return pc

    def transform(self, X):
        """Return a list with one ``(n_points_i, bins + 1)`` array per cloud."""
        return [distance_histograms(self._prepare(c, i), self.bins, self.width).per_point
                for i, c in enumerate(X)]
