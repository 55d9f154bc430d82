"""Pinhole cameras, epipolar geometry, metric scale recovery and triangulation.

World units are millimetres, image units are pixels. Rotations map world
coordinates into the camera frame, i.e. ``x_cam = R @ (X - C)``.
"""
from dataclasses import dataclass, field

import numpy as np

from ._seeding import derive_rng
from ._validation import as_points, as_vector, check_rotation
from .exceptions import (
    BehindCameraError,
    CoincidentCentersError,
    DegenerateLineError,
    DegeneratePairError,
    InsufficientGeometryError,
    NoConsistentTriangulationError,
)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray
    rotation: np.ndarray
    center: np.ndarray
    image_size: tuple
    camera_id: str = ""

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=float)
        if K.shape != (3, 3):
            raise ValueError("intrinsics must be 3x3")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(K[0, 1]) > 0 or np.any(K[1:, 0] != 0) or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("intrinsics must be upper triangular with zero skew and K[2,2] = 1")
        R = check_rotation(self.rotation)
        C = as_vector(self.center, 3, "center")
        w, h = self.image_size
        if not (w > 0 and h > 0):
            raise ValueError("image_size must be positive")
        object.__setattr__(self, "intrinsics", _frozen(K))
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "center", _frozen(C))
        object.__setattr__(self, "image_size", (float(w), float(h)))

    @classmethod
    def from_parameters(cls, fx, fy, cx, cy, rotation, center, width, height, camera_id=""):
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, rotation, center, (width, height), str(camera_id))

    @classmethod
    def look_at(cls, center, target, fx, width, height, fy=None, up=(0.0, 0.0, 1.0), camera_id=""):
        """Camera at ``center`` whose optical axis points at ``target``."""
        center = as_vector(center, 3, "center")
        z = as_vector(target, 3, "target") - center
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=float)
        if abs(np.dot(up, z)) > 1 - 1e-9:
            up = np.array([0.0, 1.0, 0.0])
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.vstack([x, y, z])
        fy = fx if fy is None else fy
        return cls.from_parameters(fx, fy, width / 2.0, height / 2.0, R, center, width, height, camera_id)

    @property
    def projection_matrix(self):
        return self.intrinsics @ np.hstack([self.rotation, -(self.rotation @ self.center)[:, None]])

    def depth(self, points):
        """Depth of world points along the optical axis."""
        points = as_points(points)
        return (points - self.center) @ self.rotation[2]

    def project_many(self, points):
        """Project an (n, 3) array; returns (pixels (n, 2), depth (n,))."""
        points = as_points(points)
        cam = (points - self.center) @ self.rotation.T
        depth = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = cam[:, :2] / depth[:, None]
        K = self.intrinsics
        px = np.column_stack([K[0, 0] * uv[:, 0] + K[0, 2], K[1, 1] * uv[:, 1] + K[1, 2]])
        return px, depth


@dataclass(frozen=True)
class BoundingBox:
    image_id: str
    min_x: float
    min_y: float
    max_x: float
    max_y: float
    detection_id: str = ""

    def __post_init__(self):
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise ValueError(
                f"box {self.detection_id!r} must satisfy min < max, got "
                f"({self.min_x}, {self.min_y}, {self.max_x}, {self.max_y})"
            )

    @property
    def corners(self):
        return np.array([
            [self.min_x, self.min_y],
            [self.max_x, self.min_y],
            [self.max_x, self.max_y],
            [self.min_x, self.max_y],
        ])

    @property
    def bounds(self):
        return np.array([self.min_x, self.min_y, self.max_x, self.max_y])

    def contains(self, pixels):
        p = np.atleast_2d(np.asarray(pixels, dtype=float))
        return (
            (p[:, 0] >= self.min_x) & (p[:, 0] <= self.max_x)
            & (p[:, 1] >= self.min_y) & (p[:, 1] <= self.max_y)
        )

    def clamped(self, image_size):
        w, h = image_size
        return BoundingBox(
            self.image_id,
            float(np.clip(self.min_x, 0, w)),
            float(np.clip(self.min_y, 0, h)),
            float(np.clip(self.max_x, 0, w)),
            float(np.clip(self.max_y, 0, h)),
            self.detection_id,
        )


@dataclass(frozen=True)
class HomogeneousLine:
    """Line ``l1 * x + l2 * y + l3 = 0`` in pixel coordinates."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = as_vector(self.coefficients, 3, "coefficients")
        if c[0] == 0 and c[1] == 0:
            raise DegenerateLineError("line has (l1, l2) = (0, 0)")
        object.__setattr__(self, "coefficients", _frozen(c))

    def signed_distance(self, pixels):
        p = np.atleast_2d(np.asarray(pixels, dtype=float))
        l1, l2, l3 = self.coefficients
        return (l1 * p[:, 0] + l2 * p[:, 1] + l3) / np.hypot(l1, l2)


@dataclass(frozen=True)
class ScaleEstimate:
    scale: float
    per_pair_ratios: np.ndarray
    pair_count: int


@dataclass(frozen=True)
class WeightedCenter:
    center: np.ndarray
    point_weights: np.ndarray
    camera_distances: np.ndarray
    candidates: np.ndarray = field(default=None, repr=False)


def project(camera, point):
    """Project one world point (mm) to pixel coordinates."""
    point = as_vector(point, 3, "point")
    px, depth = camera.project_many(point[None, :])
    if not depth[0] > 0:
        raise BehindCameraError(f"point {point} is at or behind the camera plane (depth {depth[0]:.3g})")
    return px[0]


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def fundamental_matrix(cam_i, cam_j):
    """Fundamental matrix mapping view-i pixels to epipolar lines in view j.

    Satisfies ``x_j^T F x_i = 0`` for corresponding homogeneous pixels.
    """
    baseline = cam_j.center - cam_i.center
    if np.linalg.norm(baseline) <= 1e-12 * max(1.0, np.linalg.norm(cam_i.center)):
        raise DegeneratePairError("cameras share the same center")
    R = cam_j.rotation @ cam_i.rotation.T
    t = cam_j.rotation @ (cam_i.center - cam_j.center)
    E = skew(t) @ R
    F = np.linalg.inv(cam_j.intrinsics).T @ E @ np.linalg.inv(cam_i.intrinsics)
    return F / np.linalg.norm(F)


def epipolar_lines(F, pixels):
    """Vectorised epipolar lines for an (n, 2) pixel array; rows normalised.

    Rows whose direction part vanishes are returned as NaN.
    """
    F = np.asarray(F, dtype=float)
    p = np.atleast_2d(np.asarray(pixels, dtype=float))
    ph = np.column_stack([p, np.ones(len(p))])
    lines = ph @ F.T
    norm = np.hypot(lines[:, 0], lines[:, 1])
    bad = norm <= 1e-10 * np.linalg.norm(F) * np.linalg.norm(ph, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lines = lines / norm[:, None]
    lines[bad] = np.nan
    return lines


def epipolar_line(F, p):
    line = epipolar_lines(F, as_vector(p, 2, "pixel")[None, :])[0]
    if np.isnan(line[0]):
        raise DegenerateLineError(f"pixel {p} is the epipole; epipolar line is undefined")
    return HomogeneousLine(line)


def lines_intersect_boxes(lines, bounds):
    """Boolean (n_lines, n_boxes) intersection table.

    ``bounds`` is an (n_boxes, 4) array of (min_x, min_y, max_x, max_y). The
    line meets the closed rectangle iff the extreme values of ``l.x`` over the
    four corners bracket zero. NaN lines never intersect.
    """
    lines = np.atleast_2d(np.asarray(lines, dtype=float))
    b = np.atleast_2d(np.asarray(bounds, dtype=float))
    l1, l2, l3 = lines[:, 0:1], lines[:, 1:2], lines[:, 2:3]
    ax, bx = l1 * b[None, :, 0], l1 * b[None, :, 2]
    ay, by = l2 * b[None, :, 1], l2 * b[None, :, 3]
    lo = np.minimum(ax, bx) + np.minimum(ay, by) + l3
    hi = np.maximum(ax, bx) + np.maximum(ay, by) + l3
    return (lo <= 0.0) & (hi >= 0.0)


def line_intersects_box(line, box):
    """True iff the infinite line passes through the closed box."""
    c = line.coefficients
    s = box.corners @ c[:2] + c[2]
    return not (np.all(s > 0) or np.all(s < 0))


def _pairwise_distances(points):
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def estimate_scale(centers_sfm, centers_fip):
    """Average ratio of metric to SfM inter-camera distances over ordered pairs."""
    sfm = as_points(centers_sfm, "centers_sfm")
    fip = as_points(centers_fip, "centers_fip")
    if len(sfm) != len(fip):
        raise ValueError("center lists must have equal length")
    m = len(sfm)
    if m < 2:
        raise ValueError("at least two cameras are required")
    d_sfm = _pairwise_distances(sfm)
    d_fip = _pairwise_distances(fip)
    off = ~np.eye(m, dtype=bool)
    if np.any(d_sfm[off] == 0):
        raise CoincidentCentersError("two SfM camera centers coincide")
    ratios = d_fip[off] / d_sfm[off]
    return ScaleEstimate(float(np.mean(ratios)), ratios, int(m * (m - 1)))


def apply_scale(centers_sfm, s):
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    return as_points(centers_sfm, "centers_sfm") * float(s)


def triangulate(cameras, pixels):
    """Linear (DLT) triangulation from two or more calibrated views.

    Pixels are mapped to normalised image coordinates and the world frame is
    centred on the mean camera center before the SVD, which keeps the system
    well conditioned at millimetre scales.
    """
    cameras = list(cameras)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(cameras) < 2 or len(pixels) != len(cameras):
        raise InsufficientGeometryError("triangulation needs >= 2 views with one pixel each")
    origin = np.mean([c.center for c in cameras], axis=0)
    spread = np.mean([np.linalg.norm(c.center - origin) for c in cameras])
    scale = spread if spread > 0 else 1.0
    rows = []
    for cam, p in zip(cameras, pixels):
        K = cam.intrinsics
        x = (p[0] - K[0, 2]) / K[0, 0]
        y = (p[1] - K[1, 2]) / K[1, 1]
        # camera matrix in the conditioned world frame: R [I | (origin - C)/scale]
        P = np.hstack([cam.rotation, (cam.rotation @ (origin - cam.center) / scale)[:, None]])
        r1 = x * P[2] - P[0]
        r2 = y * P[2] - P[1]
        rows.append(r1 / np.linalg.norm(r1))
        rows.append(r2 / np.linalg.norm(r2))
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    if s[2] <= 1e-10 * s[0]:
        raise InsufficientGeometryError("triangulation system is rank deficient")
    X = vt[-1]
    if abs(X[3]) <= 1e-14 * np.linalg.norm(X):
        raise InsufficientGeometryError("triangulated point is at infinity")
    return origin + scale * X[:3] / X[3]


def sample_in_box(box, k, rng):
    u = rng.random((k, 2))
    x = box.min_x + u[:, 0] * (box.max_x - box.min_x)
    y = box.min_y + u[:, 1] * (box.max_y - box.min_y)
    return np.column_stack([x, y])


def reprojection_consistency(cameras, boxes, point):
    """Fraction of views in which ``point`` projects inside its box."""
    inside = 0
    for cam, box in zip(cameras, boxes):
        px, depth = cam.project_many(point[None, :])
        if depth[0] > 0 and box.contains(px)[0]:
            inside += 1
    return inside / len(cameras)


def weighted_spike_center(cameras, boxes, k=100, rng_seed=0):
    """Consistency-weighted mean of ``k`` triangulations from in-box samples.

    Each candidate is triangulated from all views (one random pixel per box).
    """
    cameras = list(cameras)
    boxes = list(boxes)
    if len(cameras) != len(boxes):
        raise ValueError("need exactly one box per camera")
    if len(cameras) < 2:
        raise InsufficientGeometryError("a spike center needs at least two views")
    rng = derive_rng(rng_seed, "weighted_spike_center")
    candidates = np.empty((k, 3))
    weights = np.zeros(k)
    for r in range(k):
        pix = np.array([sample_in_box(b, 1, rng)[0] for b in boxes])
        try:
            X = triangulate(cameras, pix)
        except InsufficientGeometryError:
            candidates[r] = np.nan
            continue
        candidates[r] = X
        weights[r] = reprojection_consistency(cameras, boxes, X)
    if weights.sum() <= 0:
        raise NoConsistentTriangulationError("no candidate reprojects inside any box")
    ok = weights > 0
    center = (weights[ok, None] * candidates[ok]).sum(axis=0) / weights[ok].sum()
    distances = np.array([np.linalg.norm(center - c.center) for c in cameras])
    return WeightedCenter(center, weights, distances, candidates)
