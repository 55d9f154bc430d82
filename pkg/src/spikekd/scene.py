"""Synthetic multi-camera plots with ellipsoidal spikes, and pairing scores.

Spikes are ellipsoids; each camera sees a spike as the bounding box of the
projected ellipsoid outline (computed in closed form from the dual quadric),
with seeded detector jitter on every box edge, clamped to the image. No
occlusion is modelled.
"""
from dataclasses import dataclass, field
import itertools
import math

import numpy as np
from scipy.spatial.transform import Rotation

from ._seeding import derive_rng
from .camera import BoundingBox, Camera

VOLUME_MEAN = 4649.06
VOLUME_SD = 1234.26


@dataclass(frozen=True)
class SyntheticSpike:
    center: np.ndarray
    semi_axes: np.ndarray
    orientation: np.ndarray
    spike_id: str
    family: int = 0

    def __post_init__(self):
        axes = np.asarray(self.semi_axes, dtype=float)
        if axes.shape != (3,) or np.any(axes <= 0):
            raise ValueError("semi_axes must be three positive lengths")
        object.__setattr__(self, "semi_axes", axes)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))

    @property
    def volume(self):
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * math.pi * a * b * c

    def dual_quadric(self):
        H = np.eye(4)
        H[:3, :3] = self.orientation
        H[:3, 3] = self.center
        return H @ np.diag(np.r_[self.semi_axes ** 2, -1.0]) @ H.T

    def implicit(self, points):
        """Ellipsoid function value; 1 on the surface."""
        local = (np.atleast_2d(points) - self.center) @ self.orientation
        return np.sum((local / self.semi_axes) ** 2, axis=1)


def spike_from_volume(volume, aspect, flatness, center, orientation, spike_id, family=0):
    """Ellipsoid with semi-axes (a, flatness*a, aspect*a) of the given volume."""
    a = (3.0 * volume / (4.0 * math.pi * flatness * aspect)) ** (1.0 / 3.0)
    return SyntheticSpike(np.asarray(center, float), np.array([a, flatness * a, aspect * a]),
                          orientation, spike_id, family)


def draw_volumes(rng, n, mean=VOLUME_MEAN, sd=VOLUME_SD):
    v = rng.normal(mean, sd, size=n)
    return np.clip(v, mean - 3 * sd, mean + 3 * sd)


def projected_box(camera, spike):
    """Tight (min_x, min_y, max_x, max_y) of the spike outline, or None.

    None is returned when the ellipsoid is not entirely in front of the camera.
    """
    if np.min(camera.depth(spike.center)) <= 0:
        return None
    P = camera.projection_matrix
    C = P @ spike.dual_quadric() @ P.T
    if C[2, 2] >= 0:
        # camera center inside or on the ellipsoid silhouette cone
        return None
    out = []
    for i in (0, 1):
        disc = C[i, 2] ** 2 - C[i, i] * C[2, 2]
        if disc < 0:
            return None
        root = math.sqrt(disc)
        u1 = (C[i, 2] + root) / C[2, 2]
        u2 = (C[i, 2] - root) / C[2, 2]
        out.append((min(u1, u2), max(u1, u2)))
    return np.array([out[0][0], out[1][0], out[0][1], out[1][1]])


def default_rig(height=1700.0, width=2400, image_height=1600, focal=2000.0):
    """Twelve downward-looking cameras: five per side plus two central ones."""
    cams = []
    idx = 0
    for side in (-1.0, 1.0):
        for y in (-800.0, -400.0, 0.0, 400.0, 800.0):
            center = np.array([side * 500.0, y, height])
            target = np.array([side * 150.0, 0.45 * y, 0.0])
            cams.append(Camera.look_at(center, target, focal, width, image_height,
                                       up=(0.0, 1.0, 0.0), camera_id=f"cam{idx:02d}"))
            idx += 1
    for y in (-300.0, 300.0):
        center = np.array([0.0, y, height])
        target = np.array([0.0, 0.9 * y, 0.0])
        cams.append(Camera.look_at(center, target, focal, width, image_height,
                                   up=(0.0, 1.0, 0.0), camera_id=f"cam{idx:02d}"))
        idx += 1
    return cams


@dataclass
class SceneConfig:
    """Synthetic plot parameters.

    Parameters
    ----------
    extent : tuple
        Size (x, y, z) in mm of the box spike centers are drawn from.
    min_spacing : float
        Minimum distance between spike centers in mm.
    min_visible_fraction : float
        A box cut by the image border is still detected while at least this
        fraction of its area is inside the image.
    box_noise : float
        Standard deviation of each box edge's displacement, as a fraction of
        the box width or height.
    """

    n_spikes: int = 100
    pose_mode: str = "upright"
    upright_angle_sigma: float = 15.0
    camera_file: str = None
    extent: tuple = (2000.0, 2600.0, 150.0)
    min_spacing: float = 15.0
    min_visible_fraction: float = 0.1
    box_noise: float = 0.25
    occlusion_free: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_spikes < 1:
            raise ValueError("n_spikes must be >= 1")
        if self.pose_mode not in ("upright", "random"):
            raise ValueError("pose_mode must be 'upright' or 'random'")
        if self.box_noise < 0:
            raise ValueError("box_noise must be >= 0")


@dataclass
class Scene:
    spikes: list
    cameras: list
    detections: dict
    truth: dict
    border: dict
    view_counts: dict
    config: SceneConfig = None

    def boxes(self):
        return [b for img in sorted(self.detections) for b in self.detections[img]]

    def cameras_by_image(self):
        return {c.camera_id: c for c in self.cameras}


def _orientation(rng, mode, sigma_deg):
    if mode == "random":
        return Rotation.random(random_state=rng).as_matrix()
    tilt = math.radians(sigma_deg) * rng.normal()
    azimuth = rng.uniform(0.0, 2 * math.pi)
    axis = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
    return Rotation.from_rotvec(axis * tilt).as_matrix()


def _place_centers(rng, n, extent, min_spacing, max_tries=200):
    ex, ey, ez = extent
    centers = np.empty((0, 3))
    for _ in range(n):
        for _ in range(max_tries):
            c = np.array([rng.uniform(-ex / 2, ex / 2), rng.uniform(-ey / 2, ey / 2),
                          rng.uniform(-ez / 2, ez / 2)])
            if len(centers) == 0 or np.min(np.linalg.norm(centers - c, axis=1)) >= min_spacing:
                centers = np.vstack([centers, c])
                break
        else:
            raise ValueError(
                f"extent {extent} is too small for {n} spikes at spacing {min_spacing} mm")
    return centers


def generate_scene(config, cameras=None):
    """Place spikes, then emit one clamped box per (camera, visible spike)."""
    if cameras is None:
        if config.camera_file:
            from .io import read_cameras
            cameras = read_cameras(config.camera_file)
        else:
            cameras = default_rig()
    cameras = list(cameras)
    rng = derive_rng(config.rng_seed, "scene")
    centers = _place_centers(rng, config.n_spikes, config.extent, config.min_spacing)
    volumes = draw_volumes(rng, config.n_spikes)
    spikes = []
    for i, (c, v) in enumerate(zip(centers, volumes)):
        R = _orientation(rng, config.pose_mode, config.upright_angle_sigma)
        spikes.append(spike_from_volume(v, rng.uniform(6.0, 10.0), rng.uniform(0.75, 1.0),
                                        c, R, f"s{i:04d}"))
    detections, truth, border = {}, {}, {}
    counts = {s.spike_id: 0 for s in spikes}
    for cam in cameras:
        w, h = cam.image_size
        boxes = []
        noise_rng = derive_rng(config.rng_seed, "box_noise", cam.camera_id)
        for s in spikes:
            bounds = projected_box(cam, s)
            if bounds is None:
                continue
            if config.box_noise > 0:
                # detector jitter: each edge moves by a fraction of the box size
                size = np.tile(bounds[2:] - bounds[:2], 2)
                jittered = bounds + config.box_noise * size * noise_rng.normal(size=4)
                if jittered[0] < jittered[2] and jittered[1] < jittered[3]:
                    bounds = jittered
            clipped = np.clip(bounds, 0.0, [w, h, w, h])
            if clipped[0] >= clipped[2] or clipped[1] >= clipped[3]:
                continue
            # partially visible spikes are detected while enough of the box is in frame
            full = (bounds[2] - bounds[0]) * (bounds[3] - bounds[1])
            seen = (clipped[2] - clipped[0]) * (clipped[3] - clipped[1])
            if seen < config.min_visible_fraction * full:
                continue
            det_id = f"{cam.camera_id}/{s.spike_id}"
            touches = bool(bounds[0] <= 0 or bounds[1] <= 0 or bounds[2] >= w or bounds[3] >= h)
            boxes.append(BoundingBox(cam.camera_id, *map(float, clipped), det_id))
            truth[det_id] = s.spike_id
            border[det_id] = touches
            counts[s.spike_id] += 1
        detections[cam.camera_id] = boxes
    return Scene(spikes, cameras, detections, truth, border, counts, config)


@dataclass
class PairingScore:
    true_positives: int
    false_positives: int
    false_negatives: int
    precision: float = field(init=False)
    recall: float = field(init=False)
    precision_defined: bool = field(init=False)
    recall_defined: bool = field(init=False)

    def __post_init__(self):
        tp, fp, fn = self.true_positives, self.false_positives, self.false_negatives
        self.precision_defined = tp + fp > 0
        self.recall_defined = tp + fn > 0
        # vacuous cases are reported as 1 and flagged
        self.precision = tp / (tp + fp) if self.precision_defined else 1.0
        self.recall = tp / (tp + fn) if self.recall_defined else 1.0

    def as_dict(self):
        return {
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "precision": self.precision,
            "recall": self.recall,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
        }


def border_spikes(truth, border):
    return {truth[d] for d, flag in border.items() if flag and d in truth}


def _evaluated(truth, border, exclude_border):
    if not exclude_border or border is None:
        return set(truth)
    bad = border_spikes(truth, border)
    return {d for d, s in truth.items() if s not in bad}


def _pair_counts(predicted, truth, keep, pair_filter=None):
    """TP/FP/FN over unordered pairs of the detections in ``keep``.

    ``pair_filter(spike_a, spike_b)`` decides whether a pair is attributed
    to the current evaluation; it sees the two ground-truth spikes.
    """
    labels = predicted.labels()
    next_label = itertools.count(len(predicted.clusters))
    by_cluster = {}
    for d in sorted(keep, key=str):
        lab = labels.get(d)
        if lab is None:
            lab = ("single", next(next_label))
        by_cluster.setdefault(lab, []).append(d)
    tp = fp = 0
    for members in by_cluster.values():
        for a, b in itertools.combinations(members, 2):
            sa, sb = truth[a], truth[b]
            if pair_filter is not None and not pair_filter(sa, sb):
                continue
            if sa == sb:
                tp += 1
            else:
                fp += 1
    by_spike = {}
    for d in keep:
        by_spike[truth[d]] = by_spike.get(truth[d], 0) + 1
    same = sum(n * (n - 1) // 2 for s, n in by_spike.items()
               if pair_filter is None or pair_filter(s, s))
    return tp, fp, same - tp


def score_pairing(predicted, truth, border=None, exclude_border=False):
    """Pairwise precision and recall of a clustering against true spike ids."""
    keep = _evaluated(truth, border, exclude_border)
    return PairingScore(*_pair_counts(predicted, truth, keep))


DEFAULT_BINS = {"6-9": (6, 9), "10-12": (10, 12), "12": (12, 12)}


def view_count_breakdown(predicted, truth, view_counts, border=None, exclude_border=False,
                         bins=None):
    """Scores restricted to spikes seen in a given number of views.

    A pair of two different spikes is attributed by the smaller of their
    view counts, so disjoint bins partition the pairs.
    """
    bins = DEFAULT_BINS if bins is None else bins
    keep = _evaluated(truth, border, exclude_border)
    out = {}
    for name, (lo, hi) in bins.items():
        def in_bin(sa, sb, lo=lo, hi=hi):
            v = min(view_counts[sa], view_counts[sb])
            return lo <= v <= hi
        out[name] = PairingScore(*_pair_counts(predicted, truth, keep, in_bin))
    return out
