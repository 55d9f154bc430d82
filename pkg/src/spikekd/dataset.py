"""Synthetic spikes with known volumes for the learning experiments.

Each spike is an ellipsoid drawn from a family (the genotype analogue):
families share a volume offset and an elongation, and each spike is sampled
at one of three growth stages with its own volume distribution. Splitting by family
keeps near-duplicates out of the evaluation sets. Per spike the dataset
holds

* a complete "scan" cloud: dense surface samples, random rigid pose,
  voxelized and subsampled;
* a partial "field" cloud: the side facing a random camera direction, with
  reconstruction jitter, voxelized and subsampled;
* per-view image features: silhouette statistics of the orthographic
  outline from several directions, with per-view scale error and noise.
  By default they are passed, together with a few nuisance factors
  (lighting, occlusion), through a fixed random ``tanh`` layer so that they
  behave like image-backbone embeddings: informative but entangled, and
  costly to decode from few labels.
"""
from dataclasses import dataclass, field
import hashlib

import numpy as np
from scipy.spatial.transform import Rotation

from ._seeding import derive_rng, hash64
from .pointcloud import (distance_histograms, rigid_transform, sample_ellipsoid_surface,
                         simulate_partial, subsample, voxel_downsample)
from .scene import spike_from_volume

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
N_SILHOUETTE = 6
# growth-stage volume distributions (mean, sd in mm^3) and their sample counts
STAGES = ((3954.27, 863.50, 477), (5406.31, 1171.49, 297), (4961.13, 1105.81, 360))
FAMILY_SHARE = 0.6
VIEW_FEATURE_NAMES = ("log_half_width", "log_half_height", "log_major", "log_minor",
                      "log_area", "aspect", "noise_0", "noise_1")


@dataclass
class SpikeDataset:
    """Labelled spikes, family splits, and optional unlabelled spikes.

    ``unlabeled`` is another :class:`SpikeDataset` whose spikes all come
    from training families; its volumes are kept for diagnostics only.
    """

    spikes: list
    volumes: np.ndarray
    families: np.ndarray
    scan_clouds: list
    field_clouds: list
    view_features: list
    splits: dict = field(default_factory=dict)
    unlabeled: "SpikeDataset" = None
    config: dict = field(default_factory=dict)
    _features: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.volumes)

    def indices(self, split):
        if split == "all":
            return np.arange(len(self))
        return self.splits[split]

    def histograms(self, kind, bins, width=60.0, idx=None):
        """Distance histograms of the ``"scan"`` or ``"field"`` clouds (memoised)."""
        key = (kind, bins, float(width))
        if key not in self._features:
            clouds = self.scan_clouds if kind == "scan" else self.field_clouds
            if clouds is None:
                raise ValueError(f"this dataset has no {kind} clouds")
            self._features[key] = [distance_histograms(c, bins, width).per_point for c in clouds]
        feats = self._features[key]
        return feats if idx is None else [feats[i] for i in idx]

    def views(self, idx=None):
        return self.view_features if idx is None else [self.view_features[i] for i in idx]

    def fingerprint(self):
        """SHA-256 over every array in the dataset, in a fixed order."""
        h = hashlib.sha256()
        for arr in [self.volumes, self.families] + list(self.scan_clouds or []) \
                + list(self.field_clouds) + list(self.view_features):
            a = np.ascontiguousarray(arr, dtype=np.float64)
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        for name in sorted(self.splits):
            h.update(name.encode())
            h.update(np.asarray(self.splits[name], dtype=np.int64).tobytes())
        if self.unlabeled is not None:
            h.update(self.unlabeled.fingerprint().encode())
        return h.hexdigest()


def split_families(families, fractions=SPLIT_FRACTIONS, rng_seed=0):
    """Assign whole families to train/val/test in the given proportions."""
    fams = np.unique(families)
    rng = derive_rng(rng_seed, "family_split")
    order = rng.permutation(fams)
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
    groups = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
              "test": order[n_train + n_val:]}
    return {name: np.flatnonzero(np.isin(families, g)) for name, g in groups.items()}


def _tilted(rng, sigma_deg=15.0):
    tilt = np.radians(sigma_deg) * rng.normal()
    az = rng.uniform(0.0, 2 * np.pi)
    return Rotation.from_rotvec(np.array([np.cos(az), np.sin(az), 0.0]) * tilt).as_matrix()


def _random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def view_directions(n_views, rng, elevation=(35.0, 80.0)):
    """Downward viewing directions around one spike; elevation in degrees."""
    az = rng.uniform(0.0, 2 * np.pi) + 2 * np.pi * np.arange(n_views) / n_views
    elev = np.radians(rng.uniform(*elevation, size=n_views))
    return np.column_stack([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), -np.sin(elev)])


def silhouette_features(spike, direction, roll, scale, noise, rng):
    """Outline statistics of the orthographic view of an ellipsoid.

    The outline of ``{x : x^T A^-1 x <= 1}`` seen along ``direction`` is the
    ellipse with shape matrix ``P^T A P`` in the image-plane basis ``P``.
    """
    d = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    c, s = np.cos(roll), np.sin(roll)
    P = np.column_stack([c * e1 + s * e2, -s * e1 + c * e2])
    R = spike.orientation
    A = R @ np.diag(spike.semi_axes ** 2) @ R.T
    S = P.T @ A @ P * scale ** 2
    lam = np.linalg.eigvalsh(S)
    half = np.sqrt(np.diag(S))
    feats = np.array([
        np.log(half[0]), np.log(half[1]),
        0.5 * np.log(lam[1]), 0.5 * np.log(lam[0]),
        np.log(np.pi * np.sqrt(lam[0] * lam[1])),
        np.sqrt(lam[0] / lam[1]),
        0.0, 0.0,
    ])
    return feats + noise * rng.normal(size=len(feats))


class ViewEmbedding:
    """Fixed random nonlinear map from silhouette statistics to embeddings."""

    def __init__(self, raw, dim=32, n_nuisance=4, gain=2.0, noise=0.05, rng_seed=0):
        stats = np.concatenate(raw)[:, :N_SILHOUETTE]
        self.mean, self.scale = stats.mean(axis=0), stats.std(axis=0) + 1e-12
        self.n_nuisance, self.noise = n_nuisance, noise
        rng = derive_rng(rng_seed, "view_embedding")
        k = N_SILHOUETTE + n_nuisance
        self.W = rng.normal(0.0, gain / np.sqrt(k), size=(k, dim))
        self.b = rng.normal(0.0, 0.5, size=dim)

    def __call__(self, views, rng):
        z = (views[:, :N_SILHOUETTE] - self.mean) / self.scale
        z = np.column_stack([z, rng.normal(size=(len(views), self.n_nuisance))])
        e = np.tanh(z @ self.W + self.b)
        return e + self.noise * rng.normal(size=e.shape)


def _draw_spike(rng, family_effect, family_aspect, spike_id, family):
    # stage mixture; the family shifts the volume within its stage
    counts = np.array([c for _, _, c in STAGES], dtype=float)
    mean, sd, _ = STAGES[rng.choice(len(STAGES), p=counts / counts.sum())]
    z = FAMILY_SHARE * family_effect + np.sqrt(1 - FAMILY_SHARE ** 2) * rng.normal()
    v = mean + sd * float(np.clip(z, -3.0, 3.0))
    aspect = float(np.clip(family_aspect + rng.normal(0.0, 0.5), 6.0, 10.0))
    flatness = rng.uniform(0.75, 1.0)
    return spike_from_volume(v, aspect, flatness, np.zeros(3), _tilted(rng), spike_id, family)


def _field_cloud(spike, surface, rng, keep_range, jitter, voxel, n_points, seed):
    # the side of the spike facing a camera that looks roughly across its axis
    axis = spike.orientation[:, 2]
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    side = np.cross(axis, helper)
    side /= np.linalg.norm(side)
    ang = rng.uniform(0.0, 2 * np.pi)
    side = np.cos(ang) * side + np.sin(ang) * np.cross(axis, side)
    toward = side + rng.uniform(-0.3, 0.3) * axis
    part = simulate_partial(surface, toward, rng.uniform(*keep_range)).points
    part = part + rng.normal(0.0, jitter, size=part.shape)
    return subsample(voxel_downsample(part, voxel), n_points, hash64(seed, "field")).points


def _scan_cloud(surface, rng, voxel, n_points, seed):
    R = _random_rotation(rng)
    t = rng.uniform(-500.0, 500.0, size=3)
    moved = rigid_transform(surface, R, t)
    return subsample(voxel_downsample(moved, voxel), n_points, hash64(seed, "scan")).points


def make_synthetic_dataset(n_spikes=200, views_per_spike=12, rng_seed=0, n_unlabeled=0,
                           n_families=100, surface_points=30000, voxel_size=2.0, n_points=1000,
                           view_scale_noise=0.08, view_feature_noise=0.03,
                           keep_fraction=(0.35, 0.65), field_jitter=0.5,
                           view_elevation=(35.0, 80.0), view_embed_dim=32, view_nuisance=4):
    """Generate the labelled dataset, its family splits and unlabelled spikes.

    Unlabelled spikes are drawn from training families only and carry no
    scan cloud. ``view_embed_dim=0`` keeps the raw 8-d silhouette features.
    """
    if n_spikes < 1:
        raise ValueError("n_spikes must be >= 1")
    if views_per_spike < 1:
        raise ValueError("views_per_spike must be >= 1")
    n_families = max(1, min(n_families, n_spikes))
    rng = derive_rng(rng_seed, "dataset")
    fam_effect = rng.normal(size=n_families)
    fam_aspect = rng.uniform(6.0, 10.0, size=n_families)
    families = np.sort(np.arange(n_spikes) % n_families)
    splits = split_families(families, rng_seed=rng_seed)
    config = dict(n_spikes=n_spikes, views_per_spike=views_per_spike, rng_seed=rng_seed,
                  n_unlabeled=n_unlabeled, n_families=n_families, surface_points=surface_points,
                  voxel_size=voxel_size, n_points=n_points, view_scale_noise=view_scale_noise,
                  view_feature_noise=view_feature_noise, keep_fraction=list(keep_fraction),
                  field_jitter=field_jitter, view_elevation=list(view_elevation),
                  view_embed_dim=view_embed_dim, view_nuisance=view_nuisance)

    def build(fams, prefix, with_scan):
        spikes, scans, fields, views = [], [], [], []
        for i, f in enumerate(fams):
            sid = f"{prefix}{i:05d}"
            srng = derive_rng(rng_seed, "spike", sid)
            spike = _draw_spike(srng, fam_effect[f], fam_aspect[f], sid, int(f))
            seed = hash64(rng_seed, "cloud", sid)
            surface = sample_ellipsoid_surface(spike, surface_points, seed)
            if with_scan:
                scans.append(_scan_cloud(surface, srng, voxel_size, n_points, seed))
            fields.append(_field_cloud(spike, surface, srng, keep_fraction, field_jitter,
                                       voxel_size, n_points, seed))
            dirs = view_directions(views_per_spike, srng, view_elevation)
            scales = np.exp(view_scale_noise * srng.normal(size=views_per_spike))
            rolls = srng.uniform(0.0, 2 * np.pi, size=views_per_spike)
            views.append(np.array([silhouette_features(spike, d, r, s, view_feature_noise, srng)
                                   for d, r, s in zip(dirs, rolls, scales)]))
            spikes.append(spike)
        volumes = np.array([s.volume for s in spikes])
        return SpikeDataset(spikes, volumes, np.asarray(fams, dtype=np.int64),
                            scans if with_scan else None, fields, views, config=config)

    data = build(families, "s", True)
    data.splits = splits
    if n_unlabeled:
        train_fams = np.unique(families[splits["train"]])
        urng = derive_rng(rng_seed, "unlabeled_families")
        ufams = np.sort(urng.choice(train_fams, size=n_unlabeled))
        data.unlabeled = build(ufams, "u", False)
    if view_embed_dim:
        embed = ViewEmbedding(data.view_features, view_embed_dim, view_nuisance, rng_seed=rng_seed)
        for part in (data, data.unlabeled):
            if part is not None:
                part.view_features = [embed(v, derive_rng(rng_seed, "view_nuisance", s.spike_id))
                                      for v, s in zip(part.view_features, part.spikes)]
    return data
