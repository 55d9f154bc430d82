"""End-to-end desk-scale experiment: scene, pairing, features, training, distillation.

:func:`run_pipeline` runs the stages in order, writes every artifact to the
output directory and returns a :class:`RunManifest` with the config hash,
per-stage output hashes and timings. Each stage draws its randomness from
``hash64(rng_seed, stage_name)``.
"""
from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
import os
import time

import numpy as np

from . import __version__
from ._seeding import hash64
from .dataset import make_synthetic_dataset
from .exceptions import ConfigError, StageError, UndefinedMetricError
from .io import (FORMAT_VERSION, save_model, write_cameras, write_clusters, write_csv,
                 write_detections, write_scene)
from .losses import compute_metrics
from .pairing import pair_detections
from .pointcloud import distance_histograms
from .scene import SceneConfig, generate_scene, score_pairing, view_count_breakdown
from .training import (STUDENT_BINS, TEACHER_BINS, TrainConfig, distill_features,
                       distill_pseudolabels, ensemble_inputs, train_ensemble,
                       train_field_baseline, train_regulated, train_student, train_teacher)

logger = logging.getLogger(__name__)

STAGES = ("synth", "pair", "score", "featurize", "teacher", "student", "rt", "ensemble",
          "distill", "eval")
_PAIRING_KEYS = {"tau", "k", "runs", "agree", "min_views"}
_DATASET_KEYS = {"n_spikes", "views_per_spike", "n_unlabeled", "n_families", "surface_points",
                 "voxel_size", "n_points", "view_scale_noise", "view_feature_noise",
                 "keep_fraction", "field_jitter", "view_elevation", "view_embed_dim",
                 "view_nuisance"}
_DISTILL_KEYS = {"lam", "alpha", "beta", "gamma", "refresh"}


def _default_dataset():
    return {"n_spikes": 200, "views_per_spike": 12, "n_unlabeled": 500}


def _default_distill():
    return {"lam": 5.0, "alpha": 0.2, "beta": 0.2, "gamma": 0.2, "refresh": True}


@dataclass
class PipelineConfig:
    """Stage settings plus the global seed.

    ``scene`` holds :class:`SceneConfig` fields, ``dataset`` keyword
    arguments of :func:`make_synthetic_dataset`, ``train`` fields of
    :class:`TrainConfig`. ``out_dir`` and ``threads`` do not change results
    and are left out of the config hash.
    """

    rng_seed: int = 0
    out_dir: str = "run"
    threads: int = 1
    scene: dict = field(default_factory=dict)
    pairing: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=_default_dataset)
    train: dict = field(default_factory=dict)
    distill: dict = field(default_factory=_default_distill)
    eval_split: str = "test"
    format_version: str = FORMAT_VERSION

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        merged = {}
        for k, v in data.items():
            default = getattr(base, k)
            merged[k] = {**default, **v} if isinstance(default, dict) and isinstance(v, dict) else v
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def scene_config(self):
        return SceneConfig(**{**self.scene, "rng_seed": hash64(self.rng_seed, "synth")})

    def train_config(self):
        return TrainConfig(**{**self.train, "rng_seed": self.rng_seed})

    def dataset_kwargs(self):
        return {**self.dataset, "rng_seed": hash64(self.rng_seed, "featurize")}

    def validate(self):
        """Raise :class:`ConfigError` on any invalid setting, before any stage runs."""
        if not isinstance(self.rng_seed, int) or self.rng_seed < 0:
            raise ConfigError("rng_seed must be a non-negative integer")
        if not isinstance(self.threads, int) or self.threads < 1:
            raise ConfigError("threads must be a positive integer")
        if self.format_version != FORMAT_VERSION:
            raise ConfigError(f"unsupported format version {self.format_version!r}")
        for name, allowed in (("pairing", _PAIRING_KEYS), ("dataset", _DATASET_KEYS),
                              ("distill", _DISTILL_KEYS)):
            bad = set(getattr(self, name)) - allowed
            if bad:
                raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError("eval_split must be train, val or test")
        cam = self.scene.get("camera_file")
        if cam is not None and not os.path.isfile(cam):
            raise ConfigError(f"camera file not found: {cam}")
        try:
            self.scene_config()
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.dataset.get("n_spikes", 200) < 1 or self.dataset.get("views_per_spike", 12) < 1:
            raise ConfigError("dataset needs n_spikes >= 1 and views_per_spike >= 1")
        return self

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        data = {k: v for k, v in self.to_dict().items() if k not in ("out_dir", "threads")}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    format_version: str
    stage_seeds: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings_ms: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _metrics_row(name, inputs, pred, truth):
    try:
        m = compute_metrics(pred, truth)
        return [name, inputs, m.mae, m.pearson_r, m.mape, m.n]
    except (UndefinedMetricError, ValueError):
        mae = float(np.mean(np.abs(np.asarray(pred) - truth))) if len(truth) else float("nan")
        return [name, inputs, mae, float("nan"), float("nan"), len(truth)]


def run_pipeline(config):
    """Run every stage; a failing stage raises :class:`StageError` naming it.

    Outputs written before the failure stay in ``config.out_dir``.
    """
    config.validate()
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    chash = config.config_hash()
    manifest = RunManifest(chash, __version__, FORMAT_VERSION,
                           {s: hash64(config.rng_seed, s) for s in STAGES})
    state = {}

    def path(name):
        return os.path.join(out, name)

    def record(*names):
        for n in names:
            manifest.outputs[n] = file_hash(path(n))

    def synth():
        scene = generate_scene(config.scene_config())
        state["scene"] = scene
        write_scene(path("scene.json"), scene, chash)
        write_cameras(path("cameras.json"), scene.cameras, chash)
        write_detections(path("detections.json"), scene.detections, chash)
        record("scene.json", "cameras.json", "detections.json")

    def pair():
        p = config.pairing
        clusters, _ = pair_detections(state["scene"].detections, state["scene"].cameras,
                                      tau=p.get("tau", 0.75), k=p.get("k", 20),
                                      runs=p.get("runs", 3), agree=p.get("agree", 2),
                                      min_views=p.get("min_views", 1),
                                      rng_seed=hash64(config.rng_seed, "pair"),
                                      n_jobs=config.threads)
        state["clusters"] = clusters
        write_clusters(path("clusters.json"), clusters, chash)
        record("clusters.json")

    def score():
        scene, clusters = state["scene"], state["clusters"]
        rows = []
        for exclude in (False, True):
            mode = "exclude_border" if exclude else "include_all"
            overall = score_pairing(clusters, scene.truth, scene.border, exclude)
            rows.append([mode, "all", overall.precision, overall.recall,
                         overall.true_positives, overall.false_positives, overall.false_negatives])
            for name, s in view_count_breakdown(clusters, scene.truth, scene.view_counts,
                                                scene.border, exclude).items():
                rows.append([mode, name, s.precision, s.recall, s.true_positives,
                             s.false_positives, s.false_negatives])
        write_csv(path("pairing_scores.csv"),
                  ["mode", "views", "precision", "recall", "tp", "fp", "fn"], rows, chash)
        record("pairing_scores.csv")

    def featurize():
        data = make_synthetic_dataset(**config.dataset_kwargs())
        width = config.train_config().width
        data.histograms("scan", TEACHER_BINS, width)
        data.histograms("field", STUDENT_BINS, width)
        if data.unlabeled is not None:
            data.unlabeled.histograms("field", STUDENT_BINS, width)
        state["data"] = data
        split_of = {int(i): name for name, idx in data.splits.items() for i in idx}
        rows = [[s.spike_id, int(f), split_of.get(i, ""), v]
                for i, (s, f, v) in enumerate(zip(data.spikes, data.families, data.volumes))]
        write_csv(path("dataset.csv"), ["spike_id", "family", "split", "volume"], rows, chash)
        with open(path("dataset.json"), "w", encoding="utf-8") as fh:
            json.dump({"format_version": FORMAT_VERSION, "config_hash": chash,
                       "fingerprint": data.fingerprint(), "n_spikes": len(data),
                       "n_unlabeled": 0 if data.unlabeled is None else len(data.unlabeled)},
                      fh, sort_keys=True, indent=1)
        record("dataset.csv", "dataset.json")

    tc = config.train_config()
    dist = {**_default_distill(), **config.distill}
    models = {}

    def save(name, model, role):
        models[name] = (model, role)
        save_model(path(f"{name}.ckpt"), model, chash, role)
        record(f"{name}.ckpt")

    def teacher():
        save("teacher", train_teacher(state["data"], tc), "teacher")

    def student():
        data = state["data"]
        save("student_kd", train_student(data, models["teacher"][0], tc, dist["lam"],
                                         dist["alpha"]), "student")
        save("student_no_kd", train_field_baseline(data, tc), "student")

    def rt():
        save("rt", train_regulated(state["data"], tc), "rt")
        save("rt_unregulated", train_regulated(state["data"], tc, view_weight=0.0), "rt")

    def ensemble():
        save("ensemble", train_ensemble(models["rt"][0], models["student_kd"][0],
                                        state["data"], tc), "ensemble")

    def distill():
        data, ens = state["data"], models["ensemble"][0]
        save("rt_feature_kd", distill_features(ens, data, tc, dist["beta"], dist["gamma"]), "rt")
        save("rt_label_kd", distill_pseudolabels(ens, data, tc, refresh=dist["refresh"]), "rt")

    def evaluate():
        data = state["data"]
        idx = data.indices(config.eval_split)
        truth = data.volumes[idx]
        inputs = {
            "teacher": ("scan cloud", lambda: data.histograms("scan", TEACHER_BINS, tc.width, idx)),
            "student": ("field cloud", lambda: data.histograms("field", STUDENT_BINS, tc.width, idx)),
            "rt": ("images", lambda: data.views(idx)),
            "ensemble": ("images + field cloud", lambda: ensemble_inputs(data, idx, tc.width)),
        }
        rows, preds = [], {}
        for name in ("teacher", "student_no_kd", "student_kd", "rt_unregulated", "rt",
                     "ensemble", "rt_feature_kd", "rt_label_kd"):
            model, role = models[name]
            label, get = inputs[role]
            preds[name] = model.predict(get()) if len(idx) else np.zeros(0)
            rows.append(_metrics_row(name, label, preds[name], truth))
        write_csv(path("results.csv"), ["model", "input", "mae", "r", "mape", "n"], rows, chash)
        names = list(preds)
        per_spike = [[data.spikes[i].spike_id, int(data.families[i]), data.volumes[i]]
                     + [preds[n][j] for n in names] for j, i in enumerate(idx)]
        write_csv(path("predictions.csv"), ["spike_id", "family", "true"] + names, per_spike, chash)
        record("results.csv", "predictions.csv")

    runners = {"synth": synth, "pair": pair, "score": score, "featurize": featurize,
               "teacher": teacher, "student": student, "rt": rt, "ensemble": ensemble,
               "distill": distill, "eval": evaluate}
    for stage in STAGES:
        t0 = time.perf_counter()
        logger.info("stage %s", stage)
        try:
            runners[stage]()
        except Exception as exc:
            raise StageError(stage, exc) from exc
        finally:
            manifest.timings_ms[stage] = round(1000.0 * (time.perf_counter() - t0), 3)
            with open(path("manifest.json"), "w", encoding="utf-8") as fh:
                json.dump(manifest.as_dict(), fh, sort_keys=True, indent=1)
    return manifest


@dataclass
class LatencyStats:
    """Per-spike latencies in seconds over repeated passes."""

    image_median: float
    image_p95: float
    cloud_median: float
    cloud_p95: float
    repetitions: int
    n_spikes: int

    @property
    def ratio(self):
        """Image-path over cloud-path median latency."""
        return self.image_median / self.cloud_median

    def as_dict(self):
        return {**asdict(self), "ratio": self.ratio}


def _per_spike_times(fn, items, repetitions):
    out = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for it in items:
            fn(it)
        out.append((time.perf_counter() - t0) / len(items))
    return np.array(out)


def cloud_path_latency(cloud_model, clouds, repetitions=3, width=60.0):
    """Median per-cloud seconds for histogram featurization plus encoder inference."""
    bins = cloud_model.bins
    fn = lambda c: cloud_model.predict([distance_histograms(c, bins, width).per_point])
    return float(np.median(_per_spike_times(fn, clouds, repetitions)))


def benchmark_inference(image_model, cloud_model, dataset, repetitions=5, n_spikes=20,
                        width=60.0):
    """Per-spike latency of the image path (views to volume) and the cloud path.

    The cloud path starts from the raw field cloud, so it includes the
    quadratic distance-histogram step. Spikes are processed one at a time.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    n = min(n_spikes, len(dataset))
    views = dataset.views(range(n))
    clouds = dataset.field_clouds[:n]
    bins = cloud_model.bins
    img = _per_spike_times(lambda v: image_model.predict([v]), views, repetitions)
    cld = _per_spike_times(
        lambda c: cloud_model.predict([distance_histograms(c, bins, width).per_point]),
        clouds, repetitions)
    return LatencyStats(float(np.median(img)), float(np.percentile(img, 95)),
                        float(np.median(cld)), float(np.percentile(cld, 95)), repetitions, n)
