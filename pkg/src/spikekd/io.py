"""File formats: cameras, detections, clusters, scenes, clouds, checkpoints, CSV.

JSON files are written with sorted keys and a fixed float repr so that equal
content gives byte-identical files. Metadata (format version, producing
config hash) sits next to the payload in a wrapping object; readers also
accept the bare payload.
"""
import csv
import io as _io
import json
import struct

import numpy as np

from .camera import BoundingBox, Camera

FORMAT_VERSION = "1.0"
CHECKPOINT_MAGIC = b"SGKD"
CHECKPOINT_VERSION = 1


def _dump(path, obj):
    text = json.dumps(obj, sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def _load(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _meta(config_hash):
    meta = {"format_version": FORMAT_VERSION}
    if config_hash is not None:
        meta["config_hash"] = config_hash
    return meta


# cameras

def camera_to_dict(cam):
    K = cam.intrinsics
    return {"id": cam.camera_id, "fx": float(K[0, 0]), "fy": float(K[1, 1]), "cx": float(K[0, 2]),
            "cy": float(K[1, 2]), "rotation": [float(v) for v in np.asarray(cam.rotation).reshape(-1)],
            "center": [float(v) for v in cam.center], "width": int(cam.image_size[0]),
            "height": int(cam.image_size[1])}


def camera_from_dict(d):
    missing = {"id", "fx", "fy", "cx", "cy", "rotation", "center", "width", "height"} - set(d)
    if missing:
        raise ValueError(f"camera entry lacks {sorted(missing)}")
    if len(d["rotation"]) != 9 or len(d["center"]) != 3:
        raise ValueError("rotation needs 9 values and center 3")
    return Camera.from_parameters(d["fx"], d["fy"], d["cx"], d["cy"],
                                  np.asarray(d["rotation"], float).reshape(3, 3), d["center"],
                                  d["width"], d["height"], str(d["id"]))


def write_cameras(path, cameras, config_hash=None):
    _dump(path, {**_meta(config_hash), "units": "mm", "cameras": [camera_to_dict(c) for c in cameras]})


def read_cameras(path):
    data = _load(path)
    if isinstance(data, dict):
        units = data.get("units", "mm")
        if units != "mm":
            raise ValueError(f"camera file units must be 'mm', got {units!r}")
        data = data["cameras"]
    return [camera_from_dict(d) for d in data]


# detections and clusters

def box_to_dict(b):
    return {"detection_id": b.detection_id, "min_x": b.min_x, "min_y": b.min_y,
            "max_x": b.max_x, "max_y": b.max_y}


def detections_to_dict(detections):
    return {str(img): [box_to_dict(b) for b in boxes] for img, boxes in detections.items()}


def detections_from_dict(data):
    return {img: [BoundingBox(img, float(b["min_x"]), float(b["min_y"]), float(b["max_x"]),
                              float(b["max_y"]), str(b["detection_id"])) for b in boxes]
            for img, boxes in data.items()}


def write_detections(path, detections, config_hash=None):
    _dump(path, {**_meta(config_hash), "detections": detections_to_dict(detections)})


def read_detections(path):
    data = _load(path)
    if "detections" in data and "format_version" in data:
        data = data["detections"]
    return detections_from_dict(data)


def write_clusters(path, clusters, config_hash=None):
    lists = clusters.to_lists() if hasattr(clusters, "to_lists") else [sorted(c) for c in clusters]
    payload = {**_meta(config_hash), "clusters": lists}
    if hasattr(clusters, "run_count"):
        payload.update(run_count=clusters.run_count, agreement_threshold=clusters.agreement_threshold)
    _dump(path, payload)


def read_clusters(path):
    from .pairing import ClusterSet
    data = _load(path)
    if isinstance(data, dict):
        return ClusterSet([frozenset(c) for c in data["clusters"]], data.get("run_count", 1),
                          data.get("agreement_threshold", 1))
    return ClusterSet([frozenset(c) for c in data])


# scenes

def write_scene(path, scene, config_hash=None):
    spikes = [{"spike_id": s.spike_id, "center": s.center.tolist(), "semi_axes": s.semi_axes.tolist(),
               "orientation": s.orientation.reshape(-1).tolist(), "volume": s.volume,
               "family": s.family} for s in scene.spikes]
    cfg = None
    if scene.config is not None:
        cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(scene.config).items()}
    _dump(path, {**_meta(config_hash), "units": "mm", "spikes": spikes,
                 "cameras": [camera_to_dict(c) for c in scene.cameras],
                 "detections": detections_to_dict(scene.detections),
                 "truth": scene.truth, "border_flags": scene.border,
                 "view_counts": scene.view_counts, "config": cfg})


def read_scene(path):
    from .scene import Scene, SceneConfig, SyntheticSpike
    data = _load(path)
    spikes = [SyntheticSpike(s["center"], s["semi_axes"], np.asarray(s["orientation"]).reshape(3, 3),
                             s["spike_id"], s.get("family", 0)) for s in data["spikes"]]
    cfg = data.get("config")
    if cfg is not None:
        cfg = SceneConfig(**{k: (tuple(v) if k == "extent" else v) for k, v in cfg.items()})
    return Scene(spikes, [camera_from_dict(c) for c in data["cameras"]],
                 detections_from_dict(data["detections"]), data["truth"], data["border_flags"],
                 data["view_counts"], cfg)


# point clouds

def write_xyz(path, points):
    np.savetxt(path, np.asarray(points, dtype=float).reshape(-1, 3), fmt="%.17g")


def read_xyz(path):
    pts = np.loadtxt(path, dtype=float, ndmin=2, comments="#")
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.shape[1] != 3:
        raise ValueError("XYZ files need three columns")
    return pts


def write_cloud_bin(path, points):
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f8").reshape(-1, 3))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(pts)))
        fh.write(pts.tobytes())


def read_cloud_bin(path):
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ValueError("truncated cloud file")
        (n,) = struct.unpack("<Q", head)
        body = fh.read()
    if len(body) != 24 * n:
        raise ValueError(f"cloud file declares {n} points but holds {len(body) // 24}")
    return np.frombuffer(body, dtype="<f8").reshape(n, 3).copy()


def read_cloud(path):
    """Binary when the extension is ``.bin``, ASCII XYZ otherwise."""
    return read_cloud_bin(path) if str(path).endswith(".bin") else read_xyz(path)


# checkpoints

def write_checkpoint(path, kind, params, meta=None, config_hash=None):
    """``SGKD`` magic, u32 version, u32 header length, JSON header, float64 blob."""
    names = sorted(params)
    header = {"kind": kind, "format_version": FORMAT_VERSION, "meta": meta or {},
              "params": [[k, list(np.shape(params[k]))] for k in names]}
    if config_hash is not None:
        header["config_hash"] = config_hash
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return ``(kind, params, meta, header)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + n].decode("utf-8"))
    offset = 12 + n
    params = {}
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
        params[name] = arr.reshape(shape).astype(float)
        offset += 8 * size
    if offset != len(data):
        raise ValueError("checkpoint has trailing or missing bytes")
    return header["kind"], params, header["meta"], header


_FITTED = ("y_mean_", "y_scale_", "x_mean_", "x_scale_", "u_mean_", "u_scale_", "n_features_in_",
           "proj_dim_")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


def _model_state(model):
    from sklearn.base import BaseEstimator
    hyper = {k: _jsonable(v) for k, v in model.get_params(deep=False).items()
             if not isinstance(v, BaseEstimator)}
    fitted = {k: _jsonable(getattr(model, k)) for k in _FITTED if hasattr(model, k)}
    return {"class": type(model).__name__, "hyper": hyper, "fitted": fitted}


def _restore(state, params):
    from . import estimators as est
    cls = getattr(est, state["class"])
    model = cls(**state["hyper"])
    for k, v in state["fitted"].items():
        setattr(model, k, np.asarray(v) if isinstance(v, list) else v)
    if state["class"] == "HistogramEncoderRegressor":
        model.net_ = model._build()
    elif state["class"] == "RegulatedTransformerRegressor":
        from .models import RegulatedNet
        model.net_ = RegulatedNet(model.n_features_in_, model.dim, model.head_hidden,
                                  model.ffn_hidden, model.proj_dim_)
    elif state["class"] == "EnsembleRegressor":
        from .models import EnsembleNet
        model.net_ = EnsembleNet(model.n_features_in_, model.hidden)
    model.params_ = params
    return model


def save_model(path, model, config_hash=None, role=None):
    """Checkpoint a fitted estimator (an ensemble carries its upstream models).

    ``role`` (e.g. ``"teacher"``) tells readers which inputs the model takes.
    """
    meta = {"model": _model_state(model), "role": role}
    params = dict(model.params_)
    kind = type(model).__name__
    if kind == "EnsembleRegressor":
        for role, sub in (("image", model.image_model), ("cloud", model.cloud_model)):
            meta[role] = _model_state(sub)
            params.update({f"{role}/{k}": v for k, v in sub.params_.items()})
    write_checkpoint(path, kind, params, meta, config_hash)


def load_model(path, return_role=False):
    kind, params, meta, _ = read_checkpoint(path)
    model = _load_model(kind, params, meta)
    return (model, meta.get("role")) if return_role else model


def _load_model(kind, params, meta):
    if kind == "EnsembleRegressor":
        subs = {}
        for role in ("image", "cloud"):
            prefix = f"{role}/"
            sub_params = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
            subs[role] = _restore(meta[role], sub_params)
        own = {k: v for k, v in params.items() if "/" not in k}
        model = _restore(meta["model"], own)
        model.image_model, model.cloud_model = subs["image"], subs["cloud"]
        return model
    return _restore(meta["model"], params)


# CSV

def write_csv(path, header, rows, config_hash=None):
    """CSV with one leading ``#`` metadata line."""
    buf = _io.StringIO()
    buf.write(f"# format_version={FORMAT_VERSION}")
    if config_hash is not None:
        buf.write(f" config_hash={config_hash}")
    buf.write("\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    """Return ``(header, rows)``; ``#`` lines are skipped."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#") and ln.strip()]
    reader = csv.reader(lines)
    rows = list(reader)
    if not rows:
        raise ValueError(f"{path} has no header")
    return rows[0], rows[1:]
