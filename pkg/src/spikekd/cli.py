"""Command-line interface.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 stage failure.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from .exceptions import ConfigError, StageError

logger = logging.getLogger("spikekd")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _config(args):
    from .pipeline import PipelineConfig
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.rng_seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg.validate()


def _out(args, name):
    os.makedirs(args.out_dir or ".", exist_ok=True)
    return os.path.join(args.out_dir or ".", name)


def _emit(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=1)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def _need(path, what):
    if not path or not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _dataset(cfg):
    from .dataset import make_synthetic_dataset
    return make_synthetic_dataset(**cfg.dataset_kwargs())


def cmd_synth(args):
    from .io import write_cameras, write_detections, write_scene
    from .scene import generate_scene
    cfg = _config(args)
    scene = generate_scene(cfg.scene_config())
    h = cfg.config_hash()
    write_scene(_out(args, "scene.json"), scene, h)
    write_cameras(_out(args, "cameras.json"), scene.cameras, h)
    write_detections(_out(args, "detections.json"), scene.detections, h)
    print(f"{len(scene.spikes)} spikes, {sum(len(b) for b in scene.detections.values())} detections")


def cmd_pair(args):
    from .io import read_cameras, read_detections, write_clusters
    from .pairing import pair_detections
    cfg = _config(args)
    cams = read_cameras(_need(args.cameras, "camera file"))
    dets = read_detections(_need(args.detections, "detections file"))
    p = cfg.pairing
    clusters, _ = pair_detections(dets, cams, tau=p.get("tau", 0.75), k=p.get("k", 20),
                                  runs=p.get("runs", 3), agree=p.get("agree", 2),
                                  min_views=args.min_views or p.get("min_views", 1),
                                  rng_seed=cfg.rng_seed, n_jobs=cfg.threads)
    write_clusters(args.out or _out(args, "clusters.json"), clusters, cfg.config_hash())
    print(f"{len(clusters)} clusters")


def cmd_score(args):
    from .io import read_clusters, read_scene
    from .scene import score_pairing, view_count_breakdown
    scene = read_scene(_need(args.scene, "scene file"))
    clusters = read_clusters(_need(args.clusters, "clusters file"))
    overall = score_pairing(clusters, scene.truth, scene.border, args.exclude_border)
    bins = view_count_breakdown(clusters, scene.truth, scene.view_counts, scene.border,
                                args.exclude_border)
    _emit({"overall": overall.as_dict(), "by_views": {k: v.as_dict() for k, v in bins.items()}},
          args.out)


def cmd_featurize(args):
    from .io import read_cloud, write_csv
    from .pointcloud import DistanceHistogramTransformer
    cloud = read_cloud(_need(args.cloud, "cloud file"))
    tf = DistanceHistogramTransformer(args.bins, args.width, args.voxel_size, args.n_points,
                                      args.seed or 0).fit()
    hist = tf.transform([cloud])[0]
    header = [f"bin_{i}" for i in range(args.bins)] + ["overflow"]
    write_csv(args.out or _out(args, "histograms.csv"), header, hist.tolist())
    print(f"{len(hist)} points x {hist.shape[1]} bins")


def _train(args, fit, role):
    from .io import save_model
    cfg = _config(args)
    model = fit(cfg, _dataset(cfg), cfg.train_config())
    save_model(args.out, model, cfg.config_hash(), role)
    print(f"saved {role} to {args.out}")


def cmd_train_teacher(args):
    from .training import train_teacher
    _train(args, lambda cfg, d, tc: train_teacher(d, tc), "teacher")


def cmd_train_student(args):
    from .io import load_model
    from .training import train_field_baseline, train_student
    if args.teacher is None:
        _train(args, lambda cfg, d, tc: train_field_baseline(d, tc), "student")
        return
    teacher = load_model(_need(args.teacher, "teacher checkpoint"))
    dist = lambda cfg: {**{"lam": 5.0, "alpha": 0.2}, **cfg.distill}
    _train(args, lambda cfg, d, tc: train_student(d, teacher, tc, dist(cfg)["lam"],
                                                  dist(cfg)["alpha"]), "student")


def cmd_train_rt(args):
    from .training import train_regulated
    _train(args, lambda cfg, d, tc: train_regulated(d, tc, args.view_weight), "rt")


def cmd_train_ensemble(args):
    from .io import load_model
    from .training import train_ensemble
    rt = load_model(_need(args.rt, "RT checkpoint"))
    student = load_model(_need(args.student, "student checkpoint"))
    _train(args, lambda cfg, d, tc: train_ensemble(rt, student, d, tc), "ensemble")


def cmd_distill(args):
    from .io import load_model
    from .training import distill_features, distill_pseudolabels
    ens = load_model(_need(args.ensemble, "ensemble checkpoint"))

    def fit(cfg, d, tc):
        dist = {"beta": 0.2, "gamma": 0.2, "refresh": True, **cfg.distill}
        if args.mode == "feature":
            return distill_features(ens, d, tc, dist["beta"], dist["gamma"])
        return distill_pseudolabels(ens, d, tc, refresh=dist["refresh"])
    _train(args, fit, "rt")


def _model_inputs(role, data, idx, width):
    from .training import STUDENT_BINS, TEACHER_BINS, ensemble_inputs
    if role == "teacher":
        return data.histograms("scan", TEACHER_BINS, width, idx)
    if role == "student":
        return data.histograms("field", STUDENT_BINS, width, idx)
    if role == "ensemble":
        return ensemble_inputs(data, idx, width)
    return data.views(idx)


def cmd_eval(args):
    from .io import load_model, write_csv
    from .losses import compute_metrics
    cfg = _config(args)
    model, role = load_model(_need(args.model, "model checkpoint"), return_role=True)
    data = _dataset(cfg)
    idx = data.indices(args.split)
    pred = model.predict(_model_inputs(role, data, idx, cfg.train_config().width))
    truth = data.volumes[idx]
    report = compute_metrics(pred, truth)
    stem = os.path.splitext(os.path.basename(args.model))[0]
    rows = [[data.spikes[i].spike_id, int(data.families[i]), t, p]
            for i, t, p in zip(idx, truth, pred)]
    write_csv(_out(args, f"{stem}_{args.split}_predictions.csv"),
              ["spike_id", "family", "true", "predicted"], rows, cfg.config_hash())
    _emit({"model": stem, "role": role, "split": args.split, **report.as_dict()},
          _out(args, f"{stem}_{args.split}_metrics.json"))


def _column(header, rows, names, path):
    for name in names:
        if name in header:
            j = header.index(name)
            return [r[j] for r in rows]
    raise ConfigError(f"{path} has none of the columns {names}")


def cmd_metrics(args):
    from .io import read_csv
    from .losses import compute_metrics
    hp, rp = read_csv(_need(args.pred, "prediction file"))
    ht, rt = read_csv(_need(args.truth, "truth file"))
    pred = _column(hp, rp, ["predicted", "prediction", "volume", hp[-1]], args.pred)
    true = _column(ht, rt, ["true", "truth", "volume", ht[-1]], args.truth)
    if "spike_id" in hp and "spike_id" in ht:
        by_id = dict(zip(_column(ht, rt, ["spike_id"], args.truth), true))
        ids = _column(hp, rp, ["spike_id"], args.pred)
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ConfigError(f"no truth for spikes {missing[:5]}")
        true = [by_id[i] for i in ids]
    report = compute_metrics(np.asarray(pred, float), np.asarray(true, float))
    _emit(report.as_dict(), args.out)


def cmd_bench(args):
    from .io import load_model
    from .pipeline import benchmark_inference
    cfg = _config(args)
    image = load_model(_need(args.image_model, "image model checkpoint"))
    cloud = load_model(_need(args.cloud_model, "cloud model checkpoint"))
    stats = benchmark_inference(image, cloud, _dataset(cfg), args.repetitions, args.n_spikes)
    _emit(stats.as_dict(), args.out)


def cmd_run(args):
    from .pipeline import run_pipeline
    cfg = _config(args)
    manifest = run_pipeline(cfg)
    print(f"results in {os.path.join(cfg.out_dir, 'results.csv')}; config {manifest.config_hash}")


def build_parser():
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--threads", type=int, help="upper bound on worker threads")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="spikekd", parents=[common],
                                     description="Spike pairing, point-cloud features and "
                                                 "distilled volume regression.")
    parser.set_defaults(seed=None, threads=None, out_dir=None, config=None, verbose=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    add("synth", cmd_synth, "generate a synthetic plot")
    p = add("pair", cmd_pair, "pair detections across images")
    p.add_argument("--detections", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--min-views", type=int, default=None)
    p.add_argument("--out", default=None)
    p = add("score", cmd_score, "score clusters against a synthetic scene")
    p.add_argument("--clusters", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--exclude-border", action="store_true")
    p.add_argument("--out", default=None)
    p = add("featurize", cmd_featurize, "distance histograms of one cloud")
    p.add_argument("--cloud", required=True, help=".xyz (ASCII) or .bin")
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--width", type=float, default=60.0)
    p.add_argument("--voxel-size", type=float, default=2.0)
    p.add_argument("--n-points", type=int, default=1000)
    p.add_argument("--out", default=None)
    for name, fn, help_ in (("train-teacher", cmd_train_teacher, "train the scan-cloud teacher"),
                            ("train-student", cmd_train_student, "train the field-cloud student"),
                            ("train-rt", cmd_train_rt, "train the regulated image model"),
                            ("train-ensemble", cmd_train_ensemble, "train the fusion head"),
                            ("distill", cmd_distill, "distill the ensemble into an image model")):
        p = add(name, fn, help_)
        p.add_argument("--out", required=True, help="checkpoint path")
        if name == "train-student":
            p.add_argument("--teacher", default=None, help="teacher checkpoint; omit for no KD")
        if name == "train-rt":
            p.add_argument("--view-weight", type=float, default=1.0)
        if name == "train-ensemble":
            p.add_argument("--rt", required=True)
            p.add_argument("--student", required=True)
        if name == "distill":
            p.add_argument("--mode", choices=("feature", "label"), required=True)
            p.add_argument("--ensemble", required=True)
    p = add("eval", cmd_eval, "metrics and per-spike predictions of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p = add("metrics", cmd_metrics, "MAE, r and MAPE of two CSV columns")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p = add("bench", cmd_bench, "per-spike inference latency, image vs cloud path")
    p.add_argument("--image-model", required=True)
    p.add_argument("--cloud-model", required=True)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--n-spikes", type=int, default=20)
    p.add_argument("--out", default=None)
    add("run", cmd_run, "full pipeline")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # noqa: BLE001 - any other failure is a stage failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
