import json
import time

import numpy as np
import pytest

from spikekd import (PipelineConfig, TrainConfig, benchmark_inference, run_pipeline,
                     train_field_baseline, train_regulated)
from spikekd.exceptions import ConfigError, StageError
from spikekd.io import read_csv
from spikekd.pipeline import cloud_path_latency

SMOKE = dict(rng_seed=3, scene={"n_spikes": 10},
             dataset={"n_spikes": 10, "n_unlabeled": 5, "surface_points": 5000},
             train={"epochs": 3, "image_epochs": 3, "ensemble_epochs": 3})


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    runs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        manifest = run_pipeline(PipelineConfig.from_dict({**SMOKE, "out_dir": str(out)}))
        runs.append((out, manifest, time.perf_counter() - t0))
    return runs


def test_smoke_run_fast(smoke_runs):
    out, manifest, seconds = smoke_runs[0]
    assert seconds < 60
    header, rows = read_csv(out / "results.csv")
    assert header == ["model", "input", "mae", "r", "mape", "n"]
    assert [r[0] for r in rows] == ["teacher", "student_no_kd", "student_kd", "rt_unregulated",
                                    "rt", "ensemble", "rt_feature_kd", "rt_label_kd"]
    assert json.loads((out / "manifest.json").read_text())["config_hash"] == manifest.config_hash


def test_smoke_run_deterministic(smoke_runs):
    (a, ma, _), (b, mb, _) = smoke_runs
    assert ma.outputs == mb.outputs
    for name in ma.outputs:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_config_hash_ignores_out_dir():
    a = PipelineConfig.from_dict({**SMOKE, "out_dir": "x", "threads": 2})
    b = PipelineConfig.from_dict({**SMOKE, "out_dir": "y"})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != PipelineConfig.from_dict({**SMOKE, "rng_seed": 4}).config_hash()


def test_missing_camera_file(tmp_path):
    with pytest.raises(ConfigError, match="camera file"):
        PipelineConfig.from_dict({"scene": {"camera_file": str(tmp_path / "none.json")}})
    assert not any(tmp_path.iterdir())


def test_invalid_values():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"train": {"learning_rate": -1.0}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"dataset": {"n_spikes": 0}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"eval_split": "holdout"})


def test_stage_failure_names_stage(tmp_path):
    cfg = PipelineConfig.from_dict({**SMOKE, "pairing": {"min_views": 0},
                                    "out_dir": str(tmp_path)})
    with pytest.raises(StageError) as exc:
        run_pipeline(cfg)
    assert exc.value.stage == "pair"
    assert (tmp_path / "scene.json").exists()


@pytest.fixture(scope="module")
def bench_models(tiny_dataset):
    cfg = TrainConfig(epochs=2, image_epochs=2, points_per_step=64)
    return train_regulated(tiny_dataset, cfg), train_field_baseline(tiny_dataset, cfg)


def test_benchmark_single_repetition(tiny_dataset, bench_models):
    stats = benchmark_inference(*bench_models, tiny_dataset, repetitions=1, n_spikes=3)
    assert stats.repetitions == 1 and stats.n_spikes == 3
    assert stats.image_median == stats.image_p95 > 0
    with pytest.raises(ValueError):
        benchmark_inference(*bench_models, tiny_dataset, repetitions=0)


@pytest.mark.slow
def test_cloud_path_quadratic(bench_models):
    _, cloud = bench_models
    rng = np.random.default_rng(0)
    clouds = {n: [rng.normal(scale=20.0, size=(n, 3))] for n in (1000, 2000)}
    cloud_path_latency(cloud, clouds[1000], repetitions=3)
    # interleaved rounds; timing noise only adds time, so keep the fastest round
    t = {n: np.inf for n in clouds}
    for _ in range(7):
        for n, c in clouds.items():
            t[n] = min(t[n], cloud_path_latency(cloud, c, repetitions=5))
    assert 3.0 <= t[2000] / t[1000] <= 5.0
