import json

import numpy as np
import pytest

from spikekd import SceneConfig, TrainConfig, generate_scene, train_regulated, train_teacher
from spikekd.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from spikekd.io import (load_model, read_cameras, read_checkpoint, read_cloud, read_clusters,
                        read_csv, read_detections, read_scene, save_model, write_cameras,
                        write_checkpoint, write_cloud_bin, write_clusters, write_csv,
                        write_detections, write_scene, write_xyz)
from spikekd.pairing import ClusterSet
from spikekd.training import TEACHER_BINS

FAST = TrainConfig(epochs=3, image_epochs=3, ensemble_epochs=3, points_per_step=64)
SMALL = {"scene": {"n_spikes": 8}, "dataset": {"n_spikes": 10, "n_unlabeled": 5,
                                               "surface_points": 3000},
         "train": {"epochs": 2, "image_epochs": 2, "ensemble_epochs": 2}}


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(n_spikes=15, rng_seed=2))


class TestRoundTrips:
    def test_cameras(self, tmp_path, scene):
        write_cameras(tmp_path / "c.json", scene.cameras)
        for a, b in zip(scene.cameras, read_cameras(tmp_path / "c.json")):
            assert a.camera_id == b.camera_id and a.image_size == b.image_size
            np.testing.assert_array_equal(a.projection_matrix, b.projection_matrix)

    def test_camera_units(self, tmp_path, scene):
        write_cameras(tmp_path / "c.json", scene.cameras)
        data = json.loads((tmp_path / "c.json").read_text())
        data["units"] = "m"
        (tmp_path / "c.json").write_text(json.dumps(data))
        with pytest.raises(ValueError, match="units"):
            read_cameras(tmp_path / "c.json")

    def test_detections(self, tmp_path, scene):
        write_detections(tmp_path / "d.json", scene.detections, "abc")
        assert read_detections(tmp_path / "d.json") == scene.detections

    def test_bare_detections(self, tmp_path, scene):
        from spikekd.io import detections_to_dict
        (tmp_path / "d.json").write_text(json.dumps(detections_to_dict(scene.detections)))
        assert read_detections(tmp_path / "d.json") == scene.detections

    def test_clusters(self, tmp_path):
        cs = ClusterSet([frozenset({"a", "b"}), frozenset({"c"})], 3, 2)
        write_clusters(tmp_path / "k.json", cs)
        back = read_clusters(tmp_path / "k.json")
        assert set(back.clusters) == set(cs.clusters)
        assert (back.run_count, back.agreement_threshold) == (3, 2)

    def test_scene(self, tmp_path, scene):
        write_scene(tmp_path / "s.json", scene)
        back = read_scene(tmp_path / "s.json")
        assert back.truth == scene.truth and back.border == scene.border
        assert back.detections == scene.detections
        np.testing.assert_array_equal([s.volume for s in back.spikes],
                                      [s.volume for s in scene.spikes])

    def test_clouds(self, tmp_path):
        pts = np.random.default_rng(0).normal(scale=100.0, size=(50, 3))
        write_xyz(tmp_path / "c.xyz", pts)
        write_cloud_bin(tmp_path / "c.bin", pts)
        np.testing.assert_array_equal(read_cloud(tmp_path / "c.xyz"), pts)
        np.testing.assert_array_equal(read_cloud(tmp_path / "c.bin"), pts)

    def test_truncated_bin(self, tmp_path):
        write_cloud_bin(tmp_path / "c.bin", np.zeros((4, 3)))
        data = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(data[:-8])
        with pytest.raises(ValueError):
            read_cloud(tmp_path / "c.bin")

    def test_checkpoint(self, tmp_path):
        params = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([1.5]), "s": np.array(2.0)}
        write_checkpoint(tmp_path / "m.ckpt", "toy", params, {"x": 1}, "h")
        kind, back, meta, header = read_checkpoint(tmp_path / "m.ckpt")
        assert (kind, meta, header["config_hash"]) == ("toy", {"x": 1}, "h")
        for k in params:
            np.testing.assert_array_equal(back[k], params[k])

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="magic"):
            read_checkpoint(tmp_path / "x.ckpt")

    def test_models(self, tmp_path, tiny_dataset):
        teacher = train_teacher(tiny_dataset, FAST)
        rt = train_regulated(tiny_dataset, FAST)
        save_model(tmp_path / "t.ckpt", teacher, role="teacher")
        save_model(tmp_path / "r.ckpt", rt)
        t2, role = load_model(tmp_path / "t.ckpt", return_role=True)
        assert role == "teacher"
        h = tiny_dataset.histograms("scan", TEACHER_BINS)[:5]
        np.testing.assert_array_equal(t2.predict(h), teacher.predict(h))
        v = tiny_dataset.views(range(5))
        np.testing.assert_array_equal(load_model(tmp_path / "r.ckpt").predict(v), rt.predict(v))

    def test_csv(self, tmp_path):
        write_csv(tmp_path / "r.csv", ["a", "b"], [["x", 0.1], ["y", 2.5]], "hash")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "# format_version=1.0 config_hash=hash"
        header, rows = read_csv(tmp_path / "r.csv")
        assert header == ["a", "b"] and rows == [["x", "0.1"], ["y", "2.5"]]


class TestCli:
    def test_synth_pair_score(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(SMALL))
        out = str(tmp_path)
        assert main(["synth", "--config", str(cfg), "--out-dir", out]) == EXIT_OK
        assert main(["pair", "--detections", f"{out}/detections.json",
                     "--cameras", f"{out}/cameras.json", "--out-dir", out]) == EXIT_OK
        capsys.readouterr()
        assert main(["score", "--clusters", f"{out}/clusters.json",
                     "--scene", f"{out}/scene.json"]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert 0.0 <= report["overall"]["precision"] <= 1.0

    def test_featurize(self, tmp_path):
        pts = np.random.default_rng(0).normal(scale=20.0, size=(300, 3))
        write_xyz(tmp_path / "c.xyz", pts)
        assert main(["featurize", "--cloud", str(tmp_path / "c.xyz"), "--bins", "10",
                     "--out", str(tmp_path / "h.csv")]) == EXIT_OK
        header, rows = read_csv(tmp_path / "h.csv")
        assert len(header) == 11 and len(rows) <= 300

    def test_metrics(self, tmp_path, capsys):
        write_csv(tmp_path / "p.csv", ["spike_id", "predicted"], [["a", 1.0], ["b", 3.0]])
        write_csv(tmp_path / "t.csv", ["spike_id", "true"], [["b", 2.0], ["a", 1.0]])
        assert main(["metrics", "--pred", str(tmp_path / "p.csv"),
                     "--truth", str(tmp_path / "t.csv")]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["mae"] == pytest.approx(0.5)

    def test_train_and_eval(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(SMALL))
        ckpt = str(tmp_path / "teacher.ckpt")
        common = ["--config", str(cfg), "--out-dir", str(tmp_path)]
        assert main(["train-teacher", "--out", ckpt] + common) == EXIT_OK
        capsys.readouterr()
        assert main(["eval", "--model", ckpt, "--split", "train"] + common) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["role"] == "teacher"

    def test_missing_input_is_config_error(self, tmp_path):
        code = main(["pair", "--detections", str(tmp_path / "none.json"),
                     "--cameras", str(tmp_path / "none.json")])
        assert code == EXIT_CONFIG

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"rng_seed": -1}))
        assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
        cfg.write_text(json.dumps({"bogus": 1}))
        assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_stage_failure(self, tmp_path):
        (tmp_path / "bad.xyz").write_text("1 2\n3 4\n")
        assert main(["featurize", "--cloud", str(tmp_path / "bad.xyz")]) == EXIT_STAGE

    def test_argparse_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["pair"])
        assert exc.value.code == 2
