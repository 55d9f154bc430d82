import itertools
import math

import numpy as np
import pytest

from spikekd import ClusterSet, SceneConfig, generate_scene, score_pairing, view_count_breakdown
from spikekd.io import write_scene
from spikekd.pairing import pair_detections
from spikekd.pointcloud import sample_ellipsoid_surface
from spikekd.scene import projected_box


class TestGenerateScene:
    def test_single_central_spike(self):
        scene = generate_scene(SceneConfig(n_spikes=1, extent=(1.0, 1.0, 1.0), box_noise=0.0))
        boxes = scene.boxes()
        assert len(boxes) == 12
        assert {scene.truth[b.detection_id] for b in boxes} == {"s0000"}
        assert scene.view_counts["s0000"] == 12

    def test_upright_zero_sigma(self):
        scene = generate_scene(SceneConfig(n_spikes=10, upright_angle_sigma=0.0, rng_seed=1))
        for s in scene.spikes:
            np.testing.assert_allclose(s.orientation, np.eye(3), atol=1e-15)

    def test_random_pose_orthonormal(self):
        scene = generate_scene(SceneConfig(n_spikes=10, pose_mode="random", rng_seed=1))
        for s in scene.spikes:
            np.testing.assert_allclose(s.orientation.T @ s.orientation, np.eye(3), atol=1e-12)
            assert np.linalg.det(s.orientation) == pytest.approx(1.0)

    def test_volume_formula(self):
        scene = generate_scene(SceneConfig(n_spikes=20, rng_seed=2))
        for s in scene.spikes:
            a, b, c = s.semi_axes
            assert s.volume == pytest.approx(4.0 / 3.0 * math.pi * a * b * c, rel=1e-9)

    def test_box_contains_surface_samples(self):
        scene = generate_scene(SceneConfig(n_spikes=5, pose_mode="random", rng_seed=3))
        for spike in scene.spikes:
            pts = sample_ellipsoid_surface(spike, 1000, rng_seed=4).points
            for cam in scene.cameras:
                bounds = projected_box(cam, spike)
                assert bounds is not None
                px, _ = cam.project_many(pts)
                assert np.all(px >= bounds[:2] - 1e-6) and np.all(px <= bounds[2:] + 1e-6)
                # tight: the outline touches the box on every side
                np.testing.assert_allclose(px.min(axis=0), bounds[:2], atol=0.05 * np.ptp(px))
                np.testing.assert_allclose(px.max(axis=0), bounds[2:], atol=0.05 * np.ptp(px))

    def test_boxes_within_image(self):
        scene = generate_scene(SceneConfig(n_spikes=50, rng_seed=5))
        for cam in scene.cameras:
            w, h = cam.image_size
            for b in scene.detections[cam.camera_id]:
                assert 0 <= b.min_x < b.max_x <= w and 0 <= b.min_y < b.max_y <= h

    def test_deterministic_json(self, tmp_path):
        paths = []
        for name in ("a", "b"):
            scene = generate_scene(SceneConfig(n_spikes=30, rng_seed=6))
            paths.append(tmp_path / f"{name}.json")
            write_scene(paths[-1], scene)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_extent_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            generate_scene(SceneConfig(n_spikes=50, extent=(10.0, 10.0, 10.0), min_spacing=15.0))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SceneConfig(n_spikes=0)
        with pytest.raises(ValueError):
            SceneConfig(pose_mode="sideways")


def brute_force(predicted, truth):
    labels = predicted.labels()
    tp = fp = fn = 0
    for a, b in itertools.combinations(sorted(truth), 2):
        same_spike = truth[a] == truth[b]
        same_cluster = a in labels and labels.get(a) == labels.get(b)
        tp += same_spike and same_cluster
        fp += (not same_spike) and same_cluster
        fn += same_spike and not same_cluster
    return tp, fp, fn


class TestScorePairing:
    TRUTH = {"a1": "A", "a2": "A", "a3": "A", "b1": "B", "b2": "B", "c1": "C"}

    def test_perfect(self):
        cs = ClusterSet([{"a1", "a2", "a3"}, {"b1", "b2"}, {"c1"}])
        s = score_pairing(cs, self.TRUTH)
        assert (s.precision, s.recall) == (1.0, 1.0)

    def test_all_singletons(self):
        s = score_pairing(ClusterSet([{d} for d in self.TRUTH]), self.TRUTH)
        assert s.recall == 0.0
        assert s.precision == 1.0 and not s.precision_defined

    def test_hand_built_three(self):
        truth = {"x": "A", "y": "A", "z": "B"}
        s = score_pairing(ClusterSet([{"x", "y", "z"}]), truth)
        # pairs: (x,y) TP, (x,z) FP, (y,z) FP
        assert (s.true_positives, s.false_positives, s.false_negatives) == (1, 2, 0)
        assert s.precision == pytest.approx(1.0 / 3.0)
        assert s.recall == 1.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            truth = {f"d{i}": f"s{rng.integers(6)}" for i in range(15)}
            labels = rng.integers(5, size=15)
            groups = {}
            for d, lab in zip(truth, labels):
                groups.setdefault(lab, set()).add(d)
            cs = ClusterSet(list(groups.values()))
            s = score_pairing(cs, truth)
            assert (s.true_positives, s.false_positives, s.false_negatives) == brute_force(cs, truth)

    def test_counts_non_trivial_pairs(self):
        cs = ClusterSet([{"a1", "a2", "b1"}, {"a3"}, {"b2", "c1"}])
        s = score_pairing(cs, self.TRUTH)
        labels = cs.labels()
        nontrivial = sum(1 for a, b in itertools.combinations(self.TRUTH, 2)
                         if self.TRUTH[a] == self.TRUTH[b] or labels[a] == labels[b])
        assert s.true_positives + s.false_positives + s.false_negatives == nontrivial

    def test_exclude_border(self):
        cs = ClusterSet([{"a1", "a2", "a3"}, {"b1", "b2", "c1"}])
        border = {d: d == "c1" for d in self.TRUTH}
        assert score_pairing(cs, self.TRUTH, border, exclude_border=False).false_positives == 2
        assert score_pairing(cs, self.TRUTH, border, exclude_border=True).false_positives == 0


class TestViewBreakdown:
    def test_full_view_spike_bins(self):
        truth = {f"d{i}": "A" for i in range(12)}
        cs = ClusterSet([set(truth)])
        out = view_count_breakdown(cs, truth, {"A": 12})
        assert out["6-9"].true_positives == 0
        assert out["10-12"].true_positives == out["12"].true_positives == 66

    def test_bins_partition(self):
        scene = generate_scene(SceneConfig(n_spikes=60, rng_seed=7))
        cs, _ = pair_detections(scene.detections, scene.cameras, rng_seed=7)
        out = view_count_breakdown(cs, scene.truth, scene.view_counts)
        wide = view_count_breakdown(cs, scene.truth, scene.view_counts, bins={"6+": (6, 99)})["6+"]
        for field in ("true_positives", "false_positives", "false_negatives"):
            assert (getattr(out["6-9"], field) + getattr(out["10-12"], field)
                    == getattr(wide, field))


def test_upright_recall_not_below_random():
    recalls = {"upright": [], "random": []}
    for mode in recalls:
        for seed in range(10):
            scene = generate_scene(SceneConfig(n_spikes=100, pose_mode=mode, rng_seed=seed))
            cs, _ = pair_detections(scene.detections, scene.cameras, rng_seed=seed)
            score = view_count_breakdown(cs, scene.truth, scene.view_counts)["12"]
            recalls[mode].append(score.recall)
    assert np.mean(recalls["upright"]) >= np.mean(recalls["random"])
