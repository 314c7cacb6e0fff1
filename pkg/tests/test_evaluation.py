import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from ctmix.augment import AugmentationPolicy
from ctmix.errors import InvalidArgument, UndefinedMetric
from ctmix.evaluation import (
    CAMVolume,
    cam_from_grid,
    compute_cam,
    ensemble_predict,
    evaluate_model,
    f1_scores,
    macro_f1,
    normalize_heatmap,
    predict_plain,
    predict_tta,
    roc_auc,
    roc_curve_auc,
    write_cam_overlays,
    write_eval_report,
)
from ctmix.modeling import EncoderConfig, build_model
from ctmix.volumes import CTVolume, ScanRecord

TOY_ENCODER = EncoderConfig(
    stage_depths=(1, 1, 1, 1), channels=(8, 16, 24, 32),
    attention_heads=4, global_stage_start=3, d_e=32, d_p=16,
)

POLICY = AugmentationPolicy(
    mode="volume3d", base_shape=(4, 16, 16), crop_scale_range=(1.0, 1.0),
    depth_crop=4, rotation_degrees=(0.0, 0.0), brightness_jitter=0.0,
    contrast_jitter=0.0, train_resolution=16, eval_resolution=16,
)


def f1_formula_oracle(tp, fp, fn):
    p = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    r = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    return 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0


class TestF1Scores:
    def test_challenge_pair_macro(self):
        assert abs(macro_f1((97.31, 80.92)) - 89.11) <= 0.01

    def test_perfect_predictions(self):
        labels = [0, 1, 0, 1, 1]
        report = f1_scores(labels, labels)
        assert report.f1_per_class == (1.0, 1.0)
        assert report.macro_f1 == 1.0
        assert 100.0 * report.macro_f1 == 100.0

    def test_known_confusion_counts(self):
        # class 1: TP=8, FP=2, FN=1 -> F1 = 16/19
        labels = [1] * 9 + [0] * 5
        preds = [1] * 8 + [0] + [1] * 2 + [0] * 3
        report = f1_scores(preds, labels)
        assert report.confusion[1][1] == 8
        assert report.confusion[0][1] == 2
        assert report.confusion[1][0] == 1
        np.testing.assert_allclose(report.f1_per_class[1], 16 / 19, atol=1e-12)

    def test_random_confusions_match_formula_oracle_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(4, 60))
            labels = rng.integers(0, 2, size=n)
            preds = rng.integers(0, 2, size=n)
            report = f1_scores(preds, labels)
            for c in (0, 1):
                tp = int(np.sum((labels == c) & (preds == c)))
                fp = int(np.sum((labels != c) & (preds == c)))
                fn = int(np.sum((labels == c) & (preds != c)))
                assert report.f1_per_class[c] == f1_formula_oracle(tp, fp, fn)
            assert report.macro_f1 == np.mean(report.f1_per_class)
            assert int(np.sum(report.confusion)) == n

    def test_zero_division_convention(self):
        report = f1_scores([0, 0, 0], [0, 0, 0])
        assert report.f1_per_class == (1.0, 0.0)
        assert report.macro_f1 == 0.5

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgument):
            f1_scores([], [])

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgument):
            f1_scores([0, 1], [0])


class TestRocAuc:
    def test_perfect_separation(self):
        scores = [0.9, 0.8, 0.2, 0.1]
        labels = [1, 1, 0, 0]
        _, auc = roc_curve_auc(scores, np.array(labels) == 1)
        assert auc == 1.0

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(1)
        scores = rng.random(4000)
        labels = rng.integers(0, 2, size=4000)
        _, auc = roc_curve_auc(scores, labels == 1)
        assert abs(auc - 0.5) < 0.05

    def test_ties_averaged(self):
        points, auc = roc_curve_auc([0.5, 0.5], np.array([False, True]))
        assert auc == 0.5
        assert points == [(0.0, 0.0), (1.0, 1.0)]

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.random(200)
        labels = rng.integers(0, 2, size=200) == 1
        _, base = roc_curve_auc(scores, labels)
        _, cubed = roc_curve_auc(scores**3, labels)
        assert base == cubed

    def test_one_class_undefined(self):
        with pytest.raises(UndefinedMetric):
            roc_curve_auc([0.3, 0.4], np.array([True, True]))

    def test_per_class_wrapper(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.4, 0.6]])
        curves, aucs = roc_auc(probs, [0, 1, 0, 1])
        assert aucs == (1.0, 1.0)
        assert set(curves) == {"0", "1"}
        assert curves["1"][0] == (0.0, 0.0) and curves["1"][-1] == (1.0, 1.0)


class FixedProbModel(nn.Module):
    """Stub producing the same probability vector for every input volume."""

    def __init__(self, probs):
        super().__init__()
        self.register_buffer("logits", torch.log(torch.tensor(probs, dtype=torch.float32)))
        self.dummy = nn.Parameter(torch.zeros(1))

    def encode(self, x):
        return torch.zeros(len(x), 1) + 0.0 * self.dummy

    def classify(self, r):
        return self.logits.expand(len(r), 2)


def random_volume(shape=(4, 16, 16), seed=0):
    rng = np.random.default_rng(seed)
    return CTVolume(rng.random(shape, dtype=np.float32), f"v{seed}")


class TestPredictTTA:
    def test_single_view_degenerate_equals_plain(self):
        model = build_model(TOY_ENCODER, seed=0)
        vol = random_volume(seed=3)
        tta = predict_tta(model, vol, POLICY, n_views=1, seed=0)
        plain = predict_plain(model, vol, POLICY)
        np.testing.assert_allclose(tta, plain, atol=1e-6)

    def test_output_on_simplex(self):
        model = build_model(TOY_ENCODER, seed=1)
        vol = random_volume(seed=4)
        policy = AugmentationPolicy(
            mode="volume3d", base_shape=(4, 16, 16), crop_scale_range=(0.7, 1.0),
            depth_crop=4, rotation_degrees=(-10.0, 10.0), brightness_jitter=0.2,
            contrast_jitter=0.2, train_resolution=16, eval_resolution=16,
        )
        probs = predict_tta(model, vol, policy, n_views=3, seed=1)
        np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-6)
        assert (probs >= 0).all()

    def test_deterministic_given_seed(self):
        model = build_model(TOY_ENCODER, seed=2)
        vol = random_volume(seed=5)
        a = predict_tta(model, vol, POLICY, n_views=2, seed=9)
        b = predict_tta(model, vol, POLICY, n_views=2, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_invalid_views(self):
        model = build_model(TOY_ENCODER, seed=2)
        with pytest.raises(InvalidArgument):
            predict_tta(model, random_volume(), POLICY, n_views=0)


class TestEnsemblePredict:
    def test_single_model_identity(self):
        model = FixedProbModel([0.8, 0.2])
        vol = random_volume(seed=6)
        single = ensemble_predict([model], vol, POLICY)
        alone = predict_plain(model, vol, POLICY)
        np.testing.assert_array_equal(single, alone)

    def test_two_model_average(self):
        models = [FixedProbModel([0.9, 0.1]), FixedProbModel([0.5, 0.5])]
        out = ensemble_predict(models, random_volume(seed=7), POLICY)
        np.testing.assert_allclose(out, [0.7, 0.3], atol=1e-6)

    def test_three_model_mean_is_exact(self):
        models = [FixedProbModel(p) for p in ([0.9, 0.1], [0.6, 0.4], [0.2, 0.8])]
        vol = random_volume(seed=8)
        per_model = [predict_plain(m, vol, POLICY) for m in models]
        out = ensemble_predict(models, vol, POLICY)
        np.testing.assert_array_equal(out, np.mean(per_model, axis=0))

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgument):
            ensemble_predict([], random_volume(), POLICY)


class TestEvaluateModel:
    def test_report_fields(self):
        model = build_model(TOY_ENCODER, seed=3)
        volumes = {f"s{i}": random_volume(seed=10 + i) for i in range(6)}
        records = [ScanRecord(f"s{i}", i % 2, "") for i in range(6)]
        report, probs = evaluate_model(
            model, records, lambda r: volumes[r.scan_id], POLICY
        )
        assert report.n_samples == 6
        assert report.auc_per_class is not None
        for row in probs.values():
            np.testing.assert_allclose(row.sum(), 1.0, atol=1e-6)


class TestCAM:
    def test_hand_built_grid_weight_one(self):
        grid = np.arange(24, dtype=np.float64).reshape(1, 2, 3, 4)
        raw = cam_from_grid(grid, np.array([1.0]))
        np.testing.assert_array_equal(raw, grid[0])
        normalized = normalize_heatmap(raw)
        assert normalized.min() == 0.0 and normalized.max() == 1.0

    def test_negative_evidence_clipped(self):
        grid = np.array([[[[1.0, -2.0]]]])
        raw = cam_from_grid(grid, np.array([1.0]))
        np.testing.assert_array_equal(raw, [[[1.0, 0.0]]])

    def test_zero_weights_all_zero_heatmap(self):
        model = build_model(TOY_ENCODER, seed=4)
        with torch.no_grad():
            model.classifier.weight.zero_()
            model.classifier.bias.zero_()
        cam = compute_cam(model, random_volume(seed=20), 1)
        assert cam.heatmap.shape == (4, 16, 16)
        np.testing.assert_array_equal(cam.heatmap, np.zeros((4, 16, 16), dtype=np.float32))

    def test_positive_weight_rescaling_invariance(self):
        model = build_model(TOY_ENCODER, seed=5)
        vol = random_volume(seed=21)
        cam1 = compute_cam(model, vol, 1)
        with torch.no_grad():
            model.classifier.weight.mul_(3.5)
        cam2 = compute_cam(model, vol, 1)
        np.testing.assert_allclose(cam1.heatmap, cam2.heatmap, atol=1e-5)

    def test_heatmap_range(self):
        model = build_model(TOY_ENCODER, seed=6)
        cam = compute_cam(model, random_volume(seed=22), 0)
        assert cam.heatmap.min() >= 0.0 and cam.heatmap.max() <= 1.0

    def test_overlay_files(self, tmp_path):
        vol = random_volume(seed=23)
        cam = CAMVolume(heatmap=np.zeros((4, 16, 16), dtype=np.float32), target_class=1)
        paths = write_cam_overlays(vol, cam, tmp_path)
        assert len(paths) == 4
        assert (tmp_path / vol.scan_id / "cam_0000.png").exists()


class TestReportSerialization:
    def test_json_and_roc_csv(self, tmp_path):
        labels = [0, 1, 0, 1]
        report = f1_scores([0, 1, 1, 1], labels)
        curves, aucs = roc_auc(
            np.array([[0.9, 0.1], [0.3, 0.7], [0.6, 0.4], [0.2, 0.8]]), labels
        )
        report.auc_per_class = aucs
        report.roc_points = curves
        written = write_eval_report(report, tmp_path, config_hash="deadbeef")
        payload = json.loads((tmp_path / "eval_report.json").read_text())
        assert payload["config_hash"] == "deadbeef"
        assert payload["macro_f1"] == report.macro_f1
        roc_lines = (tmp_path / "roc_class1.csv").read_text().splitlines()
        assert roc_lines[0] == "fpr,tpr"
        assert len(roc_lines) > 2
