import numpy as np
import pytest

from streetstudy.baselines import (ConstantPredictor, CountFeatures, LinearModel,
                                   count_matrix, fit_constant, fit_count_regressor,
                                   predict)
from streetstudy.dataset import BoxAnnotation
from streetstudy.errors import ValidationError
from streetstudy.metrics import DetectionRecord


class TestFitConstant:
    def test_spec_example(self):
        labels = [0, 0, 2, 6]
        assert fit_constant(labels, "mode").value == 0.0
        assert fit_constant(labels, "median").value == 1.0
        assert fit_constant(labels, "mean").value == 2.0

    def test_singleton(self):
        for stat in ("mode", "median", "mean"):
            assert fit_constant([5], stat).value == 5.0

    def test_mode_tie_takes_smallest(self):
        assert fit_constant([3, 3, 1, 1, 2], "mode").value == 1.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 30, 100).tolist()
        shuffled = list(labels)
        rng.shuffle(shuffled)
        for stat in ("mode", "median", "mean"):
            assert fit_constant(labels, stat).value == fit_constant(shuffled, stat).value

    def test_errors(self):
        with pytest.raises(ValidationError):
            fit_constant([], "mean")
        with pytest.raises(ValidationError):
            fit_constant([1], "max")


def feature_set(n=60, d=6, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 12, size=(n, d)).astype(float)
    return CountFeatures([f"i{k}" for k in range(n)], X), rng


class TestCountRegressor:
    def test_exact_recovery_noiseless(self):
        feats, rng = feature_set()
        w_true = np.array([1.5, -2.0, 0.3, 0.0, 4.0, -0.7])
        y = feats.matrix @ w_true + 3.0
        model = fit_count_regressor(feats, y, l2=0.0)
        w_orig = model.weights / model.feature_stds
        assert np.abs(w_orig - w_true).max() < 1e-8
        assert not model.ridge_fallback

    def test_constant_labels_give_zero_weights(self):
        feats, _ = feature_set()
        model = fit_count_regressor(feats, np.full(60, 7.0), l2=1.0)
        assert np.abs(model.weights).max() < 1e-10
        assert model.intercept == 7.0

    def test_training_mse_never_worse_than_mean(self):
        for seed in range(5):
            feats, rng = feature_set(seed=seed)
            y = rng.uniform(0, 30, 60)
            model = fit_count_regressor(feats, y, l2=1.0)
            preds_raw = ((feats.matrix - model.feature_means) / model.feature_stds
                         ) @ model.weights + model.intercept
            assert np.mean((preds_raw - y) ** 2) <= np.mean((y - y.mean()) ** 2) + 1e-12

    def test_collinear_features_fall_back(self):
        rng = np.random.default_rng(1)
        base = rng.integers(0, 9, size=(40, 1)).astype(float)
        X = np.column_stack([base, base * 2.0, rng.integers(0, 9, 40)])
        y = X @ np.array([1.0, 0.5, 2.0]) + 1.0
        model = fit_count_regressor(CountFeatures([f"i{k}" for k in range(40)], X), y, l2=0.0)
        assert model.ridge_fallback
        assert model.l2 == 1e-8

    def test_constant_feature_flagged(self):
        X = np.column_stack([np.full(30, 4.0), np.arange(30, dtype=float)])
        y = np.arange(30, dtype=float)
        model = fit_count_regressor(CountFeatures([f"i{k}" for k in range(30)], X), y, l2=1.0)
        assert model.constant_features == [0]

    def test_unique_minimizer_for_positive_l2(self):
        feats, rng = feature_set(seed=3)
        y = rng.uniform(0, 20, 60)
        model = fit_count_regressor(feats, y, l2=2.0)
        Xs = (feats.matrix - model.feature_means) / model.feature_stds

        def objective(w):
            r = y - (Xs @ w + model.intercept)
            return float(r @ r + 2.0 * w @ w)

        base = objective(model.weights)
        for j in range(len(model.weights)):
            for delta in (1e-3, -1e-3):
                w = model.weights.copy()
                w[j] += delta
                assert objective(w) > base

    def test_errors(self):
        feats, _ = feature_set(n=1, d=2)
        with pytest.raises(ValidationError):
            fit_count_regressor(feats, np.array([1.0]), l2=1.0)
        feats, _ = feature_set()
        with pytest.raises(ValidationError):
            fit_count_regressor(feats, np.zeros(10), l2=1.0)
        with pytest.raises(ValidationError):
            fit_count_regressor(feats, np.zeros(60), l2=-1.0)


class TestPredict:
    def test_constant_mean_model(self):
        model = fit_constant([2, 4, 6], "mean")
        assert np.all(model.predict(5) == 4.0)

    def test_clamped_at_zero(self):
        model = LinearModel(np.zeros(3), -3.0, np.zeros(3), np.ones(3), 1.0)
        assert predict(model, np.array([1.0, 2.0, 3.0])) == 0.0

    def test_hand_set_affine(self):
        model = LinearModel(np.array([2.0, -1.0]), 0.5,
                            np.zeros(2), np.ones(2), 1.0)
        x = np.array([3.0, 1.0])
        assert predict(model, x) == pytest.approx(2 * 3 - 1 + 0.5)

    def test_batch_and_length_mismatch(self):
        model = LinearModel(np.array([1.0, 1.0]), 0.0, np.zeros(2), np.ones(2), 1.0)
        out = predict(model, np.array([[1.0, 2.0], [3.0, -9.0]]))
        assert out.tolist() == [3.0, 0.0]
        with pytest.raises(ValidationError):
            predict(model, np.array([1.0, 2.0, 3.0]))

    def test_json_round_trip(self):
        feats, rng = feature_set(seed=4)
        y = rng.uniform(0, 10, 60)
        model = fit_count_regressor(feats, y, l2=0.5)
        clone = LinearModel.from_dict(model.to_dict())
        x = feats.matrix[7]
        assert predict(clone, x) == predict(model, x)


class TestCountMatrix:
    def test_ground_truth_counts(self):
        boxes = [BoxAnnotation("a0", "i0", 0, (0, 0, 5, 5)),
                 BoxAnnotation("a1", "i0", 2, (0, 0, 5, 5)),
                 BoxAnnotation("a2", "i1", 0, (0, 0, 5, 5))]
        mat = count_matrix(["i0", "i1"], boxes, 3)
        assert mat.tolist() == [[1.0, 0.0, 1.0], [1.0, 0.0, 0.0]]

    def test_detection_score_threshold(self):
        dets = [DetectionRecord("i0", 0, (0, 0, 5, 5), 0.9),
                DetectionRecord("i0", 0, (0, 0, 5, 5), 0.3)]
        mat = count_matrix(["i0"], dets, 1, score_threshold=0.5)
        assert mat.tolist() == [[1.0]]
        mat_all = count_matrix(["i0"], dets, 1, score_threshold=0.0)
        assert mat_all.tolist() == [[2.0]]

    def test_unknown_image_rejected(self):
        boxes = [BoxAnnotation("a0", "ghost", 0, (0, 0, 5, 5))]
        with pytest.raises(ValidationError, match="ghost"):
            count_matrix(["i0"], boxes, 1)
