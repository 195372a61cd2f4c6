"""Reference predictors for the collision-regression task.

Constant predictors (training-set mode / median / mean) give the
benchmark's statistical lower bounds. The count regressor is a
deterministic ridge model on per-class object counts (optionally plus
normalized coordinates), solved in closed form via the normal equations
on standardized features with an unpenalized intercept.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

STATISTICS = ("mode", "median", "mean")


@dataclass
class ConstantPredictor:
    statistic: str
    value: float

    def predict(self, n: int = 1) -> np.ndarray:
        return np.full(n, max(self.value, 0.0))

    def to_dict(self) -> dict:
        return {"kind": "constant", "statistic": self.statistic, "value": self.value}


@dataclass
class CountFeatures:
    """Per-image feature rows: C class counts, optionally + 2 coordinates."""

    image_ids: list[str]
    matrix: np.ndarray
    includes_coords: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.image_ids):
            raise ValidationError("feature matrix shape does not match image ids")


@dataclass
class LinearModel:
    """Standardize-then-affine regressor with non-negative clamped output."""

    weights: np.ndarray
    intercept: float
    feature_means: np.ndarray
    feature_stds: np.ndarray
    l2: float
    constant_features: list[int] = field(default_factory=list)
    ridge_fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": "ridge",
            "weights": [float(w) for w in self.weights],
            "intercept": float(self.intercept),
            "feature_means": [float(m) for m in self.feature_means],
            "feature_stds": [float(s) for s in self.feature_stds],
            "l2": float(self.l2),
            "constant_features": list(self.constant_features),
            "ridge_fallback": bool(self.ridge_fallback),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(
            weights=np.array(d["weights"], dtype=float),
            intercept=float(d["intercept"]),
            feature_means=np.array(d["feature_means"], dtype=float),
            feature_stds=np.array(d["feature_stds"], dtype=float),
            l2=float(d["l2"]),
            constant_features=list(d.get("constant_features", [])),
            ridge_fallback=bool(d.get("ridge_fallback", False)),
        )


def fit_constant(train_labels: list[int] | np.ndarray, statistic: str) -> ConstantPredictor:
    """Fit a constant predictor from training labels.

    mode: most frequent value (ties -> smallest); median: average of the
    middle order statistics; mean: arithmetic mean.
    """
    labels = np.asarray(train_labels, dtype=float)
    if labels.size == 0:
        raise ValidationError("fit_constant requires at least one label")
    if statistic not in STATISTICS:
        raise ValidationError(f"statistic must be one of {STATISTICS}, got {statistic!r}")
    if statistic == "mean":
        value = float(np.mean(labels))
    elif statistic == "median":
        value = float(np.median(labels))
    else:
        counts = Counter(labels.tolist())
        top = max(counts.values())
        value = float(min(v for v, c in counts.items() if c == top))
    return ConstantPredictor(statistic=statistic, value=value)


def fit_count_regressor(
    features: CountFeatures,
    labels: list[int] | np.ndarray,
    l2: float = 1.0,
) -> LinearModel:
    """Closed-form ridge regression on standardized count features.

    The intercept is unpenalized; with column-centered features it equals
    the label mean, which also guarantees the training MSE never exceeds
    the constant-mean predictor's. A singular system at l2=0 falls back
    to l2=1e-8 and flags the model.
    """
    y = np.asarray(labels, dtype=float)
    X = features.matrix
    if X.shape[0] != y.shape[0]:
        raise ValidationError("features and labels must align")
    if X.shape[0] < 2:
        raise ValidationError("fit_count_regressor requires at least 2 samples")
    if l2 < 0:
        raise ValidationError(f"l2 must be >= 0, got {l2}")

    means = X.mean(axis=0)
    stds = X.std(axis=0)
    constant = [int(i) for i in np.flatnonzero(stds == 0.0)]
    safe_stds = np.where(stds == 0.0, 1.0, stds)
    Xs = (X - means) / safe_stds

    def _solve(lam: float) -> np.ndarray | None:
        a = Xs.T @ Xs + lam * np.eye(Xs.shape[1])
        b = Xs.T @ (y - y.mean())
        try:
            w = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(w)):
            return None
        # Reject numerically-meaningless solutions from near-singular systems.
        if lam == 0.0 and np.linalg.cond(a) > 1e12:
            return None
        return w

    fallback = False
    weights = _solve(l2)
    if weights is None:
        fallback = True
        l2_used = 1e-8
        weights = _solve(l2_used)
        if weights is None:
            raise ValidationError("ridge system unsolvable even with fallback regularization")
    else:
        l2_used = l2

    return LinearModel(
        weights=weights,
        intercept=float(y.mean()),
        feature_means=means,
        feature_stds=safe_stds,
        l2=l2_used,
        constant_features=constant,
        ridge_fallback=fallback,
    )


def predict(model: LinearModel, features: np.ndarray) -> np.ndarray:
    """Predict collision counts; output clamped to [0, inf).

    Accepts a single feature vector or a 2-D batch.
    """
    x = np.asarray(features, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.weights.shape[0]:
        raise ValidationError(
            f"feature length {x.shape[1]} does not match model ({model.weights.shape[0]})"
        )
    xs = (x - model.feature_means) / model.feature_stds
    out = np.maximum(xs @ model.weights + model.intercept, 0.0)
    return float(out[0]) if single else out


def count_matrix(
    image_ids: list[str],
    boxes: list,
    num_classes: int,
    score_threshold: float | None = None,
) -> np.ndarray:
    """Per-image instance counts per class.

    boxes may be BoxAnnotation (ground truth) or DetectionRecord entries;
    detections below score_threshold are not counted.
    """
    pos = {img_id: i for i, img_id in enumerate(image_ids)}
    if len(pos) != len(image_ids):
        raise ValidationError("duplicate image_id in count features")
    mat = np.zeros((len(image_ids), num_classes))
    for b in boxes:
        if b.image_id not in pos:
            raise ValidationError(f"box references unknown image {b.image_id!r}")
        if not 0 <= b.category_id < num_classes:
            raise ValidationError(f"category_id {b.category_id} outside [0, {num_classes})")
        score = getattr(b, "score", None)
        if score is not None and score_threshold is not None and score < score_threshold:
            continue
        mat[pos[b.image_id], b.category_id] += 1
    return mat
