"""Input checks shared by the estimators."""

import numpy as np

from .core import FeatureDimMismatch, InvalidFeature, ValidationError


def check_features(X, dim=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise InvalidFeature(f"expected a 2-d feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidFeature("features contain NaN or inf")
    if dim is not None and X.shape[0] and X.shape[1] != dim:
        raise FeatureDimMismatch(f"FeatureDimMismatch: expected d={dim}, got d={X.shape[1]}")
    return X


def check_probe(P, dim=None) -> np.ndarray:
    P = check_features(P, dim=dim)
    if P.shape[0] == 0:
        raise ValidationError("appearance set must be non-empty")
    return P


def check_interval(lo, hi, name="interval"):
    lo, hi = float(lo), float(hi)
    if not hi > lo:
        raise ValidationError(f"{name} must satisfy lo < hi, got ({lo}, {hi})")
    return lo, hi
