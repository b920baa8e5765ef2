"""Small input-checking helpers shared by the public entry points."""

import numpy as np

from .errors import ConfigError


def check_finite_matrix(costs, name="costs"):
    arr = np.asarray(costs, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_probabilities(probs, atol=1e-6):
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probabilities must be a non-empty vector")
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise ValueError("probabilities must lie in [0, 1]")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"probabilities sum to {p.sum():.9g}, expected 1")
    return p


def check_class_index(index, n_classes):
    if not 0 <= int(index) < n_classes:
        raise IndexError(f"class index {index} out of range for {n_classes} classes")
    return int(index)


def check_positive(value, name):
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return value


def check_nonnegative_weights(weights, name):
    vals = [float(w) for w in weights]
    if any(w < 0 for w in vals):
        raise ConfigError(f"{name}: weights must be nonnegative, got {vals}")
    if not any(w > 0 for w in vals):
        raise ConfigError(f"{name}: at least one weight must be positive")
    return vals
