from __future__ import annotations

from typing import Sequence

import numpy as np

from .types import NormalizationStats, Trajectory, ValidationError


class ZeroVarianceError(ValidationError):
    pass


def variable_moments(trajectories: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable mean and population std over every point, two-pass in float64."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValidationError("need at least one trajectory")
    C = trajectories[0].grid.n_vars
    n = 0
    s1 = np.zeros(C)
    for tr in trajectories:
        x = tr.data.reshape(-1, C).astype(np.float64)
        n += x.shape[0]
        s1 += x.sum(0)
    if n == 0:
        raise ValidationError("need at least one snapshot")
    mean = s1 / n
    s2 = np.zeros(C)
    for tr in trajectories:
        x = tr.data.reshape(-1, C).astype(np.float64)
        s2 += ((x - mean) ** 2).sum(0)
    return mean, np.sqrt(s2 / n)


def fit_normalization(trajectories: Sequence[Trajectory], std_floor: float = 0.0) -> NormalizationStats:
    """Global per-variable z-score statistics fit on training trajectories.

    A variable whose std does not exceed ``std_floor`` (or is zero to float
    precision) is rejected rather than silently rescaled.
    """
    trajectories = list(trajectories)
    mean, std = variable_moments(trajectories)
    names = trajectories[0].grid.variables
    for c in range(len(names)):
        if std[c] <= max(std_floor, 1e-12 * max(abs(mean[c]), 1.0)):
            raise ZeroVarianceError(
                f"variable {names[c]!r} has zero variance; drop the variable or add jitter before training")
    return NormalizationStats(tuple(mean), tuple(std))


def normalize(field, stats: NormalizationStats, direction: str = "apply"):
    """Apply (``"apply"``) or undo (``"invert"``) the z-score along the last axis."""
    x = np.asarray(field)
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    if x.shape[-1] != mean.shape[0]:
        raise ValidationError(f"field has {x.shape[-1]} variables, stats have {mean.shape[0]}")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    if direction == "apply":
        out = (x.astype(np.float64) - mean) / std
    elif direction == "invert":
        out = x.astype(np.float64) * std + mean
    else:
        raise ValueError(f"direction must be 'apply' or 'invert', got {direction!r}")
    return out.astype(dtype)
