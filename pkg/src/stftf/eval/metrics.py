"""Forecast metrics: relative L2 errors, per-level contribution weights, CI coverage."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from ..core.types import Trajectory, ValidationError

SCOPES = ("per_variable_total", "per_variable_per_timestep")
CI_METHODS = ("gaussian", "quantile")

# Average coverage on the plasma benchmark for the flow-corrected model;
# a documented reference only, not something the desk-scale tests target.
REFERENCE_PLASMA_COVERAGE = {0.90: 0.894, 0.95: 0.925}


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Trajectory) else x, dtype=np.float64)


def _variables(x, n: int) -> tuple:
    return tuple(x.grid.variables) if isinstance(x, Trajectory) else tuple(str(i) for i in range(n))


def l2_relative_error(pred, truth, scope: str = "per_variable_total", variables: Optional[Sequence[str]] = None):
    """``||pred_c - truth_c|| / ||truth_c||`` per variable.

    Returns ``{variable: float}`` for the total scope and
    ``{variable: array of length T}`` for the per-timestep scope.
    """
    if scope not in SCOPES:
        raise ValidationError(f"scope must be one of {SCOPES}, got {scope!r}")
    p, t = _as_array(pred), _as_array(truth)
    if p.shape != t.shape:
        raise ValidationError(f"pred shape {p.shape} != truth shape {t.shape}")
    if p.ndim != 4:
        raise ValidationError(f"expected T x W x H x C arrays, got {p.shape}")
    names = tuple(variables) if variables is not None else _variables(truth, t.shape[-1])
    axes = (0, 1, 2) if scope == "per_variable_total" else (1, 2)
    num = np.sqrt(np.sum((p - t) ** 2, axis=axes))
    den = np.sqrt(np.sum(t ** 2, axis=axes))
    out = {}
    for c, name in enumerate(names):
        d = den[..., c]
        if np.any(d == 0):
            where = "" if np.ndim(d) == 0 else f" at timestep {int(np.flatnonzero(d == 0)[0])}"
            raise ValidationError(f"truth for variable {name!r} has zero norm{where}")
        ratio = num[..., c] / d
        out[name] = float(ratio) if np.ndim(ratio) == 0 else ratio
    return out


def mean_relative_error(errors: dict) -> float:
    """Average of per-variable totals."""
    return float(np.mean([np.mean(v) for v in errors.values()]))


def scale_contributions(level_outputs: Sequence, truth) -> np.ndarray:
    """``W_i = ||y_i|| / ||y||`` per level, normalized to sum to one.

    ``level_outputs`` holds arrays or objects with a ``u_level`` attribute.
    """
    y = _as_array(truth)
    y_norm = np.linalg.norm(y.ravel())
    if y_norm == 0:
        raise ValidationError("truth snapshot has zero norm")
    arrays = []
    for out in level_outputs:
        u = getattr(out, "u_level", out)
        if hasattr(u, "detach"):
            u = u.detach().cpu().numpy()
        arrays.append(np.asarray(u, dtype=np.float64))
    if not arrays:
        raise ValidationError("no level outputs given")
    weights = np.array([np.linalg.norm(a.ravel()) for a in arrays]) / y_norm
    total = weights.sum()
    if total == 0:
        raise ValidationError("every level output is zero; contributions are undefined")
    return weights / total


def z_value(level: float) -> float:
    """Two-sided Gaussian quantile: 1.6449 for 0.90, 1.9600 for 0.95."""
    if not 0 < level < 1:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    return float(norm.ppf(0.5 + level / 2))


def ci_coverage(ensemble, truth, levels: Sequence[float] = (0.90, 0.95), n_eval_snapshots: Optional[int] = None,
                method: str = "gaussian", variables: Optional[Sequence[str]] = None) -> dict:
    """Fraction of truth values inside the ensemble interval, per level and variable.

    ``ensemble`` is an ``EnsembleForecast`` or an ``S x T x W x H x C``
    array.  The Gaussian interval is ``mean +- z * std``; where ``std`` is 0
    a point counts as covered only if truth equals the mean exactly.  The
    quantile method uses the empirical ``(1 - level)/2`` and ``(1 + level)/2``
    member quantiles instead.  Each level maps to ``{variable: coverage,
    "average": mean over variables}``.
    """
    if method not in CI_METHODS:
        raise ValidationError(f"method must be one of {CI_METHODS}, got {method!r}")
    samples = np.asarray(getattr(ensemble, "samples", ensemble), dtype=np.float64)
    t = _as_array(truth)
    if samples.ndim != 5 or samples.shape[1:] != t.shape:
        raise ValidationError(f"ensemble {samples.shape} and truth {t.shape} are not aligned")
    n = t.shape[0] if n_eval_snapshots is None else n_eval_snapshots
    if not 1 <= n <= t.shape[0]:
        raise ValidationError(f"n_eval_snapshots must be in [1, {t.shape[0]}], got {n}")
    samples, t = samples[:, :n], t[:n]
    names = tuple(variables) if variables is not None else _variables(truth, t.shape[-1])
    if method == "gaussian":
        mean, std = samples.mean(axis=0), samples.std(axis=0)
    result = {}
    for level in levels:
        if method == "gaussian":
            covered = np.abs(t - mean) <= z_value(level) * std
        else:
            z_value(level)
            lo, hi = np.quantile(samples, [0.5 - level / 2, 0.5 + level / 2], axis=0)
            covered = (t >= lo) & (t <= hi)
        per_var = covered.mean(axis=(0, 1, 2))
        entry = {name: float(per_var[c]) for c, name in enumerate(names)}
        entry["average"] = float(per_var.mean())
        result[float(level)] = entry
    return result
