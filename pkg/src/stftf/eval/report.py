"""CSV and static-figure exports for evaluation results."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from ..core.types import ValidationError

CURVE_COLUMNS = ("timestep", "variable", "relative_L2")
_PNG_META = {"Software": None}


def _writable(path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {path}: {exc}") from exc
    return path


def error_curve_export(errors: dict, path, t0: int = 0) -> Path:
    """Write ``{variable: per-timestep errors}`` as long-format CSV, one row per (timestep, variable)."""
    path = _writable(path)
    lengths = {len(np.atleast_1d(v)) for v in errors.values()}
    if len(lengths) > 1:
        raise ValidationError("per-timestep error arrays differ in length")
    n = lengths.pop() if lengths else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for t in range(n):
            for name, vals in errors.items():
                w.writerow([t0 + t, name, repr(float(np.atleast_1d(vals)[t]))])
    return path


def read_error_curve(path) -> dict:
    out: dict = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
            raise ValidationError(f"{path}: expected columns {CURVE_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            out.setdefault(row["variable"], []).append((int(row["timestep"]), float(row["relative_L2"])))
    return out


def _save(fig: Figure, path) -> Path:
    path = _writable(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    return path


def plot_error_curves(errors: dict, path, t0: int = 0, labels: Optional[dict] = None) -> Path:
    """Relative L2 error against lead time, one line per variable (or per model, via ``labels``)."""
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot(1, 1, 1)
    for name, vals in errors.items():
        vals = np.atleast_1d(vals)
        ax.plot(t0 + np.arange(len(vals)), vals, label=(labels or {}).get(name, name))
    ax.set_xlabel("timestep")
    ax.set_ylabel("relative L2 error")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_field_panels(truth: np.ndarray, pred: np.ndarray, path, std: Optional[np.ndarray] = None,
                      title: str = "") -> Path:
    """Truth, prediction, residual and ensemble std for one ``W x H`` snapshot.

    Truth and prediction share one color scale; residual and std share a
    second one so their magnitudes compare directly.
    """
    truth, pred = np.asarray(truth, float), np.asarray(pred, float)
    if truth.shape != pred.shape or truth.ndim != 2:
        raise ValidationError(f"expected matching W x H fields, got {truth.shape} and {pred.shape}")
    std = np.zeros_like(truth) if std is None else np.asarray(std, float)
    residual = truth - pred
    lo, hi = min(truth.min(), pred.min()), max(truth.max(), pred.max())
    err_scale = max(np.abs(residual).max(), std.max()) or 1.0
    fig = Figure(figsize=(13, 3.4))
    panels = [("truth", truth, "viridis", lo, hi), ("prediction", pred, "viridis", lo, hi),
              ("residual", residual, "RdBu_r", -err_scale, err_scale), ("std", std, "RdBu_r", -err_scale, err_scale)]
    for i, (name, arr, cmap, vmin, vmax) in enumerate(panels):
        ax = fig.add_subplot(1, 4, i + 1)
        im = ax.imshow(arr.T, origin="lower", cmap=cmap, vmin=vmin, vmax=vmax)
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_contributions(weights: Sequence[float], path, labels: Optional[Sequence[str]] = None) -> Path:
    """Bar chart of normalized per-level contribution weights."""
    weights = np.asarray(weights, float)
    labels = list(labels) if labels is not None else [f"level {i + 1}" for i in range(len(weights))]
    fig = Figure(figsize=(4, 3))
    ax = fig.add_subplot(1, 1, 1)
    ax.bar(labels, weights, color="0.4")
    ax.set_ylim(0, 1)
    ax.set_ylabel("contribution")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    return _save(fig, path)


def write_coverage_csv(coverage: dict, path) -> Path:
    path = _writable(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("level", "variable", "coverage"))
        for level, entry in coverage.items():
            for name, val in entry.items():
                w.writerow([repr(float(level)), name, repr(float(val))])
    return path
