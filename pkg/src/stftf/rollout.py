"""Autoregressive forecasting: deterministic, mean-injected, and stochastic ensembles.

A forecaster is anything with ``model`` (exposing ``predict(history)``),
``stats``, ``k`` and ``grid`` attributes; ``StftCheckpoint`` qualifies, and
``PersistenceForecaster`` is a parameter-free stub for contract checks.
Rollouts run in normalized space and return physical units.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .core.normalization import normalize
from .core.types import GridSpec, HistoryWindow, NormalizationStats, RngStream, Trajectory, ValidationError
from .flowmatch import FlowCheckpoint, draw_normal, sample_residual
from .model.checkpoint import StftCheckpoint

log = logging.getLogger(__name__)


class RolloutError(RuntimeError):
    pass


class PersistenceModel(nn.Module):
    """Predicts that the next snapshot equals the last one in the window."""

    def predict(self, history: torch.Tensor) -> torch.Tensor:
        return history[:, -1].clone()


@dataclass
class PersistenceForecaster:
    grid: dict
    k: int
    stats: NormalizationStats
    model: nn.Module = field(default_factory=PersistenceModel)

    @classmethod
    def for_grid(cls, grid: GridSpec, k: int) -> "PersistenceForecaster":
        c = grid.n_vars
        return cls(grid.to_dict(), k, NormalizationStats(np.zeros(c), np.ones(c)))


def _model_dtype(model: nn.Module) -> torch.dtype:
    p = next(model.parameters(), None)
    return p.dtype if p is not None else torch.float64


def _initial_window(forecaster, initial) -> tuple[np.ndarray, GridSpec]:
    grid = GridSpec.from_dict(forecaster.grid)
    data = initial.data if isinstance(initial, (HistoryWindow, Trajectory)) else np.asarray(initial)
    if data.ndim != 4 or data.shape[1:] != grid.shape:
        raise ValidationError(f"initial window must be k x {grid.shape}, got {data.shape}")
    if data.shape[0] != forecaster.k:
        raise ValidationError(f"initial window has {data.shape[0]} snapshots, model expects k={forecaster.k}")
    return data, grid


def _to_trajectory(frames: list, grid: GridSpec, stats: NormalizationStats, t0: int, params=None) -> Trajectory:
    if frames:
        data = normalize(np.stack(frames), stats, "invert").astype(np.float32)
    else:
        data = np.zeros((0, *grid.shape), dtype=np.float32)
    return Trajectory(grid, data, t0, params or {})


def _check_pair(stft, flow: FlowCheckpoint):
    if isinstance(stft, StftCheckpoint):
        flow.check_pair(stft)
    if flow.k != stft.k:
        raise ValidationError(f"flow net expects k={flow.k}, forecaster has k={stft.k}")


@torch.no_grad()
def _run(forecaster, initial, horizon: int, correction=None, t0: int = 0) -> Trajectory:
    if horizon < 0:
        raise ValidationError("horizon must be >= 0")
    data, grid = _initial_window(forecaster, initial)
    dtype = _model_dtype(forecaster.model)
    window = torch.from_numpy(normalize(data.astype(np.float64), forecaster.stats)).to(dtype).unsqueeze(0)
    frames = []
    for step in range(horizon):
        pred = forecaster.model.predict(window)
        if correction is not None:
            pred = pred + correction(window, pred, step)
        if not torch.all(torch.isfinite(pred)):
            raise RolloutError(f"non-finite prediction at rollout step {step}")
        frames.append(pred[0].double().numpy())
        window = torch.cat([window[:, 1:], pred.unsqueeze(1)], dim=1)
    return _to_trajectory(frames, grid, forecaster.stats, t0)


def rollout_deterministic(stft, initial, horizon: int, t0: int = 0) -> Trajectory:
    """Feed each prediction back as the newest snapshot of a k-long sliding window."""
    return _run(stft, initial, horizon, t0=t0)


def rollout_mean(stft, flow: FlowCheckpoint, initial, horizon: int, n_samples: int = 50,
                 rng: Optional[RngStream] = None, n_steps: Optional[int] = None, t0: int = 0) -> Trajectory:
    """Add the mean of ``n_samples`` sampled residuals to every deterministic step."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    _check_pair(stft, flow)
    rng = rng if rng is not None else RngStream(0, 0)
    n_steps = n_steps or flow.config.n_sample_steps

    def correction(window, pred, step):
        hist = window.expand(n_samples, *window.shape[1:])
        cond = pred.expand(n_samples, *pred.shape[1:])
        x0 = draw_normal(rng, cond.shape, cond)
        try:
            res = sample_residual(flow.net, hist, cond, n_steps, x0=x0)
        except Exception as exc:
            raise RolloutError(f"residual sampling failed at rollout step {step}: {exc}") from exc
        return res.mean(dim=0, keepdim=True)

    return _run(stft, initial, horizon, correction, t0=t0)


class EnsembleError(RolloutError):
    pass


@dataclass
class EnsembleForecast:
    """``samples`` is ``S x T_h x W x H x C`` in physical units for the completed members."""

    samples: np.ndarray
    seeds: list
    grid: GridSpec
    failed: dict = field(default_factory=dict)
    t0: int = 0

    def __post_init__(self):
        if self.samples.ndim != 5 or self.samples.shape[0] < 1:
            raise ValidationError("ensemble needs S >= 1 samples shaped S x T x W x H x C")

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @cached_property
    def mean(self) -> np.ndarray:
        return self.samples.astype(np.float64).mean(axis=0)

    @cached_property
    def std(self) -> np.ndarray:
        return self.samples.astype(np.float64).std(axis=0)

    def member(self, i: int) -> Trajectory:
        return Trajectory(self.grid, self.samples[i], self.t0, {"seed": self.seeds[i]})


@torch.no_grad()
def rollout_ensemble(stft, flow: FlowCheckpoint, initial, horizon: int, n_traj: int = 100, seed: int = 0,
                     n_steps: Optional[int] = None, batch_size: int = 25, min_complete: float = 0.9,
                     t0: int = 0) -> EnsembleForecast:
    """One residual sample per step per member; member ``m`` draws from ``RngStream(seed, m)``.

    Members that produce non-finite values are dropped and recorded in
    ``failed``; fewer than ``min_complete`` survivors is an error.
    """
    if n_traj < 1 or horizon < 1:
        raise ValidationError("n_traj and horizon must be >= 1")
    _check_pair(stft, flow)
    data, grid = _initial_window(stft, initial)
    n_steps = n_steps or flow.config.n_sample_steps
    dtype = _model_dtype(stft.model)
    start = torch.from_numpy(normalize(data.astype(np.float64), stft.stats)).to(dtype).unsqueeze(0)
    samples = np.zeros((n_traj, horizon, *grid.shape), dtype=np.float64)
    failed: dict[int, int] = {}
    for lo in range(0, n_traj, batch_size):
        members = list(range(lo, min(n_traj, lo + batch_size)))
        streams = {m: RngStream(seed, m) for m in members}
        window = start.expand(len(members), *start.shape[1:]).clone()
        alive = list(members)
        for step in range(horizon):
            pred = stft.model.predict(window)
            x0 = torch.cat([draw_normal(streams[m], (1, *grid.shape), pred) for m in alive])
            nxt = pred + sample_residual(flow.net, window, pred, n_steps, x0=x0, check_finite=False)
            ok = torch.isfinite(nxt).flatten(1).all(dim=1)
            for j in np.flatnonzero(~ok.numpy()):
                failed[alive[j]] = step
                log.warning("ensemble member %d became non-finite at step %d", alive[j], step)
            keep = ok.nonzero().flatten()
            alive = [alive[j] for j in keep.tolist()]
            nxt, window = nxt[keep], window[keep]
            for j, m in enumerate(alive):
                samples[m, step] = nxt[j].double().numpy()
            window = torch.cat([window[:, 1:], nxt.unsqueeze(1)], dim=1)
            if not alive:
                break
    done = [m for m in range(n_traj) if m not in failed]
    if len(done) < min_complete * n_traj:
        raise EnsembleError(f"only {len(done)} of {n_traj} ensemble members completed; failed: {failed}")
    phys = normalize(samples[done], stft.stats, "invert").astype(np.float32)
    return EnsembleForecast(phys, [(seed, m) for m in done], grid, failed, t0)
