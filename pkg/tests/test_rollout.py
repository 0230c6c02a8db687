import inspect

import numpy as np
import pytest
import torch
import torch.nn as nn

import stftf.rollout as rollout_module
from stftf.core import GridSpec, NormalizationStats, RngStream, ValidationError
from stftf.flowmatch import FlowCheckpoint, FlowConfig, VelocityNet
from stftf.model import CheckpointError, StftCheckpoint, StftModel
from stftf.rollout import (EnsembleError, EnsembleForecast, PersistenceForecaster, RolloutError, rollout_deterministic,
                           rollout_ensemble, rollout_mean)
from stftf.trainer import TrainConfig, train_deterministic, train_flow

from conftest import random_trajectory

ONE_STEP = FlowConfig(depth=1, hidden_dim=16, n_heads=2, patch_size=4, n_sample_steps=1, tau_embed_dim=8)
GRID = GridSpec(8, 8, ("a", "b"))


class CollapseNet(nn.Module):
    """Exact rectified-flow velocity towards a point mass at zero; one Euler step lands on 0."""

    k = 2

    def forward(self, x_tau, tau, cond_history, cond_pred):
        tau = torch.as_tensor(tau, dtype=x_tau.dtype).reshape(-1, 1, 1, 1)
        return -x_tau / (1 - tau)


class RecordingModel(nn.Module):
    """Adds one to the newest snapshot and remembers every window it was given."""

    def __init__(self, nan_at=None):
        super().__init__()
        self.windows, self.nan_at = [], nan_at

    def predict(self, history):
        self.windows.append(history.clone())
        out = history[:, -1] + 1.0
        if self.nan_at is not None and len(self.windows) > self.nan_at:
            out = out * float("nan")
        return out


def _stft(cfg, seed=0, stats=None):
    torch.manual_seed(seed)
    stats = stats or NormalizationStats((0.5, -1.0), (2.0, 0.5))
    return StftCheckpoint(StftModel(cfg, 8, 8, 2), cfg, stats, GRID.to_dict())


def _flow(stft, net, cfg=ONE_STEP):
    return FlowCheckpoint(net, cfg, stft.content_hash, stft.grid, stft.k)


def _initial(k=2, seed=0):
    return random_trajectory(T=k, W=8, H=8, seed=seed).data


def test_persistence_identity_is_exact():
    initial = random_trajectory(T=5, seed=3, scale=7.0).data
    out = rollout_deterministic(PersistenceForecaster.for_grid(GRID, 5), initial, 12)
    assert out.data.shape == (12, 8, 8, 2)
    for frame in out.data:
        assert np.array_equal(frame, initial[-1])


def test_horizon_zero_is_empty(tiny_model_config):
    out = rollout_deterministic(PersistenceForecaster.for_grid(GRID, 2), _initial(), 0)
    assert out.T == 0 and out.data.shape == (0, 8, 8, 2)
    with pytest.raises(ValidationError):
        rollout_deterministic(PersistenceForecaster.for_grid(GRID, 2), _initial(), -1)


def test_sliding_window_contract():
    k = 3
    model = RecordingModel()
    fc = PersistenceForecaster(GRID.to_dict(), k, NormalizationStats((0.0, 0.0), (1.0, 1.0)), model)
    initial = _initial(k)
    out = rollout_deterministic(fc, initial, 6)
    history = np.concatenate([initial, out.data])
    for step, window in enumerate(model.windows):
        np.testing.assert_array_equal(window[0].numpy().astype(np.float32), history[step:step + k])
    np.testing.assert_allclose(out.data[-1], initial[-1] + 6, rtol=1e-6)


def test_window_length_and_grid_are_checked(tiny_model_config):
    with pytest.raises(ValidationError, match="k=2"):
        rollout_deterministic(_stft(tiny_model_config), _initial(3), 2)
    with pytest.raises(ValidationError):
        rollout_deterministic(_stft(tiny_model_config), np.zeros((2, 6, 8, 2)), 2)


def test_non_finite_prediction_names_step():
    fc = PersistenceForecaster(GRID.to_dict(), 2, NormalizationStats((0.0, 0.0), (1.0, 1.0)), RecordingModel(3))
    with pytest.raises(RolloutError, match="step 3"):
        rollout_deterministic(fc, _initial(), 10)


def test_deterministic_rollout_of_checkpoint_is_finite_and_physical(tiny_model_config):
    stft = _stft(tiny_model_config)
    out = rollout_deterministic(stft, _initial(), 4, t0=7)
    assert out.data.shape == (4, 8, 8, 2) and out.t0 == 7
    # the fresh model predicts zero in normalized space, i.e. the training mean
    np.testing.assert_allclose(out.data.reshape(-1, 2).mean(0), stft.stats.mean, atol=1e-5)


def test_zero_residual_mean_rollout_equals_deterministic(tiny_model_config):
    stft = _stft(tiny_model_config)
    flow = _flow(stft, CollapseNet())
    det = rollout_deterministic(stft, _initial(), 5)
    mean = rollout_mean(stft, flow, _initial(), 5, n_samples=1)
    assert np.array_equal(det.data, mean.data)


def test_zero_residual_ensemble_has_zero_spread(tiny_model_config):
    stft = _stft(tiny_model_config)
    ens = rollout_ensemble(stft, _flow(stft, CollapseNet()), _initial(), 4, n_traj=6, seed=1)
    assert ens.size == 6
    assert np.all(ens.std == 0)
    for m in range(1, 6):
        assert np.array_equal(ens.samples[m], ens.samples[0])
    np.testing.assert_array_equal(ens.mean, rollout_deterministic(stft, _initial(), 4).data.astype(np.float64))


def test_literal_zero_velocity_passes_noise_through(tiny_model_config):
    # untrained net: velocity zero, so the sampled residual is the initial noise and members spread
    stft = _stft(tiny_model_config)
    net = VelocityNet(ONE_STEP, 8, 8, 2, 2)
    ens = rollout_ensemble(stft, _flow(stft, net), _initial(), 2, n_traj=50, seed=0)
    assert np.all(ens.std > 0)
    # step-1 spread in physical units equals the normalization std times the unit noise
    np.testing.assert_allclose(ens.std[0].mean(axis=(0, 1)), stft.stats.std, rtol=0.1)


def test_ensemble_is_reproducible_and_seed_dependent(tiny_model_config):
    stft = _stft(tiny_model_config)
    flow = _flow(stft, VelocityNet(ONE_STEP, 8, 8, 2, 2))
    a = rollout_ensemble(stft, flow, _initial(), 3, n_traj=4, seed=9)
    b = rollout_ensemble(stft, flow, _initial(), 3, n_traj=4, seed=9)
    c = rollout_ensemble(stft, flow, _initial(), 3, n_traj=4, seed=10)
    assert np.array_equal(a.samples, b.samples)
    assert a.seeds == [(9, m) for m in range(4)]
    assert not np.array_equal(a.samples, c.samples)


def test_member_does_not_depend_on_batching(tiny_model_config):
    stft = _stft(tiny_model_config)
    flow = _flow(stft, VelocityNet(ONE_STEP, 8, 8, 2, 2))
    big = rollout_ensemble(stft, flow, _initial(), 3, n_traj=5, seed=2, batch_size=25)
    small = rollout_ensemble(stft, flow, _initial(), 3, n_traj=5, seed=2, batch_size=2)
    np.testing.assert_allclose(big.samples, small.samples, rtol=1e-5, atol=1e-5)


def _failing_sampler(threshold):
    def sampler(net, hist, pred, n_steps, x0=None, check_finite=True, **kw):
        bad = x0[:, 0, 0, 0] > threshold
        out = x0.clone()
        out[bad] = float("nan")
        return out
    return sampler


def test_member_failures_recorded_above_threshold(tiny_model_config, monkeypatch):
    stft = _stft(tiny_model_config)
    flow = _flow(stft, VelocityNet(ONE_STEP, 8, 8, 2, 2))
    # roughly 1.4% of draws exceed 2.2 per step, so a handful of members fail over three steps
    monkeypatch.setattr(rollout_module, "sample_residual", _failing_sampler(2.2))
    ens = rollout_ensemble(stft, flow, _initial(), 3, n_traj=100, seed=0)
    assert 0 < len(ens.failed) <= 10
    assert ens.size == 100 - len(ens.failed)
    assert all(m not in ens.failed for _, m in ens.seeds)
    assert np.all(np.isfinite(ens.samples))


def test_too_many_member_failures_is_an_error(tiny_model_config, monkeypatch):
    stft = _stft(tiny_model_config)
    flow = _flow(stft, VelocityNet(ONE_STEP, 8, 8, 2, 2))
    monkeypatch.setattr(rollout_module, "sample_residual", _failing_sampler(0.5))
    with pytest.raises(EnsembleError, match="of 40 ensemble members completed"):
        rollout_ensemble(stft, flow, _initial(), 3, n_traj=40, seed=0)


def test_pairing_is_enforced(tiny_model_config):
    stft = _stft(tiny_model_config)
    flow = _flow(_stft(tiny_model_config, seed=1), VelocityNet(ONE_STEP, 8, 8, 2, 2))
    with pytest.raises(CheckpointError):
        rollout_mean(stft, flow, _initial(), 1)
    with pytest.raises(CheckpointError):
        rollout_ensemble(stft, flow, _initial(), 1, n_traj=2)


def test_defaults():
    assert inspect.signature(rollout_mean).parameters["n_samples"].default == 50
    assert inspect.signature(rollout_ensemble).parameters["n_traj"].default == 100


def test_ensemble_forecast_moments():
    samples = np.random.default_rng(0).standard_normal((7, 2, 3, 3, 1))
    ens = EnsembleForecast(samples, list(range(7)), GridSpec(3, 3, ("x",)))
    np.testing.assert_allclose(ens.mean, samples.mean(0))
    np.testing.assert_allclose(ens.std, samples.std(0))
    assert np.all(ens.std >= 0)
    assert ens.member(2).data.shape == (2, 3, 3, 1)
    with pytest.raises(ValidationError):
        EnsembleForecast(samples[:0], [], GridSpec(3, 3, ("x",)))


def test_more_samples_move_mean_within_monte_carlo_error(small_ns, tiny_model_config):
    stft = train_deterministic(small_ns[:2], tiny_model_config,
                               TrainConfig(lr=1e-3, batch_size=14, max_steps=20))
    flow = train_flow(small_ns[:2], stft, FlowConfig(depth=1, hidden_dim=16, n_heads=2, n_sample_steps=4,
                                                     tau_embed_dim=8),
                      TrainConfig(stage="flow", lr=1e-3, batch_size=14, max_steps=40))
    initial = small_ns[2].data[:2]
    # one stream for both runs: the 50 draws are a prefix of the 200
    m50 = rollout_mean(stft, flow, initial, 1, n_samples=50, rng=RngStream(0, 0)).data[0].astype(np.float64)
    m200 = rollout_mean(stft, flow, initial, 1, n_samples=200, rng=RngStream(0, 0)).data[0].astype(np.float64)
    spread = rollout_ensemble(stft, flow, initial, 1, n_traj=200, seed=3).std[0]
    for c in range(3):
        rms_gap = np.sqrt(np.mean((m50[..., c] - m200[..., c]) ** 2))
        rms_std = np.sqrt(np.mean(spread[..., c] ** 2))
        assert rms_gap < rms_std / np.sqrt(50)
