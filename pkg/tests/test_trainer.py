import csv
import logging

import numpy as np
import pytest
import torch

from stftf.core import RngStream, ValidationError, fit_normalization
from stftf.flowmatch import FlowConfig
from stftf.model import StftModel
from stftf.trainer import (DEFAULT_FLOW_EPOCHS, STREAM_INIT, TrainConfig, TrainingDiverged, TrainLog, epoch_order,
                           make_pairs, param_groups, train_deterministic, train_flow)

from conftest import random_trajectory

SMALL_FLOW = FlowConfig(depth=1, hidden_dim=16, n_heads=2, patch_size=4, n_sample_steps=4, tau_embed_dim=8)


@pytest.mark.parametrize("T,k,expected", [(101, 5, 96), (6, 5, 1)])
def test_pair_counts(T, k, expected):
    assert len(make_pairs([random_trajectory(T=T, W=2, H=2)], k)) == expected


def test_short_trajectory_skipped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        pairs = make_pairs([random_trajectory(T=5, W=2, H=2), random_trajectory(T=8, W=2, H=2)], 5)
    assert len(pairs) == 3
    assert "T=5 < k+1=6" in caplog.text


def test_pair_count_closed_form():
    Ts = [7, 12, 3, 9]
    pairs = make_pairs([random_trajectory(T=T, W=2, H=2, seed=T) for T in Ts], 3)
    assert len(pairs) == sum(max(0, T - 3) for T in Ts)


def test_pairs_are_sliding_windows():
    tr = random_trajectory(T=7, W=2, H=2)
    pairs = list(make_pairs([tr], 3))
    assert len(pairs) == 4
    for t, (hist, target) in enumerate(pairs):
        np.testing.assert_array_equal(hist.data, tr.data[t:t + 3])
        np.testing.assert_array_equal(target, tr.data[t + 3])


def test_epoch_shuffle_is_deterministic_permutation():
    a, b = epoch_order(3, 0, 50), epoch_order(3, 0, 50)
    np.testing.assert_array_equal(a, b)
    assert sorted(a) == list(range(50))
    assert not np.array_equal(a, epoch_order(3, 1, 50))
    assert not np.array_equal(a, epoch_order(4, 0, 50))


def test_train_config_validation_and_budget():
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(max_epochs=-1)
    with pytest.raises(ValidationError, match="needs max_epochs"):
        TrainConfig().epoch_budget()
    assert TrainConfig(stage="flow").epoch_budget() == DEFAULT_FLOW_EPOCHS == 200
    assert TrainConfig().lr == 1e-4


def test_weight_decay_only_on_matrices(tiny_model_config):
    model = StftModel(tiny_model_config, 16, 16, 3)
    decay, no_decay = param_groups(model, 0.01)
    names = {id(p): n for n, p in model.named_parameters()}
    assert all(p.ndim >= 2 for p in decay["params"])
    assert all(p.ndim < 2 or names[id(p)].endswith("_embed") for p in no_decay["params"])
    assert decay["weight_decay"] == 0.01 and no_decay["weight_decay"] == 0.0


def test_zero_budget_returns_initialization(small_ns, tiny_model_config):
    ckpt = train_deterministic(small_ns, tiny_model_config, TrainConfig(max_epochs=0, seed=5))
    gen = torch.Generator().manual_seed(RngStream(5, STREAM_INIT).torch_seed())
    fresh = StftModel(tiny_model_config, 16, 16, 3, generator=gen)
    for (name, a), b in zip(ckpt.model.state_dict().items(), fresh.state_dict().values()):
        assert torch.equal(a, b), name
    assert ckpt.info["steps"] == 0


def _full_batch(seed=0, steps=50, val_every=10):
    return TrainConfig(lr=1e-3, batch_size=14, max_steps=steps, val_every=val_every, seed=seed)


def test_loss_decreases_over_first_fifty_iterations(small_ns, tiny_model_config):
    log = TrainLog()
    train_deterministic(small_ns[:1], tiny_model_config, _full_batch(), train_log=log)
    losses = np.array(log.train_losses)
    assert len(losses) == 50
    # recorded reference run: every step lowers the full-batch loss; allow a 1% band
    assert np.all(losses[1:] <= losses[:-1] * 1.01)
    assert losses[-1] < 0.3 * losses[0]


def test_training_is_reproducible(small_ns, tiny_model_config):
    runs = []
    for _ in range(2):
        log = TrainLog()
        ckpt = train_deterministic(small_ns[:2], tiny_model_config,
                                   TrainConfig(lr=1e-3, batch_size=4, max_steps=12, val_every=5), train_log=log)
        runs.append((log.train_losses, ckpt.content_hash))
    assert runs[0] == runs[1]


def test_best_validation_checkpoint_and_log(tmp_path, small_ns, tiny_model_config):
    path = tmp_path / "log.csv"
    ckpt = train_deterministic(small_ns[:2], tiny_model_config, _full_batch(steps=20, val_every=5),
                               val=small_ns[2:], train_log=TrainLog(path))
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "train_loss", "val_rel_l2", "wall_time"]
    assert len(rows) == 21
    vals = [float(r[2]) for r in rows[1:] if r[2]]
    assert len(vals) == 4
    assert ckpt.info["best_val_rel_l2"] == pytest.approx(min(vals))
    assert ckpt.info["best_step"] == 5 * (1 + int(np.argmin(vals)))


def test_normalization_fit_on_training_split(small_ns, tiny_model_config):
    ckpt = train_deterministic(small_ns[:2], tiny_model_config, TrainConfig(max_steps=1), val=small_ns[2:])
    assert ckpt.stats == fit_normalization(small_ns[:2])


def test_nan_loss_aborts_with_last_good_checkpoint(small_ns, tiny_model_config, monkeypatch):
    calls = {"n": 0}
    original = StftModel.predict

    def flaky(self, hist):
        calls["n"] += 1
        out = original(self, hist)
        return out * float("nan") if calls["n"] > 3 else out

    monkeypatch.setattr(StftModel, "predict", flaky)
    with pytest.raises(TrainingDiverged, match="iteration 3") as err:
        train_deterministic(small_ns[:1], tiny_model_config, _full_batch(steps=10))
    ckpt = err.value.checkpoint
    assert ckpt.info["aborted_at"] == 3
    assert all(torch.all(torch.isfinite(p)) for p in ckpt.model.parameters())


def test_no_pairs_is_an_error(tiny_model_config):
    with pytest.raises(ValidationError, match="no training pairs"):
        train_deterministic([random_trajectory(T=2, W=16, H=16, variables=("u", "v", "p"))], tiny_model_config,
                            TrainConfig(max_steps=1))


def test_flow_training_keeps_stft_frozen_and_learns(tmp_path, small_ns, tiny_model_config):
    stft = train_deterministic(small_ns[:2], tiny_model_config, _full_batch(steps=20))
    before = stft.content_hash
    hist = torch.randn(1, 2, 16, 16, 3)
    with torch.no_grad():
        out_before = stft.model.predict(hist)
    log = TrainLog(tmp_path / "flow.csv", val_column="val_flow_loss")
    flow = train_flow(small_ns[:2], stft, SMALL_FLOW,
                      TrainConfig(stage="flow", lr=1e-3, batch_size=7, max_steps=80, val_every=20), train_log=log)
    assert stft.content_hash == before == flow.stft_hash
    with torch.no_grad():
        assert torch.equal(stft.model.predict(hist), out_before)
    losses = np.array(log.train_losses)
    assert losses[-20:].mean() < 0.9 * losses[:10].mean()
    assert flow.info["steps"] == 80
    header = (tmp_path / "flow.csv").read_text().splitlines()[0]
    assert header == "iteration,train_loss,val_flow_loss,wall_time"


def test_flow_default_budget_is_200_epochs(small_ns, tiny_model_config):
    stft = train_deterministic(small_ns[:1], tiny_model_config, TrainConfig(max_steps=0))
    cfg = TrainConfig(stage="flow", batch_size=14, lr=1e-3)
    # one pair batch per epoch, so 200 epochs are 200 steps
    flow = train_flow(small_ns[:1], stft, SMALL_FLOW, cfg)
    assert flow.info["epochs"] == 200 and flow.info["steps"] == 200
