"""Two-stage training: deterministic StFT on one-step pairs, then the residual flow with StFT frozen."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core.config import strict_from_dict
from .core.normalization import fit_normalization, normalize
from .core.types import ModelConfig, NormalizationStats, RngStream, Trajectory, ValidationError
from .flowmatch import FlowCheckpoint, FlowConfig, VelocityNet, flow_loss
from .model.checkpoint import StftCheckpoint
from .model.stft import StftModel

log = logging.getLogger(__name__)

STAGES = ("deterministic", "flow")
DTYPES = {"float32": torch.float32, "float64": torch.float64}
DEFAULT_FLOW_EPOCHS = 200

# stream ids under the training seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_FLOW_NOISE, STREAM_FLOW_VAL = 0, 1, 2, 3


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 8
    max_epochs: Optional[int] = None
    max_steps: Optional[int] = None
    wall_clock: Optional[float] = None
    val_every: int = 100
    seed: int = 0
    stage: str = "deterministic"
    grad_clip: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("lr must be > 0")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValidationError("weight_decay must be >= 0 and grad_clip > 0")
        if self.batch_size < 1 or self.val_every < 1:
            raise ValidationError("batch_size and val_every must be >= 1")
        if self.stage not in STAGES:
            raise ValidationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.dtype not in DTYPES:
            raise ValidationError(f"dtype must be one of {tuple(DTYPES)}")
        for name in ("max_epochs", "max_steps", "wall_clock"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValidationError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return strict_from_dict(cls, d, "train config")

    def epoch_budget(self) -> Optional[int]:
        if self.max_epochs is None and self.max_steps is None and self.wall_clock is None:
            if self.stage == "flow":
                return DEFAULT_FLOW_EPOCHS
            raise ValidationError("deterministic training needs max_epochs, max_steps or wall_clock")
        return self.max_epochs


class PairSet:
    """All one-step ``(history, target)`` windows across a set of trajectories."""

    def __init__(self, trajectories: Sequence[Trajectory], k: int):
        if k < 1:
            raise ValidationError("k must be >= 1")
        self.k = k
        self.trajectories = list(trajectories)
        index = []
        for i, tr in enumerate(self.trajectories):
            if tr.T < k + 1:
                log.warning("trajectory %d has T=%d < k+1=%d; skipped", i, tr.T, k + 1)
                continue
            index.extend((i, t) for t in range(tr.T - k))
        self.index = np.asarray(index, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.index)

    def __iter__(self):
        for i, t in self.index:
            tr = self.trajectories[i]
            yield tr.window(int(t) + self.k - 1, self.k), tr.data[t + self.k]

    def epoch_order(self, seed: int, epoch: int) -> np.ndarray:
        return epoch_order(seed, epoch, len(self))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic shuffle for one epoch."""
    return RngStream(seed, STREAM_SHUFFLE).child(epoch).permutation(n)


def make_pairs(dataset: Sequence[Trajectory], k: int) -> PairSet:
    return PairSet(dataset, k)


class _Batches:
    """Normalized tensors per trajectory, gathered into batches by pair index."""

    def __init__(self, pairs: PairSet, stats: NormalizationStats, dtype: torch.dtype):
        self.pairs = pairs
        self.fields = [torch.from_numpy(normalize(tr.data, stats).astype(np.float64)).to(dtype)
                       for tr in pairs.trajectories]

    def get(self, rows: np.ndarray):
        k = self.pairs.k
        hist = torch.stack([self.fields[i][t:t + k] for i, t in self.pairs.index[rows]])
        target = torch.stack([self.fields[i][t + k] for i, t in self.pairs.index[rows]])
        return hist, target

    def chunks(self, batch_size: int):
        n = len(self.pairs)
        for start in range(0, n, batch_size):
            yield self.get(np.arange(start, min(n, start + batch_size)))


class TrainLog:
    """Append-only CSV of ``iteration, train_loss, <val column>, wall_time``; rows are also kept in memory."""

    def __init__(self, path=None, val_column: str = "val_rel_l2"):
        self.path = Path(path) if path is not None else None
        self.header = ["iteration", "train_loss", val_column, "wall_time"]
        self.rows: list[tuple] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists() or self.path.stat().st_size == 0
            with self.path.open("a", newline="") as fh:
                if new:
                    csv.writer(fh).writerow(self.header)

    def append(self, iteration: int, train_loss: float, val: Optional[float], wall_time: float):
        row = (iteration, train_loss, val, wall_time)
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([iteration, repr(train_loss), "" if val is None else repr(val),
                                         f"{wall_time:.3f}"])

    @property
    def train_losses(self) -> list[float]:
        return [r[1] for r in self.rows]


def param_groups(module: nn.Module, weight_decay: float):
    """Decay weight matrices only; biases, norms and embeddings are left alone."""
    decay, no_decay = [], []
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim >= 2 and not name.endswith("_embed"):
            decay.append(p)
        else:
            no_decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


class _Budget:
    def __init__(self, cfg: TrainConfig):
        self.max_epochs = cfg.epoch_budget()
        self.max_steps = cfg.max_steps
        self.wall_clock = cfg.wall_clock
        self.start = time.monotonic()

    def elapsed(self) -> float:
        return time.monotonic() - self.start

    def exhausted(self, step: int, epoch: int) -> bool:
        if self.max_steps is not None and step >= self.max_steps:
            return True
        if self.max_epochs is not None and epoch >= self.max_epochs:
            return True
        return self.wall_clock is not None and self.elapsed() >= self.wall_clock


@torch.no_grad()
def one_step_rel_l2(model: StftModel, batches: _Batches, stats: NormalizationStats, batch_size: int = 16) -> float:
    """Mean over variables of ``||pred_c - y_c|| / ||y_c||`` over all pairs, in physical units."""
    std = torch.as_tensor(stats.std, dtype=torch.float64)
    mean = torch.as_tensor(stats.mean, dtype=torch.float64)
    num = torch.zeros(len(stats.std), dtype=torch.float64)
    den = torch.zeros_like(num)
    for hist, target in batches.chunks(batch_size):
        pred = model.predict(hist).double()
        y = target.double() * std + mean
        num += ((pred.double() - target.double()) * std).pow(2).sum(dim=(0, 1, 2))
        den += y.pow(2).sum(dim=(0, 1, 2))
    return float(torch.mean(torch.sqrt(num) / torch.sqrt(den.clamp_min(1e-300))))


def _iterate(cfg: TrainConfig, n_pairs: int, step_fn, val_fn, train_log: Optional[TrainLog]):
    """Shared epoch/step loop; returns ``(steps, epochs, best_val, best_step)``."""
    budget = _Budget(cfg)
    step, epoch = 0, 0
    best_val, best_step = math.inf, -1
    if n_pairs == 0:
        raise ValidationError("no training pairs: every trajectory is shorter than k+1")
    while not budget.exhausted(step, epoch):
        order = epoch_order(cfg.seed, epoch, n_pairs)
        for start in range(0, n_pairs, cfg.batch_size):
            if budget.exhausted(step, epoch):
                break
            loss = step_fn(order[start:start + cfg.batch_size], step)
            step += 1
            val = None
            if step % cfg.val_every == 0:
                val = val_fn(step)
                if val < best_val:
                    best_val, best_step = val, step
            if train_log is not None:
                train_log.append(step, loss, val, budget.elapsed())
        else:
            epoch += 1
    if step > 0 and step % cfg.val_every != 0:
        val = val_fn(step)
        if val < best_val:
            best_val, best_step = val, step
    return step, epoch, best_val, best_step


def train_deterministic(train: Sequence[Trajectory], model_config: ModelConfig, train_config: TrainConfig,
                        val: Optional[Sequence[Trajectory]] = None, train_log: Optional[TrainLog] = None,
                        stats: Optional[NormalizationStats] = None) -> StftCheckpoint:
    """Fit the StFT on one-step MSE in normalized space and return the best-validation checkpoint.

    Normalization is fit on ``train`` only.  Without ``val`` the training
    pairs double as the validation set.
    """
    cfg = train_config
    dtype = DTYPES[cfg.dtype]
    stats = stats if stats is not None else fit_normalization(train)
    grid = train[0].grid
    gen = torch.Generator().manual_seed(RngStream(cfg.seed, STREAM_INIT).torch_seed())
    model = StftModel(model_config, grid.width, grid.height, grid.n_vars, generator=gen).to(dtype)
    pairs = make_pairs(train, model_config.k)
    batches = _Batches(pairs, stats, dtype)
    val_batches = _Batches(make_pairs(val, model_config.k), stats, dtype) if val else batches

    info = {"stage": "deterministic", "seed": cfg.seed}
    ckpt = StftCheckpoint(model, model_config, stats, grid.to_dict(), info)
    if cfg.epoch_budget() == 0 or cfg.max_steps == 0 or cfg.wall_clock == 0:
        info.update(steps=0, epochs=0)
        return ckpt

    opt = torch.optim.AdamW(param_groups(model, cfg.weight_decay), lr=cfg.lr)
    state = {"best": copy.deepcopy(model.state_dict()), "good": copy.deepcopy(model.state_dict())}

    def step_fn(rows, step):
        model.train()
        hist, target = batches.get(rows)
        loss = torch.mean((model.predict(hist) - target) ** 2)
        if not torch.isfinite(loss):
            model.load_state_dict(state["good"])
            info.update(aborted_at=step, steps=step)
            raise TrainingDiverged(f"non-finite training loss at iteration {step}", ckpt)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        state["good"] = copy.deepcopy(model.state_dict())
        return loss.item()

    best = {"val": math.inf}

    def val_fn(step):
        model.eval()
        v = one_step_rel_l2(model, val_batches, stats)
        if v < best["val"]:
            best["val"] = v
            state["best"] = copy.deepcopy(model.state_dict())
        return v

    steps, epochs, best_val, best_step = _iterate(cfg, len(pairs), step_fn, val_fn, train_log)
    model.load_state_dict(state["best"])
    model.eval()
    info.update(steps=steps, epochs=epochs, best_val_rel_l2=best_val, best_step=best_step)
    return ckpt


def train_flow(train: Sequence[Trajectory], stft: StftCheckpoint, flow_config: FlowConfig,
               train_config: TrainConfig, val: Optional[Sequence[Trajectory]] = None,
               train_log: Optional[TrainLog] = None) -> FlowCheckpoint:
    """Fit the residual velocity net against a frozen StFT; validation reports the flow loss.

    The net runs in the StFT's dtype so the StFT hash stays bound to the file it came from.
    """
    stft_model = stft.model
    dtype = next(stft_model.parameters()).dtype
    stft_model.eval()
    trainable = [p.requires_grad for p in stft_model.parameters()]
    for p in stft_model.parameters():
        p.requires_grad_(False)
    try:
        return _train_flow(train, stft, flow_config, train_config, val, train_log, dtype)
    finally:
        # kernel selection depends on requires_grad, so restore it for bit-identical reuse
        for p, flag in zip(stft_model.parameters(), trainable):
            p.requires_grad_(flag)


def _train_flow(train, stft, flow_config, train_config, val, train_log, dtype) -> FlowCheckpoint:
    cfg = train_config
    stft_model = stft.model
    stft_hash = stft.content_hash
    grid = stft.grid
    gen = torch.Generator().manual_seed(RngStream(cfg.seed, STREAM_INIT).torch_seed())
    net = VelocityNet(flow_config, grid["width"], grid["height"], len(grid["variables"]), stft.k,
                      generator=gen).to(dtype)
    pairs = make_pairs(train, stft.k)
    batches = _Batches(pairs, stft.stats, dtype)
    val_batches = _Batches(make_pairs(val, stft.k), stft.stats, dtype) if val else batches
    info = {"stage": "flow", "seed": cfg.seed}
    ckpt = FlowCheckpoint(net, flow_config, stft_hash, grid, stft.k, info)
    if cfg.epoch_budget() == 0 or cfg.max_steps == 0 or cfg.wall_clock == 0:
        info.update(steps=0, epochs=0)
        return ckpt

    opt = torch.optim.AdamW(param_groups(net, cfg.weight_decay), lr=cfg.lr)
    noise = RngStream(cfg.seed, STREAM_FLOW_NOISE)
    state = {"best": copy.deepcopy(net.state_dict()), "good": copy.deepcopy(net.state_dict())}

    def residual_batch(b, rows):
        hist, target = b.get(rows)
        with torch.no_grad():
            pred = stft_model.predict(hist)
        return hist, pred, target - pred

    def step_fn(rows, step):
        net.train()
        hist, pred, res = residual_batch(batches, rows)
        loss = flow_loss(net, hist, pred, res, noise)
        if not torch.isfinite(loss):
            net.load_state_dict(state["good"])
            info.update(aborted_at=step, steps=step)
            raise TrainingDiverged(f"non-finite flow loss at iteration {step}", ckpt)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        state["good"] = copy.deepcopy(net.state_dict())
        return loss.item()

    best = {"val": math.inf}

    @torch.no_grad()
    def val_fn(step):
        net.eval()
        rng = RngStream(cfg.seed, STREAM_FLOW_VAL)
        total, n = 0.0, 0
        for start in range(0, len(val_batches.pairs), cfg.batch_size):
            rows = np.arange(start, min(len(val_batches.pairs), start + cfg.batch_size))
            hist, pred, res = residual_batch(val_batches, rows)
            total += float(flow_loss(net, hist, pred, res, rng)) * len(rows)
            n += len(rows)
        v = total / n
        if v < best["val"]:
            best["val"] = v
            state["best"] = copy.deepcopy(net.state_dict())
        return v

    steps, epochs, best_val, best_step = _iterate(cfg, len(pairs), step_fn, val_fn, train_log)
    net.load_state_dict(state["best"])
    net.eval()
    if stft.content_hash != stft_hash:
        raise RuntimeError("frozen StFT parameters changed during flow training")
    info.update(steps=steps, epochs=epochs, best_val_flow_loss=best_val, best_step=best_step)
    return ckpt
