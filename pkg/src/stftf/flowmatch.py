"""Rectified-flow residual corrector.

A DiT-style velocity network learns the distribution of the residual between
the ground truth and the deterministic forecast, conditioned on the history
window and on the forecast itself, both fed in as extra tokens.  Flow time
enters every block through adaLN-Zero modulation.  Everything here works on
normalized fields.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .core.config import strict_from_dict
from .core.types import NormalizationStats, RngStream, ValidationError
from .model.checkpoint import CHECKPOINT_VERSION, CheckpointError, StftCheckpoint, _load_payload, state_hash
from .model.layers import Mlp, SelfAttention, init_weights, timestep_features, zero_linear
from .tokenizer import detokenize, plan_layout, tokenize


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    depth: int = 4
    hidden_dim: int = 64
    n_heads: int = 4
    patch_size: int = 4
    n_sample_steps: int = 50
    tau_embed_dim: int = 64

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("flow depth must be >= 1")
        if self.n_sample_steps < 1:
            raise ValidationError("n_sample_steps must be >= 1")
        if self.hidden_dim % self.n_heads:
            raise ValidationError("flow hidden_dim must be divisible by n_heads")
        if self.patch_size < 1:
            raise ValidationError("patch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        return strict_from_dict(cls, d)


def interpolate(x0, x1, tau):
    """Straight-line interpolant ``tau * x1 + (1 - tau) * x0``.

    ``tau`` may be a scalar or one value per batch item.
    """
    if x0.shape != x1.shape:
        raise ValidationError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    if isinstance(tau, torch.Tensor) and tau.ndim == 1:
        tau = tau.reshape(-1, *([1] * (x0.ndim - 1)))
    t_min = float(tau.min()) if isinstance(tau, torch.Tensor) else float(np.min(tau))
    t_max = float(tau.max()) if isinstance(tau, torch.Tensor) else float(np.max(tau))
    if t_min < 0.0 or t_max > 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got range [{t_min}, {t_max}]")
    return tau * x1 + (1 - tau) * x0


def _modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, c):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.adaLN_modulation(c).chunk(6, dim=-1)
        x = x + gate1.unsqueeze(1) * self.attn(_modulate(self.norm1(x), shift1, scale1))
        return x + gate2.unsqueeze(1) * self.mlp(_modulate(self.norm2(x), shift2, scale2))


class VelocityNet(nn.Module):
    """Velocity field ``M(X_tau, tau | history, forecast)`` on a ``W x H x C`` grid."""

    def __init__(self, cfg: FlowConfig, W: int, H: int, n_vars: int, k: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg, self.k, self.grid_shape = cfg, k, (W, H, n_vars)
        self.layout = plan_layout(W, H, cfg.patch_size, cfg.patch_size, 0, 0)
        P, D, N = self.layout.patch_area, cfg.hidden_dim, self.layout.n_tokens
        self.x_embed = nn.Linear(n_vars * P, D)
        self.hist_embed = nn.Linear(k * n_vars * P, D)
        self.pred_embed = nn.Linear(n_vars * P, D)
        self.pos_embed = nn.Parameter(torch.zeros(1, N, D))
        self.type_embed = nn.Parameter(torch.zeros(3, D))
        self.tau_embed = nn.Sequential(nn.Linear(cfg.tau_embed_dim, D), nn.SiLU(), nn.Linear(D, D))
        self.blocks = nn.ModuleList([DiTBlock(D, cfg.n_heads) for _ in range(cfg.depth)])
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(D, 2 * D))
        self.out = nn.Linear(D, n_vars * P)
        init_weights(self, generator)
        for blk in self.blocks:
            zero_linear(blk.adaLN_modulation[-1])
        zero_linear(self.final_modulation[-1])
        zero_linear(self.out)

    def _tokens(self, field5, embed):
        tg = tokenize(field5, self.layout).tokens
        B = tg.shape[0]
        return embed(tg.reshape(B, self.layout.n_tokens, -1))

    def forward(self, x_tau, tau, cond_history, cond_pred):
        B = x_tau.shape[0]
        if tuple(x_tau.shape[1:]) != self.grid_shape or tuple(cond_pred.shape) != tuple(x_tau.shape):
            raise ValidationError("velocity net inputs do not match the configured grid")
        if cond_history.shape[1] != self.k:
            raise ValidationError(f"history must have {self.k} snapshots, got {cond_history.shape[1]}")
        tau = torch.as_tensor(tau, dtype=x_tau.dtype, device=x_tau.device).reshape(-1).expand(B)
        N = self.layout.n_tokens
        tokens = torch.cat([
            self._tokens(x_tau.unsqueeze(1), self.x_embed) + self.type_embed[0],
            self._tokens(cond_history, self.hist_embed) + self.type_embed[1],
            self._tokens(cond_pred.unsqueeze(1), self.pred_embed) + self.type_embed[2],
        ], dim=1) + self.pos_embed.repeat(1, 3, 1)
        c = self.tau_embed(timestep_features(tau * 1000.0, self.cfg.tau_embed_dim))
        for blk in self.blocks:
            tokens = blk(tokens, c)
        shift, scale = self.final_modulation(c).chunk(2, dim=-1)
        y = self.out(_modulate(self.final_norm(tokens[:, :N]), shift, scale))
        y = y.reshape(B, self.layout.N_h, self.layout.N_w, self.grid_shape[2], self.layout.patch_area)
        return detokenize(y, self.layout)


def flow_loss_at(net: VelocityNet, cond_history, cond_pred, residual, x0, tau):
    """Squared error (element mean) between the predicted velocity and ``residual - x0``."""
    x_tau = interpolate(x0, residual, tau)
    v = net(x_tau, tau, cond_history, cond_pred)
    return ((v - (residual - x0)) ** 2).mean()


def draw_normal(rng: RngStream, shape, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(rng.normal(tuple(shape))).to(dtype=like.dtype, device=like.device)


def flow_loss(net: VelocityNet, cond_history, cond_pred, residual, rng: RngStream):
    """Rectified-flow objective with ``x0 ~ N(0, I)`` and one ``tau ~ U(0, 1)`` per batch item."""
    x0 = draw_normal(rng, residual.shape, residual)
    tau = torch.from_numpy(rng.uniform(size=residual.shape[0])).to(residual)
    return flow_loss_at(net, cond_history, cond_pred, residual, x0, tau)


@torch.no_grad()
def sample_residual(net, cond_history, cond_pred, n_steps: int, rng: Optional[RngStream] = None,
                    stats: Optional[NormalizationStats] = None, x0: Optional[torch.Tensor] = None,
                    check_finite: bool = True):
    """Euler-integrate ``dX/dtau = M(X, tau)`` from Gaussian noise at 0 to 1.

    Returns the normalized residual, or residual in physical units when
    ``stats`` is given (a residual is a difference, so only the std applies).
    """
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    if x0 is None:
        if rng is None:
            raise ValidationError("either rng or x0 is required")
        x0 = draw_normal(rng, cond_pred.shape, cond_pred)
    x = x0
    d_tau = 1.0 / n_steps
    for i in range(n_steps):
        tau = torch.full((x.shape[0],), i * d_tau, dtype=x.dtype, device=x.device)
        x = x + d_tau * net(x, tau, cond_history, cond_pred)
        if check_finite and not torch.all(torch.isfinite(x)):
            raise SamplingError(f"non-finite values during flow integration at step {i}")
    if stats is not None:
        x = x * torch.as_tensor(stats.std, dtype=x.dtype, device=x.device)
    return x


@dataclass
class FlowCheckpoint:
    net: VelocityNet
    config: FlowConfig
    stft_hash: str
    grid: dict
    k: int
    info: dict = field(default_factory=dict)

    @property
    def content_hash(self) -> str:
        return state_hash(self.net.state_dict(), asdict(self.config), self.stft_hash)

    def save(self, path) -> str:
        payload = {
            "kind": "flow",
            "version": CHECKPOINT_VERSION,
            "flow_config": asdict(self.config),
            "stft_hash": self.stft_hash,
            "grid": self.grid,
            "k": self.k,
            "state_dict": self.net.state_dict(),
            "info": self.info,
            "content_hash": self.content_hash,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
        return payload["content_hash"]

    def check_pair(self, stft: StftCheckpoint):
        if stft.content_hash != self.stft_hash:
            raise CheckpointError(
                "flow checkpoint was trained against a different StFT checkpoint "
                f"(expected hash {self.stft_hash[:12]}, got {stft.content_hash[:12]})")


def load_flow(path, stft: Optional[StftCheckpoint] = None) -> FlowCheckpoint:
    payload = _load_payload(path, "flow")
    cfg = FlowConfig.from_dict(payload["flow_config"])
    g = payload["grid"]
    net = VelocityNet(cfg, g["width"], g["height"], len(g["variables"]), payload["k"])
    net = net.to(next(iter(payload["state_dict"].values())).dtype)
    net.load_state_dict(payload["state_dict"])
    ckpt = FlowCheckpoint(net, cfg, payload["stft_hash"], g, payload["k"], payload.get("info", {}))
    if ckpt.content_hash != payload["content_hash"]:
        raise CheckpointError(f"{path}: content hash mismatch, file is corrupted")
    if stft is not None:
        ckpt.check_pair(stft)
    return ckpt
