"""Hierarchical spatio-temporal Fourier transformer.

Each level tokenizes the temporally stacked history (plus the coarser
prediction for levels after the first), mixes variables into one token per
patch, runs a frequency path and a spatio-temporal path, merges them
additively and detokenizes to a ``W x H x C`` increment.  The forecast is the
sum of the level increments.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from ..core.types import LevelConfig, ModelConfig, ValidationError
from ..tokenizer import PatchLayout, detokenize, plan_layout, tokenize
from .layers import TransformerLayer, init_weights, zero_linear

log = logging.getLogger(__name__)


def temporal_stack(history: torch.Tensor, prev_prediction: Optional[torch.Tensor]) -> torch.Tensor:
    """Append the conditioning prediction as the newest slice: ``B x T' x W x H x C``."""
    if prev_prediction is None:
        return history
    if prev_prediction.shape != history[:, -1].shape:
        raise ValidationError(
            f"conditioning prediction shape {tuple(prev_prediction.shape)} does not match "
            f"snapshot shape {tuple(history[:, -1].shape)}")
    return torch.cat([history, prev_prediction.unsqueeze(1)], dim=1)


def max_modes(n: int) -> int:
    return n // 2 + 1


def retained_rows(n: int, m: int) -> torch.Tensor:
    """Indices of full-FFT bins with |frequency| < m."""
    return torch.tensor([i for i in range(n) if min(i, n - i) < m], dtype=torch.long)


def _spectral_dims(x: torch.Tensor, temporal: bool):
    # token grid is B x [T' x] N_h x N_w x D
    return (1, 2, 3) if temporal else (1, 2)


def fft_filter(x: torch.Tensor, m_h: int, m_w: int, temporal: bool = False) -> torch.Tensor:
    """Low-pass spectrum of a token grid.

    ``x`` is ``B x N_h x N_w x D`` (or ``B x T' x N_h x N_w x D`` with
    ``temporal=True``).  The transform runs over the grid axes (and time) and
    keeps the ``|k_h| < m_h`` rows and ``0 <= k_w < m_w`` half-spectrum
    columns; the temporal axis is never truncated.  Returns complex
    coefficients ``B x [T' x] R_h x m_w x D``.
    """
    n_h, n_w = x.shape[-3], x.shape[-2]
    if m_h > max_modes(n_h) or m_w > max_modes(n_w):
        raise ValidationError(
            f"requested modes ({m_h}, {m_w}) exceed available ({max_modes(n_h)}, {max_modes(n_w)}) "
            f"for a {n_h} x {n_w} token grid")
    dims = _spectral_dims(x, temporal)
    spec = torch.fft.rfftn(x, dim=dims)
    rows = retained_rows(n_h, m_h).to(x.device)
    return spec.index_select(-3, rows)[..., :m_w, :]


def ifft_pad(coeffs: torch.Tensor, n_h: int, n_w: int, m_h: int, m_w: int, temporal: bool = False) -> torch.Tensor:
    """Zero-fill the truncated spectrum back to full size and invert it."""
    shape = list(coeffs.shape)
    shape[-3] = n_h
    shape[-2] = n_w // 2 + 1
    full = coeffs.new_zeros(shape)
    rows = retained_rows(n_h, m_h).to(coeffs.device)
    full[..., rows, :m_w, :] = coeffs
    dims = _spectral_dims(full, temporal)
    sizes = [full.shape[d] for d in dims[:-1]] + [n_w]
    return torch.fft.irfftn(full, s=sizes, dim=dims)


class FrequencyPath(nn.Module):
    """FFT filter -> frequency embedder -> transformer -> inverse FFT -> linear."""

    def __init__(self, dim: int, depth: int, n_heads: int, layout: PatchLayout, m_h: int, m_w: int,
                 n_vars: int, t_len: int = 1, temporal: bool = False):
        super().__init__()
        self.layout, self.m_h, self.m_w, self.temporal, self.t_len = layout, m_h, m_w, temporal, t_len
        n_rows = len(retained_rows(layout.N_h, m_h))
        n_pos = (t_len if temporal else 1) * n_rows * m_w
        width = 2 * dim  # real and imaginary parts side by side
        self.embed = nn.Linear(width, width)
        self.pos_embed = nn.Parameter(torch.zeros(1, n_pos, width))
        self.blocks = nn.ModuleList([TransformerLayer(width, n_heads) for _ in range(depth)])
        self.unembed = nn.Linear(width, width)
        self.out = nn.Linear(dim * (t_len if temporal else 1), n_vars * layout.patch_area)

    def forward(self, mixed: torch.Tensor, return_spectrum: bool = False):
        coeffs = fft_filter(mixed, self.m_h, self.m_w, self.temporal)
        grid_shape = coeffs.shape[1:-1]
        B, D = coeffs.shape[0], coeffs.shape[-1]
        f = torch.cat([coeffs.real, coeffs.imag], dim=-1).reshape(B, -1, 2 * D)
        f = self.embed(f) + self.pos_embed
        for blk in self.blocks:
            f = blk(f)
        f = self.unembed(f).reshape(B, *grid_shape, 2 * D)
        f_c = torch.complex(f[..., :D], f[..., D:])
        x = ifft_pad(f_c, self.layout.N_h, self.layout.N_w, self.m_h, self.m_w, self.temporal)
        if self.temporal:
            # B x T' x N_h x N_w x D -> B x N_h x N_w x (T' D)
            x = x.permute(0, 2, 3, 1, 4).reshape(B, self.layout.N_h, self.layout.N_w, -1)
        y = self.out(x)
        y = y.reshape(B, self.layout.N_h, self.layout.N_w, -1, self.layout.patch_area)
        if return_spectrum:
            return y, coeffs
        return y


class SpatioTemporalPath(nn.Module):
    """Token embedder + positional embeddings -> transformer -> linear."""

    def __init__(self, dim: int, depth: int, n_heads: int, layout: PatchLayout, n_vars: int):
        super().__init__()
        self.layout = layout
        self.embed = nn.Linear(dim, dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, layout.n_tokens, dim))
        self.blocks = nn.ModuleList([TransformerLayer(dim, n_heads) for _ in range(depth)])
        self.out = nn.Linear(dim, n_vars * layout.patch_area)

    def forward(self, mixed: torch.Tensor, return_embedding: bool = False):
        B = mixed.shape[0]
        e = self.embed(mixed.reshape(B, self.layout.n_tokens, -1)) + self.pos_embed
        for blk in self.blocks:
            e = blk(e)
        y = self.out(e).reshape(B, self.layout.N_h, self.layout.N_w, -1, self.layout.patch_area)
        if return_embedding:
            return y, e
        return y


@dataclass
class LevelOutput:
    u_level: torch.Tensor
    diagnostics: dict = field(default_factory=dict)


class StftLevel(nn.Module):
    def __init__(self, cfg: LevelConfig, W: int, H: int, n_vars: int, t_len: int, freq_mode: str = "2D"):
        super().__init__()
        self.cfg, self.t_len, self.n_vars = cfg, t_len, n_vars
        self.temporal = freq_mode == "3D"
        self.layout = plan_layout(W, H, cfg.p_h, cfg.p_w, cfg.o_h, cfg.o_w)
        P = self.layout.patch_area
        D = cfg.hidden_dim
        self.mixer2 = nn.Linear(n_vars * t_len * P, D)
        self.st_path = SpatioTemporalPath(D, cfg.depth, cfg.n_heads, self.layout, n_vars)
        if cfg.use_freq_path:
            m_h = min(cfg.m_h, max_modes(self.layout.N_h))
            m_w = min(cfg.m_w, max_modes(self.layout.N_w))
            if (m_h, m_w) != (cfg.m_h, cfg.m_w):
                log.warning("token grid %dx%d supports at most (%d, %d) modes; clamping requested (%d, %d)",
                            self.layout.N_h, self.layout.N_w, m_h, m_w, cfg.m_h, cfg.m_w)
            self.modes = (m_h, m_w)
            mix_in = n_vars * P if self.temporal else n_vars * t_len * P
            self.mixer1 = nn.Linear(mix_in, D)
            self.freq_path = FrequencyPath(D, cfg.depth, cfg.n_heads, self.layout, m_h, m_w, n_vars,
                                           t_len, self.temporal)
        else:
            self.modes = None
            self.mixer1 = None
            self.freq_path = None

    def variable_mix(self, tokens: torch.Tensor, mixer_id: int) -> torch.Tensor:
        """Fuse per-variable tokens ``B x N_h x N_w x C x (T' P)`` into ``D``-dim tokens."""
        B, n_h, n_w, C, L = tokens.shape
        if C != self.n_vars or L != self.t_len * self.layout.patch_area:
            raise ValidationError(f"token shape {tuple(tokens.shape)} does not match level configuration")
        if mixer_id == 2:
            return self.mixer2(tokens.reshape(B, n_h, n_w, C * L))
        if mixer_id != 1 or self.mixer1 is None:
            raise ValueError(f"mixer {mixer_id} not available on this level")
        if self.temporal:
            t = tokens.reshape(B, n_h, n_w, C, self.t_len, -1).permute(0, 4, 1, 2, 3, 5)
            return self.mixer1(t.reshape(B, self.t_len, n_h, n_w, -1))
        return self.mixer1(tokens.reshape(B, n_h, n_w, C * L))

    def patch_predictions(self, stacked: torch.Tensor, diagnostics: Optional[dict] = None):
        tokens = tokenize(stacked, self.layout).tokens
        y_st, e = self.st_path(self.variable_mix(tokens, 2), return_embedding=True)
        if diagnostics is not None:
            diagnostics["e_norm"] = e.detach().norm()
        if self.freq_path is None:
            return y_st, None
        y_f, f = self.freq_path(self.variable_mix(tokens, 1), return_spectrum=True)
        if diagnostics is not None:
            diagnostics["f_energy"] = f.detach().abs().pow(2).sum()
        return y_st, y_f

    def forward(self, history: torch.Tensor, prev_prediction: Optional[torch.Tensor] = None) -> LevelOutput:
        stacked = temporal_stack(history, prev_prediction)
        if stacked.shape[1] != self.t_len:
            raise ValidationError(f"level expects {self.t_len} stacked snapshots, got {stacked.shape[1]}")
        diag: dict = {}
        y_st, y_f = self.patch_predictions(stacked, diag)
        merged = y_st if y_f is None else y_st + y_f
        return LevelOutput(detokenize(merged, self.layout), diag)


class StftModel(nn.Module):
    """Coarse-to-fine stack of ``StftLevel`` blocks operating on normalized fields."""

    def __init__(self, config: ModelConfig, W: int, H: int, n_vars: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        self.grid_shape = (W, H, n_vars)
        self.levels = nn.ModuleList([
            StftLevel(lv, W, H, n_vars, config.k if i == 0 else config.k + 1, config.freq_mode)
            for i, lv in enumerate(config.levels)
        ])
        init_weights(self, generator)
        for lvl in self.levels:
            zero_linear(lvl.st_path.out)
            if lvl.freq_path is not None:
                zero_linear(lvl.freq_path.out)

    def forward(self, history: torch.Tensor):
        """``history``: ``B x k x W x H x C``.  Returns ``(u_next, [LevelOutput, ...])``."""
        if history.ndim != 5 or history.shape[1] != self.config.k or tuple(history.shape[2:]) != self.grid_shape:
            raise ValidationError(
                f"history must be B x {self.config.k} x {self.grid_shape}, got {tuple(history.shape)}")
        u = torch.zeros_like(history[:, -1])
        outputs = []
        cond = None
        for lvl in self.levels:
            out = lvl(history, cond)
            outputs.append(out)
            u = u + out.u_level
            cond = u if self.config.condition_mode == "cumulative" else out.u_level
        return u, outputs

    def predict(self, history: torch.Tensor) -> torch.Tensor:
        return self(history)[0]
