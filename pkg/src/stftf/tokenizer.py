"""Overlapping patch tokenizer and averaging detokenizer.

Patches slide with stride ``p - o`` along each spatial axis.  The grid is
zero-padded on the high-index side just enough for the last patch to end on
the padded edge; the detokenizer averages every patch cell covering a grid
cell and crops the padding away.

All functions accept numpy arrays or torch tensors, with or without a
leading batch axis, and are differentiable when given tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core.types import ValidationError


class LayoutError(ValidationError):
    pass


def _axis_plan(n: int, p: int, o: int) -> tuple[int, int]:
    if o >= p or o < 0:
        raise LayoutError(f"overlap must satisfy 0 <= o < p, got p={p}, o={o}")
    s = p - o
    if n >= p:
        pad = (-(n - p)) % s
    else:
        pad = p - n
        if pad >= s:
            raise LayoutError(
                f"patch size {p} exceeds grid size {n} plus the padding cap (stride {s} - 1); "
                f"use a smaller patch or overlap")
    count = (n + pad - p) // s + 1
    return pad, count


@dataclass(frozen=True)
class PatchLayout:
    W: int
    H: int
    p_h: int
    p_w: int
    o_h: int
    o_w: int
    pad_h: int
    pad_w: int
    N_h: int
    N_w: int

    @property
    def s_h(self) -> int:
        return self.p_h - self.o_h

    @property
    def s_w(self) -> int:
        return self.p_w - self.o_w

    @property
    def padded_shape(self) -> tuple[int, int]:
        return (self.W + self.pad_h, self.H + self.pad_w)

    @property
    def n_tokens(self) -> int:
        return self.N_h * self.N_w

    @property
    def patch_area(self) -> int:
        return self.p_h * self.p_w

    def coverage(self) -> np.ndarray:
        """Number of patches covering each cell of the unpadded grid (W x H)."""
        return np.outer(_axis_coverage(self.W, self.p_h, self.s_h, self.N_h),
                        _axis_coverage(self.H, self.p_w, self.s_w, self.N_w))


def _axis_coverage(n, p, s, count):
    x = np.arange(n)
    # patch i covers [i*s, i*s + p)
    hi = np.minimum(x // s, count - 1)
    lo = np.maximum(np.ceil((x - p + 1) / s).astype(int), 0)
    return (hi - lo + 1).astype(np.int64)


def plan_layout(W: int, H: int, p_h: int, p_w: int, o_h: int = 0, o_w: int = 0) -> PatchLayout:
    pad_h, N_h = _axis_plan(W, p_h, o_h)
    pad_w, N_w = _axis_plan(H, p_w, o_w)
    return PatchLayout(W, H, p_h, p_w, o_h, o_w, pad_h, pad_w, N_h, N_w)


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """Per-variable patch vectors, ``[B x] N_h x N_w x C x (T' * p_h * p_w)``."""

    layout: PatchLayout
    tokens: torch.Tensor
    T_stack: int
    C: int

    @property
    def token_dim(self) -> int:
        return self.T_stack * self.layout.patch_area


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def tokenize(field, layout: PatchLayout) -> TokenGrid:
    """Extract overlapping patches from a ``[B x] T' x W x H x C`` field."""
    x = _as_tensor(field)
    squeeze = x.ndim == 4
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 5:
        raise LayoutError(f"expected [B x] T' x W x H x C, got shape {tuple(x.shape)}")
    B, T, W, H, C = x.shape
    if (W, H) != (layout.W, layout.H):
        raise LayoutError(f"field spatial shape {(W, H)} does not match layout {(layout.W, layout.H)}")
    if layout.pad_h or layout.pad_w:
        # F.pad pads trailing dims first: (C lo, C hi, H lo, H hi, W lo, W hi)
        x = F.pad(x, (0, 0, 0, layout.pad_w, 0, layout.pad_h))
    x = x.unfold(2, layout.p_h, layout.s_h).unfold(3, layout.p_w, layout.s_w)
    # B, T, N_h, N_w, C, p_h, p_w
    x = x.permute(0, 2, 3, 4, 1, 5, 6).reshape(B, layout.N_h, layout.N_w, C, T * layout.patch_area)
    if squeeze:
        x = x.squeeze(0)
    return TokenGrid(layout, x, T, C)


def detokenize(patches, layout: PatchLayout):
    """Reassemble ``[B x] N_h x N_w x C x (p_h * p_w)`` patch values into ``[B x] W x H x C``.

    Each output cell is the plain mean of all patch cells covering it.
    """
    P = _as_tensor(patches)
    squeeze = P.ndim == 4
    if squeeze:
        P = P.unsqueeze(0)
    if P.ndim != 5 or P.shape[1:3] != (layout.N_h, layout.N_w) or P.shape[-1] != layout.patch_area:
        raise LayoutError(
            f"expected [B x] {layout.N_h} x {layout.N_w} x C x {layout.patch_area}, got {tuple(P.shape)}")
    B, _, _, C, _ = P.shape
    cols = (P.reshape(B, layout.N_h, layout.N_w, C, layout.p_h, layout.p_w)
             .permute(0, 3, 4, 5, 1, 2)
             .reshape(B, C * layout.patch_area, layout.n_tokens))
    summed = F.fold(cols, output_size=layout.padded_shape, kernel_size=(layout.p_h, layout.p_w),
                    stride=(layout.s_h, layout.s_w))
    count = torch.as_tensor(layout.coverage(), dtype=summed.dtype, device=summed.device)
    if torch.any(count == 0):
        raise RuntimeError("detokenize: a grid cell is covered by no patch")
    out = summed[:, :, :layout.W, :layout.H] / count
    out = out.permute(0, 2, 3, 1)
    if squeeze:
        out = out.squeeze(0)
    return out
