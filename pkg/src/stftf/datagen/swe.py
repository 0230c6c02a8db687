"""Viscous shallow-water equations on a beta-plane channel (Arakawa C-grid).

The domain is ``x in [-pi, pi)`` (longitude-like, periodic) by
``y in [-pi/2, pi/2]`` (latitude-like, free-slip walls), in units where the
planetary radius and rotation rate are 1.  Coriolis is ``f = f0 + beta_plane * y``.
The initial state is the mid-latitude jet in discrete geostrophic balance plus
a localized Gaussian height bump; the flux-form continuity equation with
closed walls conserves total volume to round-off.

Default constants follow the usual barotropic-jet instability setup
rescaled to these units; they are repo defaults, documented in the README.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..core.types import GridSpec, RngStream, Trajectory, ValidationError
from .ns import SolverError

# radius 6.37122e6 m, rotation 7.292e-5 1/s, g 9.80616 m/s^2
_A, _OMEGA, _G = 6.37122e6, 7.292e-5, 9.80616
_VEL = _A * _OMEGA


@dataclass(frozen=True)
class SweConfig:
    g: float = _G / (_A * _OMEGA ** 2)
    nu: float = 1e-4
    f0: float = 0.0
    beta_plane: float = 2.0
    mean_depth: float = 1.0e4 / _A
    u_max: float = 80.0 / _VEL
    phi0: float = math.pi / 7
    phi1: float = math.pi / 2 - math.pi / 7
    h_hat: float = 120.0 / _A
    phi2: float = math.pi / 4
    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 15.0
    width: int = 256
    height: int = 256
    n_snapshots: int = 72
    T_end: float = 6 * 86400.0 * _OMEGA
    cfl: float = 0.5
    blowup: float = 1e6

    def __post_init__(self):
        if not self.phi0 < self.phi1:
            raise ValidationError("jet needs phi0 < phi1")
        if self.width < 4 or self.height < 4 or self.n_snapshots < 1:
            raise ValidationError("grid must be at least 4x4 and n_snapshots >= 1")
        if self.g <= 0 or self.mean_depth <= 0 or self.nu < 0:
            raise ValidationError("g and mean_depth must be positive, nu non-negative")

    @property
    def grid(self) -> GridSpec:
        dt = self.T_end / (self.n_snapshots - 1) if self.n_snapshots > 1 else 1.0
        return GridSpec(self.width, self.height, ("u", "v", "h", "V"), dt, (2 * math.pi, math.pi))


def sample_perturbation_shape(rng: RngStream, size=None):
    """``alpha ~ U[0.1, 0.5]``, ``beta ~ U[0.03, 0.2]``."""
    return rng.uniform(0.1, 0.5, size), rng.uniform(0.03, 0.2, size)


def jet_profile(y, u_max, phi0, phi1):
    y = np.asarray(y, dtype=float)
    n = np.exp(-4.0 / (phi1 - phi0) ** 2)
    out = np.zeros_like(y)
    inside = (y > phi0) & (y < phi1)
    yi = y[inside]
    out[inside] = u_max / n * np.exp(1.0 / ((yi - phi0) * (yi - phi1)))
    return out


def height_perturbation(lam, y, h_hat, phi2, alpha, beta):
    return h_hat * np.cos(y) * np.exp(-(lam / alpha) ** 2) * np.exp(-((phi2 - y) / beta) ** 2)


class SweSolver:
    def __init__(self, cfg: SweConfig):
        self.cfg = cfg
        nx, ny = cfg.width, cfg.height
        self.nx, self.ny = nx, ny
        self.dx, self.dy = 2 * math.pi / nx, math.pi / ny
        self.x_c = -math.pi + (np.arange(nx) + 0.5) * self.dx
        self.x_u = -math.pi + np.arange(nx) * self.dx
        self.y_c = -math.pi / 2 + (np.arange(ny) + 0.5) * self.dy
        self.y_v = -math.pi / 2 + np.arange(ny + 1) * self.dy
        self.f_c = cfg.f0 + cfg.beta_plane * self.y_c
        self.f_v = cfg.f0 + cfg.beta_plane * self.y_v

    def balanced_height(self, u_col):
        """Height column in exact discrete geostrophic balance with the zonal flow ``u_col``."""
        ubar = 0.5 * (u_col[1:] + u_col[:-1])
        dh = -self.dy * self.f_v[1:-1] * ubar / self.cfg.g
        h = np.concatenate([[0.0], np.cumsum(dh)])
        return h - h.mean() + self.cfg.mean_depth

    def initial_state(self, sign: float = 1.0):
        cfg = self.cfg
        u_col = jet_profile(self.y_c, cfg.u_max, cfg.phi0, cfg.phi1)
        u = np.repeat(u_col[None], self.nx, 0)
        v = np.zeros((self.nx, self.ny + 1))
        h = np.repeat(self.balanced_height(u_col)[None], self.nx, 0)
        lam, yy = np.meshgrid(self.x_c, self.y_c, indexing="ij")
        h = h + sign * height_perturbation(lam, yy, cfg.h_hat, cfg.phi2, cfg.alpha, cfg.beta)
        return u, v, h

    def _lap_centered(self, a):
        """Laplacian for u and h: periodic in x, mirrored (zero normal gradient) at the walls."""
        ay = np.concatenate([a[:, :1], a, a[:, -1:]], 1)
        return ((np.roll(a, -1, 0) - 2 * a + np.roll(a, 1, 0)) / self.dx ** 2
                + (ay[:, 2:] - 2 * a + ay[:, :-2]) / self.dy ** 2)

    def rhs(self, u, v, h):
        cfg, dx, dy = self.cfg, self.dx, self.dy
        # u[i,j] sits on the west face of cell (i,j); v[i,j] on the south face
        uy = np.concatenate([u[:, :1], u, u[:, -1:]], 1)
        v_at_u = 0.25 * (np.roll(v[:, :-1], 1, 0) + v[:, :-1] + np.roll(v[:, 1:], 1, 0) + v[:, 1:])
        du = (-u * (np.roll(u, -1, 0) - np.roll(u, 1, 0)) / (2 * dx)
              - v_at_u * (uy[:, 2:] - uy[:, :-2]) / (2 * dy)
              + self.f_c[None] * v_at_u
              - cfg.g * (h - np.roll(h, 1, 0)) / dx
              + cfg.nu * self._lap_centered(u))

        vi = v[:, 1:-1]
        u_at_v = 0.25 * (u[:, :-1] + np.roll(u[:, :-1], -1, 0) + u[:, 1:] + np.roll(u[:, 1:], -1, 0))
        lap_v = ((np.roll(vi, -1, 0) - 2 * vi + np.roll(vi, 1, 0)) / dx ** 2
                 + (v[:, 2:] - 2 * vi + v[:, :-2]) / dy ** 2)
        dv = np.zeros_like(v)
        dv[:, 1:-1] = (-u_at_v * (np.roll(vi, -1, 0) - np.roll(vi, 1, 0)) / (2 * dx)
                       - vi * (v[:, 2:] - v[:, :-2]) / (2 * dy)
                       - self.f_v[None, 1:-1] * u_at_v
                       - cfg.g * (h[:, 1:] - h[:, :-1]) / dy
                       + cfg.nu * lap_v)

        flux_x = 0.5 * (h + np.roll(h, 1, 0)) * u
        flux_y = np.zeros_like(v)
        flux_y[:, 1:-1] = 0.5 * (h[:, 1:] + h[:, :-1]) * vi
        dh = (-(np.roll(flux_x, -1, 0) - flux_x) / dx - (flux_y[:, 1:] - flux_y[:, :-1]) / dy
              + cfg.nu * self._lap_centered(h))
        return du, dv, dh

    def step(self, state, dt):
        """SSP-RK3."""
        def add(a, b, c):
            return tuple(x + c * y for x, y in zip(a, b))

        def comb(wa, a, wb, b):
            return tuple(wa * x + wb * y for x, y in zip(a, b))

        s1 = add(state, self.rhs(*state), dt)
        s2 = comb(0.75, state, 0.25, add(s1, self.rhs(*s1), dt))
        return comb(1 / 3, state, 2 / 3, add(s2, self.rhs(*s2), dt))

    def stable_dt(self, u, v, h) -> float:
        c = math.sqrt(self.cfg.g * float(np.abs(h).max())) + float(np.abs(u).max()) + float(np.abs(v).max())
        dt_adv = self.cfg.cfl / (c * (1 / self.dx + 1 / self.dy))
        if self.cfg.nu > 0:
            dt_visc = 0.2 / (self.cfg.nu * (1 / self.dx ** 2 + 1 / self.dy ** 2))
            dt_adv = min(dt_adv, dt_visc)
        return dt_adv

    def volume(self, h) -> float:
        return float(h.sum()) * self.dx * self.dy

    def to_cells(self, u, v, h):
        uc = 0.5 * (u + np.roll(u, -1, 0))
        vc = 0.5 * (v[:, 1:] + v[:, :-1])
        return np.stack([uc, vc, h, np.sqrt(uc ** 2 + vc ** 2)], axis=-1)

    def run(self, sign: float = 1.0, n_steps: int | None = None, dt: float | None = None):
        """Integrate to ``T_end`` storing ``n_snapshots`` frames.

        With ``n_steps`` set, take exactly that many steps of size ``dt`` and
        store every step instead (used by balance checks).
        """
        cfg = self.cfg
        state = self.initial_state(sign)
        frames, volumes = [self.to_cells(*state)], [self.volume(state[2])]
        step_idx = 0

        def advance(st, h_dt):
            nonlocal step_idx
            st = self.step(st, h_dt)
            step_idx += 1
            peak = max(float(np.abs(a).max()) for a in st)
            if not math.isfinite(peak) or peak > cfg.blowup:
                raise SolverError(f"shallow-water blow-up at step {step_idx} (max |field| = {peak:.3g})")
            return st

        if n_steps is not None:
            dt = dt if dt is not None else self.stable_dt(*state)
            for _ in range(n_steps):
                state = advance(state, dt)
                frames.append(self.to_cells(*state))
                volumes.append(self.volume(state[2]))
            return np.stack(frames), volumes

        interval = cfg.T_end / (cfg.n_snapshots - 1) if cfg.n_snapshots > 1 else 0.0
        for _ in range(1, cfg.n_snapshots):
            n_sub = max(1, math.ceil(interval / self.stable_dt(*state) - 1e-9))
            for _ in range(n_sub):
                state = advance(state, interval / n_sub)
            frames.append(self.to_cells(*state))
            volumes.append(self.volume(state[2]))
        return np.stack(frames), volumes


def solve_swe(config: SweConfig, seed: int | None = None, rng: RngStream | None = None) -> Trajectory:
    """Run the solver; with ``rng``/``seed`` the bump shape (alpha, beta) is sampled."""
    if rng is None and seed is not None:
        rng = RngStream(seed, 0)
    if rng is not None:
        a, b = sample_perturbation_shape(rng)
        config = replace(config, alpha=float(a), beta=float(b))
    data, volumes = SweSolver(config).run()
    params = {
        "alpha": config.alpha,
        "beta": config.beta,
        "volume_drift": float(abs(volumes[-1] - volumes[0]) / abs(volumes[0])),
    }
    return Trajectory(config.grid, data.astype(np.float32), 0, params)
