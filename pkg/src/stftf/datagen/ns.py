"""2D incompressible Navier-Stokes on a staggered (MAC) grid.

Velocities live on cell faces, pressure at cell centres.  Advection and
diffusion use second-order central differences with SSP-RK3 time stepping,
and every stage is projected onto the divergence-free space by an exact
Poisson solve: a cosine transform for the walled box (homogeneous Neumann)
and an FFT in the doubly periodic validation mode.  Because the Poisson
operator is exactly ``div(grad)`` of the staggered operators, the projected
discrete divergence is at round-off level.

Walled mode: the four edges move tangentially with the constant speeds
``b = (b_left, b_right, b_bottom, b_top)``; normal velocity is zero.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.fft as sfft

from ..core.types import GridSpec, RngStream, Trajectory, ValidationError

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class NsConfig:
    Re: float = 1000.0
    forcing_amplitude: float = 1.0
    forcing_width: float = 100.0
    b: tuple[float, float, float, float] = (0.35, 0.35, 0.35, 0.35)
    width: int = 50
    height: int = 50
    n_snapshots: int = 101
    T_end: float = 20.0
    dt_int: Optional[float] = None
    cfl: float = 0.5
    max_substeps: int = 200_000
    periodic: bool = False
    domain_extent: tuple[float, float] = (1.0, 1.0)
    initial: str = "zero"

    def __post_init__(self):
        if not self.Re > 0:
            raise ValidationError("Re must be positive")
        if len(self.b) != 4:
            raise ValidationError("b needs four boundary values (left, right, bottom, top)")
        if self.n_snapshots < 1 or self.width < 3 or self.height < 3:
            raise ValidationError("need n_snapshots >= 1 and at least 3x3 cells")
        if self.initial not in ("zero", "taylor_green"):
            raise ValidationError(f"unknown initial condition {self.initial!r}")

    @property
    def grid(self) -> GridSpec:
        dt = self.T_end / (self.n_snapshots - 1) if self.n_snapshots > 1 else self.T_end or 1.0
        return GridSpec(self.width, self.height, ("u", "v", "p"), dt, self.domain_extent)


def sample_boundary_values(rng: RngStream, low: float = 0.1, high: float = 0.6) -> tuple[float, ...]:
    return tuple(float(v) for v in rng.uniform(low, high, size=4))


class NsSolver:
    def __init__(self, cfg: NsConfig):
        self.cfg = cfg
        nx, ny = cfg.width, cfg.height
        Lx, Ly = cfg.domain_extent
        self.nx, self.ny = nx, ny
        self.dx, self.dy = Lx / nx, Ly / ny
        self.nu = 1.0 / cfg.Re
        if cfg.periodic:
            kx = 2 * np.pi * np.fft.fftfreq(nx)
            ky = 2 * np.pi * np.fft.fftfreq(ny)
            lam = ((2 * np.cos(kx) - 2)[:, None] / self.dx ** 2 + (2 * np.cos(ky) - 2)[None, :] / self.dy ** 2)
        else:
            px = np.pi * np.arange(nx) / nx
            py = np.pi * np.arange(ny) / ny
            lam = ((2 * np.cos(px) - 2)[:, None] / self.dx ** 2 + (2 * np.cos(py) - 2)[None, :] / self.dy ** 2)
        lam[0, 0] = 1.0
        self._inv_lam = 1.0 / lam
        self._inv_lam[0, 0] = 0.0
        self._setup_forcing()

    # grid coordinates of the staggered unknowns
    def _face_coords(self):
        nx, ny, dx, dy = self.nx, self.ny, self.dx, self.dy
        nxu = nx if self.cfg.periodic else nx + 1
        nyv = ny if self.cfg.periodic else ny + 1
        xu, yu = np.arange(nxu) * dx, (np.arange(ny) + 0.5) * dy
        xv, yv = (np.arange(nx) + 0.5) * dx, np.arange(nyv) * dy
        return np.meshgrid(xu, yu, indexing="ij"), np.meshgrid(xv, yv, indexing="ij")

    def _setup_forcing(self):
        cfg = self.cfg
        (xu, yu), (xv, yv) = self._face_coords()
        Lx, Ly = cfg.domain_extent
        cx, cy = 0.5 * Lx, 0.5 * Ly

        def f(x, y):
            return cfg.forcing_amplitude * np.exp(-cfg.forcing_width * ((x - cx) ** 2 + (y - cy) ** 2))

        self.fu, self.fv = f(xu, yu), f(xv, yv)
        if not cfg.periodic:
            self.fu[[0, -1], :] = 0.0
            self.fv[:, [0, -1]] = 0.0
        self.f_max = float(max(np.abs(self.fu).max(initial=0.0), np.abs(self.fv).max(initial=0.0)))

    def initial_state(self):
        (xu, yu), (xv, yv) = self._face_coords()
        if self.cfg.initial == "taylor_green":
            Lx = self.cfg.domain_extent[0]
            k = 2 * np.pi / Lx
            return np.sin(k * xu) * np.cos(k * yu), -np.cos(k * xv) * np.sin(k * yv)
        return np.zeros_like(xu), np.zeros_like(xv)

    # --- staggered operators -------------------------------------------------
    def divergence(self, u, v):
        if self.cfg.periodic:
            return ((np.roll(u, -1, 0) - u) / self.dx + (np.roll(v, -1, 1) - v) / self.dy)
        return (u[1:] - u[:-1]) / self.dx + (v[:, 1:] - v[:, :-1]) / self.dy

    def _solve_poisson(self, rhs):
        if self.cfg.periodic:
            return np.real(np.fft.ifft2(np.fft.fft2(rhs) * self._inv_lam))
        return sfft.idctn(sfft.dctn(rhs, type=2, norm="ortho") * self._inv_lam, type=2, norm="ortho")

    def _grad(self, phi):
        if self.cfg.periodic:
            return (phi - np.roll(phi, 1, 0)) / self.dx, (phi - np.roll(phi, 1, 1)) / self.dy
        gx = np.zeros((self.nx + 1, self.ny))
        gy = np.zeros((self.nx, self.ny + 1))
        gx[1:-1] = (phi[1:] - phi[:-1]) / self.dx
        gy[:, 1:-1] = (phi[:, 1:] - phi[:, :-1]) / self.dy
        return gx, gy

    def project(self, u, v):
        phi = self._solve_poisson(self.divergence(u, v))
        gx, gy = self._grad(phi)
        return u - gx, v - gy

    def _ghost(self, u, v):
        """Pad u in y and v in x with ghost layers carrying the wall speeds."""
        if self.cfg.periodic:
            return (np.concatenate([u[:, -1:], u, u[:, :1]], 1), np.concatenate([v[-1:], v, v[:1]], 0))
        bl, br, bb, bt = self.cfg.b
        ug = np.concatenate([2 * bb - u[:, :1], u, 2 * bt - u[:, -1:]], 1)
        vg = np.concatenate([2 * bl - v[:1], v, 2 * br - v[-1:]], 0)
        return ug, vg

    def rhs(self, u, v):
        """Advection + diffusion + forcing, before projection."""
        dx, dy, nu = self.dx, self.dy, self.nu
        if self.cfg.periodic:
            def r(a, s, ax):
                return np.roll(a, s, ax)
            ue, uw, un, us = r(u, -1, 0), r(u, 1, 0), r(u, -1, 1), r(u, 1, 1)
            ve, vw, vn, vs = r(v, -1, 0), r(v, 1, 0), r(v, -1, 1), r(v, 1, 1)
            # v averaged onto u faces: v[i-1,j], v[i,j], v[i-1,j+1], v[i,j+1]
            v_at_u = 0.25 * (vw + v + r(vw, -1, 1) + vn)
            u_at_v = 0.25 * (us + u + r(us, -1, 0) + ue)
            du = (-u * (ue - uw) / (2 * dx) - v_at_u * (un - us) / (2 * dy)
                  + nu * ((ue - 2 * u + uw) / dx ** 2 + (un - 2 * u + us) / dy ** 2) + self.fu)
            dv = (-u_at_v * (ve - vw) / (2 * dx) - v * (vn - vs) / (2 * dy)
                  + nu * ((ve - 2 * v + vw) / dx ** 2 + (vn - 2 * v + vs) / dy ** 2) + self.fv)
            return du, dv

        ug, vg = self._ghost(u, v)
        du = np.zeros_like(u)
        dv = np.zeros_like(v)
        # interior u faces i = 1..nx-1, all j; ug has a ghost row at each y end
        uc = u[1:-1]
        ue, uw = u[2:], u[:-2]
        un, us = ug[1:-1, 2:], ug[1:-1, :-2]
        v_at_u = 0.25 * (v[:-1, :-1] + v[1:, :-1] + v[:-1, 1:] + v[1:, 1:])
        du[1:-1] = (-uc * (ue - uw) / (2 * dx) - v_at_u * (un - us) / (2 * dy)
                    + nu * ((ue - 2 * uc + uw) / dx ** 2 + (un - 2 * uc + us) / dy ** 2) + self.fu[1:-1])
        # interior v faces j = 1..ny-1, all i; vg has a ghost column at each x end
        vc = v[:, 1:-1]
        vn, vs = v[:, 2:], v[:, :-2]
        ve, vw = vg[2:, 1:-1], vg[:-2, 1:-1]
        u_at_v = 0.25 * (u[:-1, :-1] + u[1:, :-1] + u[:-1, 1:] + u[1:, 1:])
        dv[:, 1:-1] = (-u_at_v * (ve - vw) / (2 * dx) - vc * (vn - vs) / (2 * dy)
                       + nu * ((ve - 2 * vc + vw) / dx ** 2 + (vn - 2 * vc + vs) / dy ** 2) + self.fv[:, 1:-1])
        return du, dv

    def step(self, u, v, dt):
        """One SSP-RK3 step with a projection after every stage."""
        du, dv = self.rhs(u, v)
        u1, v1 = self.project(u + dt * du, v + dt * dv)
        du, dv = self.rhs(u1, v1)
        u2, v2 = self.project(0.75 * u + 0.25 * (u1 + dt * du), 0.75 * v + 0.25 * (v1 + dt * dv))
        du, dv = self.rhs(u2, v2)
        return self.project(u / 3 + 2 / 3 * (u2 + dt * du), v / 3 + 2 / 3 * (v2 + dt * dv))

    def pressure(self, u, v):
        """Pressure that keeps the momentum tendency solenoidal; zero mean."""
        du, dv = self.rhs(u, v)
        p = self._solve_poisson(self.divergence(du, dv))
        return p - p.mean()

    def to_cells(self, u, v):
        if self.cfg.periodic:
            return 0.5 * (u + np.roll(u, -1, 0)), 0.5 * (v + np.roll(v, -1, 1))
        return 0.5 * (u[1:] + u[:-1]), 0.5 * (v[:, 1:] + v[:, :-1])

    def stable_dt(self, u, v, horizon: float) -> float:
        speed = np.abs(u).max(initial=0.0) + np.abs(v).max(initial=0.0)
        if not self.cfg.periodic:
            speed = max(speed, 2 * max(abs(b) for b in self.cfg.b))
        speed += horizon * self.f_max
        h = min(self.dx, self.dy)
        dt_adv = self.cfg.cfl * h / speed if speed > 0 else math.inf
        dt_visc = 0.25 * h * h / self.nu
        return min(dt_adv, dt_visc)

    def kinetic_energy(self, u, v) -> float:
        uc, vc = self.to_cells(u, v)
        return 0.5 * float(np.sum(uc ** 2 + vc ** 2)) * self.dx * self.dy

    def run(self):
        """Integrate and return (snapshots T x W x H x 3, per-snapshot max |div|, energies)."""
        cfg = self.cfg
        u, v = self.project(*self.initial_state()) if cfg.initial != "zero" else self.initial_state()
        n = cfg.n_snapshots
        interval = cfg.T_end / (n - 1) if n > 1 else 0.0
        out = np.empty((n, self.nx, self.ny, 3))
        divs, energies = [], []

        def store(idx):
            uc, vc = self.to_cells(u, v)
            out[idx, ..., 0], out[idx, ..., 1], out[idx, ..., 2] = uc, vc, self.pressure(u, v)
            divs.append(float(np.abs(self.divergence(u, v)).max()))
            energies.append(self.kinetic_energy(u, v))

        store(0)
        for s in range(1, n):
            dt_stable = self.stable_dt(u, v, interval)
            dt = cfg.dt_int if cfg.dt_int is not None else dt_stable
            if dt > dt_stable:
                log.warning("dt_int=%.3g violates the CFL bound %.3g; subdividing", dt, dt_stable)
                dt = dt_stable
            n_sub = max(1, math.ceil(interval / dt - 1e-9))
            if n_sub > cfg.max_substeps:
                raise SolverError(f"snapshot {s} needs {n_sub} substeps, above the cap {cfg.max_substeps}")
            h = interval / n_sub
            for _ in range(n_sub):
                u, v = self.step(u, v, h)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise SolverError(f"non-finite velocity at snapshot {s}")
            store(s)
        return out, divs, energies


def solve_ns(config: NsConfig, seed: int | None = None, rng: RngStream | None = None) -> Trajectory:
    """Run the solver; if ``rng`` (or ``seed``) is given the boundary speeds are sampled from U(0.1, 0.6)."""
    if rng is None and seed is not None:
        rng = RngStream(seed, 0)
    params = {}
    if rng is not None and not config.periodic:
        config = replace(config, b=sample_boundary_values(rng))
    params["b"] = list(config.b)
    params["Re"] = config.Re
    data, divs, energies = NsSolver(config).run()
    params["max_divergence"] = max(divs)
    return Trajectory(config.grid, data.astype(np.float32), 0, params)


def taylor_green_energy(t, Re: float, L: float, e0: float):
    """Closed-form kinetic energy of the decaying Taylor-Green vortex, wavenumber 2*pi/L."""
    k = 2 * np.pi / L
    return e0 * np.exp(-4.0 * k * k * np.asarray(t) / Re)
