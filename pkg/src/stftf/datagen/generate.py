from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence

import numpy as np

from ..core.dataset import dataset_write
from ..core.types import GridSpec, RngStream, Trajectory, ValidationError
from .ns import NsConfig, solve_ns
from .swe import SweConfig, solve_swe

log = logging.getLogger(__name__)

SYSTEMS = ("ns", "swe")


class GenerationError(RuntimeError):
    pass


def default_config(system: str, width: Optional[int] = None, height: Optional[int] = None,
                   n_snapshots: Optional[int] = None):
    if system == "ns":
        cfg = NsConfig()
    elif system == "swe":
        cfg = SweConfig()
    else:
        raise ValidationError(f"unknown system {system!r}; expected one of {SYSTEMS}")
    updates = {k: v for k, v in (("width", width), ("height", height), ("n_snapshots", n_snapshots))
               if v is not None}
    return dataclasses.replace(cfg, **updates)


def _one(args):
    system, cfg, seed, idx = args
    rng = RngStream(seed, idx)
    solve = solve_ns if system == "ns" else solve_swe
    try:
        return solve(cfg, rng=rng)
    except Exception as exc:
        raise GenerationError(f"trajectory {idx} (seed {seed}) failed: {exc}") from exc


def generate_dataset(system: str, n_traj: int, seed: int, out, config=None, workers: int = 1):
    """Generate ``n_traj`` trajectories, trajectory ``i`` drawing its parameters from ``RngStream(seed, i)``."""
    if n_traj < 0:
        raise ValidationError("n_traj must be >= 0")
    cfg = config if config is not None else default_config(system)
    jobs = [(system, cfg, seed, i) for i in range(n_traj)]
    if workers > 1 and n_traj > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trajs = list(pool.map(_one, jobs))
    else:
        trajs = [_one(j) for j in jobs]
    for i, tr in enumerate(trajs):
        log.info("trajectory %d: %s", i, tr.params)
    meta = {"system": system, "seed": seed, "solver_config": _config_dict(cfg)}
    return dataset_write(trajs, out, metadata=meta, grid=cfg.grid)


def _config_dict(cfg):
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def import_external(arrays, variables: Sequence[str], dt: float, out,
                    domain_extent=(1.0, 1.0), metadata: Optional[dict] = None):
    """Wrap raw ``T x W x H x C`` arrays (one per trajectory) as a dataset directory."""
    if isinstance(arrays, np.ndarray):
        arrays = [arrays]
    arrays = [np.asarray(a) for a in arrays]
    if not arrays:
        raise ValidationError("import_external needs at least one array")
    for a in arrays:
        if a.ndim != 4:
            raise ValidationError(f"expected T x W x H x C array, got shape {a.shape}")
    grid = GridSpec(arrays[0].shape[1], arrays[0].shape[2], tuple(variables), dt, tuple(domain_extent))
    trajs = [Trajectory(grid, a.astype(np.float32, copy=False)) for a in arrays]
    return dataset_write(trajs, out, metadata={"system": "external", **(metadata or {})})
