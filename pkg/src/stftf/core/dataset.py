"""On-disk trajectory datasets.

A dataset is a directory holding ``manifest.json`` and one raw binary file per
trajectory.  Binaries are little-endian float32 in C order over
``T x W x H x C``.  The manifest keys are fixed (see ``MANIFEST_KEYS``) and
documented in the README.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .types import GridSpec, Trajectory, ValidationError

FORMAT_NAME = "stftf-dataset"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
DTYPE = np.dtype("<f4")
MANIFEST_KEYS = (
    "format", "format_version", "variables", "W", "H", "C", "dt", "domain_extent",
    "count", "byte_order", "element_type", "layout", "trajectories", "metadata",
)


class DatasetError(ValidationError):
    """Malformed or inconsistent dataset directory."""


def _traj_filename(i: int) -> str:
    return f"traj_{i:05d}.bin"


def dataset_write(trajectories: Sequence[Trajectory], path, metadata: dict | None = None,
                  grid: GridSpec | None = None) -> dict:
    """Write trajectories to ``path`` and return the manifest.

    ``grid`` is only needed for an empty dataset, where it cannot be inferred.
    """
    trajectories = list(trajectories)
    if trajectories:
        grid = trajectories[0].grid
        for i, tr in enumerate(trajectories):
            if tr.grid != grid:
                raise DatasetError(
                    f"all trajectories must share one grid; trajectory {i} has {tr.grid} but trajectory 0 has {grid}")
    elif grid is None:
        raise DatasetError("an empty dataset needs an explicit grid")

    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise DatasetError(f"dataset directory {path} is not writable")

    for stale in path.glob("traj_*.bin"):
        if stale.name not in {_traj_filename(i) for i in range(len(trajectories))}:
            stale.unlink()
    entries = []
    for i, tr in enumerate(trajectories):
        name = _traj_filename(i)
        np.ascontiguousarray(tr.data, dtype=DTYPE).tofile(path / name)
        entries.append({"file": name, "T": int(tr.T), "t0": int(tr.t0), "params": _jsonable(tr.params)})

    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "variables": list(grid.variables),
        "W": grid.width,
        "H": grid.height,
        "C": grid.n_vars,
        "dt": grid.dt,
        "domain_extent": list(grid.domain_extent),
        "count": len(entries),
        "byte_order": "little",
        "element_type": "float32",
        "layout": "T,W,H,C",
        "trajectories": entries,
        "metadata": _jsonable(metadata or {}),
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


class DatasetReader(Sequence):
    """Lazy view of a dataset directory; trajectories load on access."""

    def __init__(self, path):
        self.path = Path(path)
        mpath = self.path / MANIFEST_NAME
        if not mpath.exists():
            raise FileNotFoundError(f"dataset manifest not found: {mpath}")
        m = json.loads(mpath.read_text())
        missing = [k for k in MANIFEST_KEYS if k not in m]
        if missing:
            raise DatasetError(f"{mpath}: manifest missing keys {missing}")
        if m["format"] != FORMAT_NAME or m["byte_order"] != "little" or m["element_type"] != "float32":
            raise DatasetError(f"{mpath}: unsupported format/byte order/element type")
        if m["count"] != len(m["trajectories"]):
            raise DatasetError(f"{mpath}: count {m['count']} but {len(m['trajectories'])} trajectory entries")
        self.manifest = m
        self.grid = GridSpec(int(m["W"]), int(m["H"]), tuple(m["variables"]), float(m["dt"]),
                             tuple(m["domain_extent"]))
        for e in m["trajectories"]:
            self._check_size(e)

    def _check_size(self, entry):
        f = self.path / entry["file"]
        if not f.exists():
            raise DatasetError(f"trajectory file missing: {f}")
        expected = entry["T"] * self.grid.width * self.grid.height * self.grid.n_vars * DTYPE.itemsize
        actual = f.stat().st_size
        if expected != actual:
            raise DatasetError(f"size mismatch for {f}: expected {expected} bytes, found {actual}")

    @property
    def metadata(self) -> dict:
        return self.manifest["metadata"]

    def __len__(self):
        return self.manifest["count"]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        entry = self.manifest["trajectories"][i]
        self._check_size(entry)
        shape = (entry["T"], self.grid.width, self.grid.height, self.grid.n_vars)
        data = np.fromfile(self.path / entry["file"], dtype=DTYPE).reshape(shape)
        return Trajectory(self.grid, data, int(entry["t0"]), dict(entry.get("params", {})))


def dataset_read(path) -> list[Trajectory]:
    return list(DatasetReader(path))


def concat_trajectories(trajs: Iterable[Trajectory]) -> np.ndarray:
    return np.concatenate([t.data for t in trajs], axis=0)
