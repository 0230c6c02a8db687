"""Domain types shared by every module.

Arrays follow the ``T x W x H x C`` convention: time, first spatial axis,
second spatial axis, physical variable.  Patch parameters with an ``_h``
suffix act on the first spatial axis (W), ``_w`` parameters on the second (H).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when a value violates a type invariant."""


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    variables: tuple[str, ...]
    dt: float = 1.0
    domain_extent: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "domain_extent", tuple(float(v) for v in self.domain_extent))
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if len(self.variables) < 1:
            raise ValidationError("grid needs at least one variable")
        if len(set(self.variables)) != len(self.variables):
            raise ValidationError(f"variable names must be unique: {list(self.variables)}")
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if len(self.domain_extent) != 2 or min(self.domain_extent) <= 0:
            raise ValidationError(f"domain_extent must be two positive reals, got {self.domain_extent}")

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.width, self.height, self.n_vars)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "variables": list(self.variables),
            "dt": self.dt,
            "domain_extent": list(self.domain_extent),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["width"]), int(d["height"]), tuple(d["variables"]),
                   float(d["dt"]), tuple(d["domain_extent"]))


def _check_field(data: np.ndarray, grid: GridSpec, what: str) -> None:
    if data.ndim != 4:
        raise ValidationError(f"{what} must be 4D (T x W x H x C), got shape {data.shape}")
    if data.shape[1:] != grid.shape:
        raise ValidationError(f"{what} shape {data.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{what} contains NaN or Inf")


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: GridSpec
    data: np.ndarray
    t0: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_field(data, self.grid, "trajectory")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    def window(self, t: int, k: int) -> "HistoryWindow":
        """The ``k`` snapshots ending at index ``t`` (inclusive)."""
        if t - k + 1 < 0 or t >= self.T:
            raise IndexError(f"window ending at {t} with k={k} outside trajectory of length {self.T}")
        return HistoryWindow(self.grid, self.data[t - k + 1:t + 1])


@dataclass(frozen=True, eq=False)
class HistoryWindow:
    """``k`` consecutive snapshots, most recent last."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_field(data, self.grid, "history window")
        if data.shape[0] < 1:
            raise ValidationError("history window needs k >= 1")
        object.__setattr__(self, "data", data)

    @property
    def k(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if len(self.mean) != len(self.std):
            raise ValidationError("mean and std must have one entry per variable")
        if any(not s > 0 for s in self.std):
            raise ValidationError(f"std must be positive for every variable, got {self.std}")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(tuple(d["mean"]), tuple(d["std"]))


FREQ_MODES = ("2D", "3D")
CONDITION_MODES = ("cumulative", "last_level")


@dataclass(frozen=True)
class LevelConfig:
    p_h: int
    p_w: int
    o_h: int = 0
    o_w: int = 0
    m_h: int = 8
    m_w: int = 8
    depth: int = 2
    hidden_dim: int = 64
    n_heads: int = 4
    use_freq_path: bool = True

    def __post_init__(self):
        for name in ("p_h", "p_w"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not (0 <= self.o_h < self.p_h and 0 <= self.o_w < self.p_w):
            raise ValidationError(
                f"overlap must satisfy 0 <= o < p, got p=({self.p_h},{self.p_w}) o=({self.o_h},{self.o_w})")
        if self.m_h < 1 or self.m_w < 1:
            raise ValidationError("retained modes must be >= 1")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if self.hidden_dim % self.n_heads:
            raise ValidationError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")


@dataclass(frozen=True)
class ModelConfig:
    k: int
    levels: tuple[LevelConfig, ...]
    freq_mode: str = "2D"
    condition_mode: str = "cumulative"

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not self.levels:
            raise ValidationError("levels must be nonempty")
        if self.freq_mode not in FREQ_MODES:
            raise ValidationError(f"freq_mode must be one of {FREQ_MODES}")
        if self.condition_mode not in CONDITION_MODES:
            raise ValidationError(f"condition_mode must be one of {CONDITION_MODES}")
        for a, b in zip(self.levels, self.levels[1:]):
            if not (b.p_h < a.p_h and b.p_w < a.p_w):
                raise ValidationError("patch sizes must strictly decrease from coarse to fine levels")


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Streams with different ids are derived through numpy's ``SeedSequence``
    spawn keys, so they are independent without any shared global state.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self._seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def child(self, stream_id: int) -> "RngStream":
        """A sub-stream; equal arguments give equal streams."""
        derived = int(self._seq.generate_state(2, np.uint64)[0])
        return RngStream(derived, stream_id)

    def torch_seed(self) -> int:
        return int(self._seq.generate_state(1, np.uint64)[0] >> np.uint64(1))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, size=None, dtype=np.float64):
        return self.generator.standard_normal(size, dtype=dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

