"""Versioned checkpoints: parameters plus the exact configs that built them."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from ..core.config import model_config_from_dict, model_config_to_dict
from ..core.types import ModelConfig, NormalizationStats, ValidationError
from .stft import StftModel

CHECKPOINT_VERSION = 1


class CheckpointError(ValidationError):
    pass


def state_hash(state_dict: dict, *configs) -> str:
    """sha256 over parameter bytes (sorted by name) and JSON-serialized configs."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    for c in configs:
        h.update(json.dumps(c, sort_keys=True).encode())
    return h.hexdigest()


@dataclass
class StftCheckpoint:
    model: StftModel
    config: ModelConfig
    stats: NormalizationStats
    grid: dict
    info: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def content_hash(self) -> str:
        return state_hash(self.model.state_dict(), model_config_to_dict(self.config), self.stats.to_dict())

    def save(self, path) -> str:
        payload = {
            "kind": "stft",
            "version": CHECKPOINT_VERSION,
            "model_config": model_config_to_dict(self.config),
            "normalization": self.stats.to_dict(),
            "grid": self.grid,
            "state_dict": self.model.state_dict(),
            "info": self.info,
            "content_hash": self.content_hash,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
        return payload["content_hash"]


def _load_payload(path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path} is not a readable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != kind:
        raise CheckpointError(f"{path} is not a {kind} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_stft(path, expected_config: Optional[ModelConfig] = None) -> StftCheckpoint:
    payload = _load_payload(path, "stft")
    cfg = model_config_from_dict(payload["model_config"])
    if expected_config is not None and expected_config != cfg:
        raise CheckpointError(f"{path}: checkpoint config differs from the requested model config")
    g = payload["grid"]
    model = StftModel(cfg, g["width"], g["height"], len(g["variables"]))
    model = model.to(next(iter(payload["state_dict"].values())).dtype)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the stored config: {exc}") from exc
    ckpt = StftCheckpoint(model, cfg, NormalizationStats.from_dict(payload["normalization"]), g,
                          payload.get("info", {}))
    if ckpt.content_hash != payload["content_hash"]:
        raise CheckpointError(f"{path}: content hash mismatch, file is corrupted")
    return ckpt

