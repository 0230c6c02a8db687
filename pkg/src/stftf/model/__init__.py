from .stft import (
    FrequencyPath, LevelOutput, SpatioTemporalPath, StftLevel, StftModel, fft_filter, ifft_pad,
    temporal_stack,
)
from .checkpoint import CheckpointError, StftCheckpoint, load_stft, state_hash

__all__ = [
    "FrequencyPath", "LevelOutput", "SpatioTemporalPath", "StftLevel", "StftModel", "fft_filter",
    "ifft_pad", "temporal_stack", "CheckpointError", "StftCheckpoint", "load_stft", "state_hash",
]
