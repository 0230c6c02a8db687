from .types import (
    CONDITION_MODES, FREQ_MODES, GridSpec, HistoryWindow, LevelConfig, ModelConfig,
    NormalizationStats, RngStream, Trajectory, ValidationError,
)
from .dataset import DatasetError, DatasetReader, dataset_read, dataset_write
from .normalization import ZeroVarianceError, fit_normalization, normalize, variable_moments
from .config import (
    ConfigKeyError, dump_json, load_json, model_config_from_dict, model_config_to_dict, strict_from_dict,
)

__all__ = [
    "CONDITION_MODES", "FREQ_MODES", "GridSpec", "HistoryWindow", "LevelConfig", "ModelConfig",
    "NormalizationStats", "RngStream", "Trajectory", "ValidationError", "DatasetError", "DatasetReader",
    "dataset_read", "dataset_write", "ZeroVarianceError", "fit_normalization", "normalize", "variable_moments",
    "ConfigKeyError", "dump_json", "load_json", "model_config_from_dict", "model_config_to_dict",
    "strict_from_dict",
]
