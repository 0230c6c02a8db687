from .generate import SYSTEMS, GenerationError, default_config, generate_dataset, import_external
from .ns import NsConfig, NsSolver, SolverError, solve_ns
from .swe import SweConfig, SweSolver, solve_swe

__all__ = [
    "SYSTEMS", "GenerationError", "default_config", "generate_dataset", "import_external", "NsConfig",
    "NsSolver", "SolverError", "solve_ns", "SweConfig", "SweSolver", "solve_swe",
]
