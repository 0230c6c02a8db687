from .metrics import (CI_METHODS, REFERENCE_PLASMA_COVERAGE, SCOPES, ci_coverage, l2_relative_error,
                      mean_relative_error, scale_contributions, z_value)
from .report import (error_curve_export, plot_contributions, plot_error_curves, plot_field_panels,
                     read_error_curve, write_coverage_csv)

__all__ = [
    "CI_METHODS", "REFERENCE_PLASMA_COVERAGE", "SCOPES", "ci_coverage", "l2_relative_error",
    "mean_relative_error", "scale_contributions", "z_value", "error_curve_export", "plot_contributions",
    "plot_error_curves", "plot_field_panels", "read_error_curve", "write_coverage_csv",
]
