"""Distribution-free prediction regions for multi-output localization.

The package turns per-example localization outputs (heatmaps, point
estimates, sample draws, covariances) into prediction regions with
calibrated coverage, plus the simulation and evaluation tooling around
them. See :mod:`cpregions.calibrate` for the region methods and
:mod:`cpregions.cli` for the command line pipeline.
"""

from .calibrate import (
    CONFORMAL_METHODS,
    METHODS,
    Calibrator,
    ScoreLedger,
    aps_set,
    binned_distribution,
    conformal_threshold,
    fit,
)
from .density import (
    Temperature,
    apply_temperature,
    average_grids,
    decode,
    fit_gaussian,
    fit_temperature,
    interp_density,
    interp_density_many,
    score_density,
)
from .evaluate import (
    EvaluationReport,
    build_report,
    build_reports,
    coverage,
    efficiency_stats,
    point_metrics,
    spearman,
)
from .regions import (
    AffineMap,
    Ellipsoid,
    GridMask,
    HyperRect,
    Region,
    bins_to_region,
    cell_index,
    region_from_json,
    region_to_json,
    unit_ball_volume,
)
from .synthetic import (
    ScenarioConfig,
    gaussian_grid_values,
    generate,
    true_region_volume,
    write_scenario,
)
from .tensor_io import (
    DatasetManifest,
    Example,
    GridDistribution,
    load_dataset,
    read_tensor,
    save_dataset,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "Calibrator",
    "CONFORMAL_METHODS",
    "DatasetManifest",
    "Ellipsoid",
    "EvaluationReport",
    "Example",
    "GridDistribution",
    "GridMask",
    "HyperRect",
    "METHODS",
    "Region",
    "ScenarioConfig",
    "ScoreLedger",
    "Temperature",
    "aps_set",
    "apply_temperature",
    "average_grids",
    "binned_distribution",
    "bins_to_region",
    "build_report",
    "build_reports",
    "cell_index",
    "conformal_threshold",
    "coverage",
    "decode",
    "efficiency_stats",
    "fit",
    "fit_gaussian",
    "fit_temperature",
    "gaussian_grid_values",
    "generate",
    "interp_density",
    "interp_density_many",
    "load_dataset",
    "point_metrics",
    "read_tensor",
    "region_from_json",
    "region_to_json",
    "save_dataset",
    "score_density",
    "spearman",
    "true_region_volume",
    "unit_ball_volume",
    "write_scenario",
    "write_tensor",
    "__version__",
]
