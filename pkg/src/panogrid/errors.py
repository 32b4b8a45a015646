"""Exception hierarchy shared by all panogrid modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
PlanError (incl. LayoutError) -> 3, engine errors -> 4, InputError -> 5.
"""


class PanogridError(Exception):
    """Base class for all panogrid errors."""


class ConfigError(PanogridError):
    """Invalid configuration value or combination."""


class InputError(PanogridError):
    """Unreadable or malformed input data (files, prompts)."""


class PlanError(PanogridError):
    """Expansion plan is inconsistent or unreachable."""


class LayoutError(PlanError):
    """Layout segments do not cover the plan, or are malformed."""


class CapacityError(PanogridError):
    """Request exceeds a generator's token capacity."""


class CodebookError(PanogridError):
    """Token id outside the codebook, or codebook mismatch."""


class ShapeError(PanogridError):
    """Dimension mismatch between grids, images, or embeddings."""


class GridIndexError(PanogridError, IndexError):
    """Row/column/count outside the valid range of a grid."""


class MetricError(PanogridError):
    """Metric computation cannot proceed (e.g. degenerate normalization)."""


class TrainingError(PanogridError):
    """Training diverged or was given an unusable corpus."""
