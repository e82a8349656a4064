"""Exception taxonomy shared across the package.

Every error raised by the public API derives from :class:`CPRegionsError`
so callers can catch one base class. The CLI maps subfamilies to exit
codes (config 2, data 3, alignment 4, format 5).
"""


class CPRegionsError(Exception):
    """Base class for all package errors."""


# --- tensor and dataset I/O ---

class IoError(CPRegionsError):
    """Filesystem-level failure while reading or writing an artifact."""


class MalformedHeader(CPRegionsError):
    """Tensor file header is not a valid v1.0 header."""


class UnsupportedDType(CPRegionsError):
    """Tensor payload dtype is outside the supported set (<f4, <f8)."""


class ShapeMismatch(CPRegionsError):
    """Tensor shape disagrees with the expected shape."""


class MissingTensor(CPRegionsError):
    """A manifest entry points at a tensor file that does not exist."""


class InvariantViolation(CPRegionsError):
    """Loaded data violates a structural invariant."""


# --- geometry ---

class DimMismatch(CPRegionsError):
    """Operands have inconsistent dimensionality."""


class NonSPDMatrix(CPRegionsError):
    """A matrix required to be symmetric positive definite is not."""


class IndexOutOfRange(CPRegionsError):
    """A grid cell index lies outside the grid shape."""


# --- densities ---

class OutOfDomain(CPRegionsError):
    """Query point lies beyond the physical extent of a grid."""


class DegenerateGrid(CPRegionsError):
    """Grid carries no probability mass."""


class GeometryMismatch(CPRegionsError):
    """Grids expected to share geometry (origin/spacing/shape) do not."""


# --- calibration ---

class EmptyCalibrationSet(CPRegionsError):
    """An operation requires at least one calibration example."""


class EmptyLedger(CPRegionsError):
    """A score ledger holds no scores."""


class MissingField(CPRegionsError):
    """An example lacks a field the selected method needs."""


class InvalidAlpha(CPRegionsError):
    """Miscoverage level must lie strictly inside (0, 1)."""


# --- evaluation ---

class LengthMismatch(CPRegionsError):
    """Paired sequences differ in length."""


# --- synthetic scenarios ---

class InvalidConfig(CPRegionsError):
    """Scenario or run configuration failed validation."""


class UnsupportedNoise(CPRegionsError):
    """Requested quantity is undefined for this noise model."""


# --- command line ---

class AlignmentError(CPRegionsError):
    """Region records and dataset examples do not describe the same ids."""


class FormatError(CPRegionsError):
    """Requested export format is unknown or unusable for this region."""
