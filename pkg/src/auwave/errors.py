"""Exception hierarchy shared by every auwave module."""


class AUWaveError(Exception):
    """Base class for all library errors."""


class ShapeError(AUWaveError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(AUWaveError, ValueError):
    """A configuration value is outside its allowed range or inconsistent."""


class NonFiniteError(AUWaveError, ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(AUWaveError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, consumed tape, ...)."""


class DegenerateError(AUWaveError, ValueError):
    """Input is structurally valid but statistically unusable (empty mask, N=1 batch)."""


class InputError(AUWaveError, ValueError):
    """Model input is malformed (wrong width, NaN/Inf)."""


class DataError(AUWaveError):
    """Raw input files could not be read or parsed."""


class AlignmentError(DataError):
    """Buoy and grid sources share no usable time steps."""


class SplitError(DataError):
    """Dataset is too short to yield non-empty chronological splits."""


class FormatError(AUWaveError):
    """Binary file has the wrong magic, version, layout or content kind."""


class TrainingError(AUWaveError, RuntimeError):
    """Training diverged or could not proceed."""


class InsufficientDataError(AUWaveError, ValueError):
    """Not enough completed trials or samples for the requested statistic."""
