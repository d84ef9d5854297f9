"""Exception hierarchy shared across the package."""


class DistsegError(Exception):
    """Base class for all package-specific failures."""


# --- distance codec ---------------------------------------------------------

class EmptySeedsError(DistsegError):
    """Distance transform requested for a seed mask with no set pixel."""


class InvalidThresholdError(DistsegError):
    """Truncation radius must be positive."""


class ThresholdMismatchError(DistsegError):
    """Signed distances fall outside the range covered by the bin layout."""


class BadThresholdError(DistsegError):
    """Decode threshold is not a valid bin index."""


# --- network kernels and model ----------------------------------------------

class ShapeMismatchError(DistsegError):
    """Operand shapes are incompatible."""


class OddExtentError(DistsegError):
    """2x2 pooling needs even spatial extents."""


class IndexOutOfWindowError(DistsegError):
    """Unpooling index does not address a position inside its 2x2 window."""


class MissingCacheError(DistsegError):
    """Backward pass invoked without the caches produced by forward."""


class NonFiniteError(DistsegError):
    """A tensor that must be finite contains NaN or Inf."""


class CheckpointError(DistsegError):
    """Checkpoint file is malformed or does not match the model."""


# --- loss --------------------------------------------------------------------

class BadClassIndexError(DistsegError):
    """A target class index is outside the logit channel range."""


class ModeMismatchError(DistsegError):
    """Unknown or inconsistent loss mode."""


# --- trainer -----------------------------------------------------------------

class SceneTooSmallError(DistsegError):
    """Scene extents are smaller than the requested patch size."""


class MissingGradientError(DistsegError):
    """Optimizer step requested but a parameter has no gradient slot."""


class NonFiniteLossError(DistsegError):
    """Training loss became NaN or Inf; the run is aborted."""


# --- data --------------------------------------------------------------------

class DecodeError(DistsegError):
    """Image file could not be decoded."""


class ExtentMismatchError(DistsegError):
    """Image and mask extents differ."""


class UnparseableNameError(DistsegError):
    """Scene filename does not follow the <location><index> convention."""


class DuplicateIdError(DistsegError):
    """Two scenes share the same id."""


class BadParamsError(DistsegError):
    """Synthetic generator parameters are out of range."""


# --- evaluation ---------------------------------------------------------------

class EmptySplitError(DistsegError):
    """Evaluation requested on an empty scene list."""
