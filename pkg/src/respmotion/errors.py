"""Exception and warning types shared across the package.

The split matters for the command line layer, which maps validation problems,
numerical failures and I/O problems to distinct exit codes.
"""


class ValidationError(ValueError):
    """Bad inputs: malformed files, inconsistent shapes, out-of-range parameters."""


class GridMismatchError(ValidationError):
    """Two objects were expected to live on the same grid but do not."""


class NumericalError(RuntimeError):
    """A computation produced an unusable result (NaN energy, empty overlap, ...)."""


class PipelineError(RuntimeError):
    """A multi-stage pipeline failed; carries the name of the failing stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


class NonConvergenceWarning(RuntimeWarning):
    """An iterative scheme hit its iteration budget before reaching tolerance."""
