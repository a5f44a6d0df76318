# Exception tree shared by every py_warp component.
# Last modified on Oct 18, 2026


class WarpLabError(Exception):
    """Base class of every failure raised by py_warp."""


class DimensionError(WarpLabError, ValueError):
    """A field does not live on the grid it is paired with."""


class ConfigurationError(WarpLabError, ValueError):
    """Inputs are inconsistent with each other (time grids, windows, centers)."""


class DegenerateMetricError(WarpLabError):
    """The base metric density phi fell to or below the degeneracy floor."""


class NumericalBlowupError(WarpLabError):
    """A non-finite value appeared in a state or solution field."""


class StepBudgetError(WarpLabError):
    """The requested end time cannot be reached within the step budget."""


class PositivityViolationError(WarpLabError):
    """A conjugate or forward heat solution lost strict positivity."""


class WindowTooShortError(ConfigurationError):
    """The bootstrap time of the kernel does not fit in the trajectory window."""


class ConstraintError(WarpLabError, ValueError):
    """A test function violates the normalization a functional requires."""


class SolverError(WarpLabError):
    """An iterative solver did not converge.

    Parameters
    ----------
    message : str
        Human readable failure description.
    diagnostics : dict, optional
        Iteration count, last residual and similar data of the failed solve.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = {} if diagnostics is None else dict(diagnostics)


class StageError(WarpLabError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds why."""

    def __init__(self, stage, message):
        super().__init__(f"Stage '{stage}' failed: {message}")
        self.stage = stage
