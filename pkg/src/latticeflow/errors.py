"""Exception hierarchy shared across the package.

Two broad families matter for the CLI exit-code contract: user errors
(bad inputs, bad files, bad shapes) exit with code 1, numeric failures
(instability, NaN/Inf, diverged training) exit with code 2.
"""


class LatticeFlowError(Exception):
    """Base class for all package errors."""


class UserError(LatticeFlowError):
    """Caller provided invalid inputs, files, or configuration."""


class NumericFailure(LatticeFlowError):
    """Computation produced values outside the stable regime."""


class InvalidInputError(UserError):
    """Non-finite or out-of-range argument."""


class ShapeError(UserError):
    """Array shapes are inconsistent with the operation's contract."""


class EmptyBoundaryError(UserError):
    """A boundary-dependent quantity was requested on a mask with no solid cells."""


class EmptyDomainError(UserError):
    """A fluid-domain quantity was requested on a mask with no fluid cells."""


class PlacementError(UserError):
    """Random object placement could not satisfy the scene constraints."""


class DistributionError(UserError):
    """The scene/solver configuration produces mostly unstable runs."""


class FormatError(UserError):
    """A binary or text file does not match its documented layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """A file carries an unsupported format version."""

    def __init__(self, found: int, expected: int):
        super().__init__(f"unsupported format version {found}, expected {expected}")
        self.found = found
        self.expected = expected


class InstabilityError(NumericFailure):
    """Solver populations left the stable range (|f| > 10)."""


class NumericError(NumericFailure):
    """A tensor operation produced NaN or Inf."""


class TrainingDivergedError(NumericFailure):
    """Training loss blew up past the divergence guard."""


class GraphError(LatticeFlowError):
    """The differentiation graph was used outside its contract."""
