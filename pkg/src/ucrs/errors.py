"""Domain exceptions shared across modules."""


class UcrsError(Exception):
    """Base class for all package errors."""


class ParseError(UcrsError):
    """A data file has a malformed row."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class NegativeSamplingError(UcrsError):
    """A user's positives cover the whole item universe."""


class TrainingDivergedError(UcrsError):
    """Loss became non-finite during optimization."""


class InvalidCommandError(UcrsError):
    """A control command violates its preconditions for the issuing user."""


class UnknownUserError(UcrsError):
    """A user id is not present in the snapshot."""


class UnsupportedScenarioError(UcrsError):
    """The dataset lacks the features an evaluation scenario requires."""


class CohortMismatchError(UcrsError):
    """Result-table variants were evaluated on different user cohorts."""
