"""Exception hierarchy shared by every pagcert module."""


class PagError(Exception):
    """Base class for all pagcert errors."""


class ParameterError(PagError, ValueError):
    """A parameter lies outside its admissible (open) range."""


class ConvergenceError(PagError, RuntimeError):
    """A numerical root search failed to bracket or terminate.

    This signals an implementation bug rather than bad user input.
    """


class NoValidIndexError(PagError, ValueError):
    """The sample is too small to certify any quantile at this confidence."""


class ShiftTooLargeError(PagError, ValueError):
    """The total-variation shift makes the guarantee vacuous (lambda >= p_min)."""


class DimensionError(PagError, ValueError):
    """Input dimensions do not match the model, or are unsupported."""


class ModelFormatError(PagError, ValueError):
    """A model file is malformed or internally inconsistent."""


class DatasetError(PagError, ValueError):
    """A dataset file could not be read or is empty."""


class InconsistentParamsError(PagError, ValueError):
    """Certificate inputs disagree with each other (e.g. sample too small)."""


class OracleError(PagError, RuntimeError):
    """Base class for failures of a robustness oracle."""

    def __init__(self, message, request_id=None):
        super().__init__(message)
        self.request_id = request_id


class ProtocolViolation(OracleError):
    """An external tool wrote a response that breaks the wire protocol."""


class ToolCrash(OracleError):
    """An external tool exited while requests were still outstanding."""

    def __init__(self, message, request_id=None, completed=0):
        super().__init__(message, request_id)
        self.completed = completed


class OracleTimeout(OracleError):
    """An external tool did not answer within the per-request timeout."""
