"""Exception hierarchy shared by every panelq module.

Each exception carries the exit status the command-line front end maps it to.
"""


class PanelQError(Exception):
    exit_code = 1


class ParameterError(PanelQError, ValueError):
    """An argument is outside its admissible range or has the wrong shape."""
    exit_code = 2


class PanelFormatError(PanelQError):
    """Malformed panel input. ``row`` is the 1-based line number when known."""
    exit_code = 3

    def __init__(self, message: str, row: int | None = None, ids: list | None = None):
        super().__init__(message)
        self.row = row
        self.ids = list(ids) if ids else []


class EstimationError(PanelQError):
    """``individual`` names the panel member whose fit failed, when known."""
    exit_code = 4
    individual = None


class DegenerateDesignError(EstimationError):
    pass


class InsufficientDataError(EstimationError):
    pass


class SolverConvergenceError(EstimationError):
    """Interior-point or crossover iterations did not finish.

    ``diagnostics`` holds the iteration count and the last duality gap.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class OracleSizeError(EstimationError):
    pass


class BandwidthError(EstimationError):
    pass


class SingularSandwichError(EstimationError):
    def __init__(self, message: str, individual=None):
        super().__init__(message)
        self.individual = individual


class AggregationError(EstimationError):
    pass


class InferenceError(EstimationError):
    pass


class ConfigError(PanelQError):
    exit_code = 5


class DGPError(ConfigError):
    pass


class DiagnosticError(ConfigError):
    pass


class RecordFormatError(PanelQError):
    exit_code = 6


class RecordVersionError(RecordFormatError):
    pass


IO_EXIT_CODE = 7
