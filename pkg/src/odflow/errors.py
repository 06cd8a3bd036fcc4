"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI uses when it surfaces.
"""


class OdflowError(Exception):
    """Base class for all odflow errors."""

    exit_code = 1


class SchemaError(OdflowError, ValueError):
    """Raised when input columns, cells or config values are unusable."""

    exit_code = 2


class IngestError(OdflowError, ValueError):
    """Raised when a flow table exceeds its row error budget."""

    exit_code = 2


class RowError(OdflowError, ValueError):
    """A single unparsable or invalid row. Collected during ingest."""

    exit_code = 2

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyComponentError(OdflowError, ValueError):
    """Raised when no analyzable strongly connected component exists."""

    exit_code = 3


class WindowError(OdflowError, ValueError):
    """Raised for invalid or empty windows and empty candidate sets."""

    exit_code = 4


class PrimitivityError(OdflowError, ValueError):
    """Raised when a daily cyclic product is not primitive."""

    exit_code = 5


class GapPolicyError(OdflowError, ValueError):
    """Raised by the `fail` gap policy on a zero-outflow column."""

    def __init__(self, cell: str, t: int):
        super().__init__(f"cell {cell!r} has no outflow at step {t}")
        self.cell = cell
        self.t = t


class StochasticityError(OdflowError, ValueError):
    pass


class DimensionError(OdflowError, ValueError):
    pass


class DegenerateFitError(OdflowError, ValueError):
    pass


class ZeroDenominatorError(OdflowError, ValueError):
    def __init__(self, pair: tuple[str, str] | None = None):
        where = f" for pair {pair[0]}->{pair[1]}" if pair else ""
        super().__init__(f"baseline + sigma must be positive{where}")
        self.pair = pair


class GeohashError(OdflowError, ValueError):
    pass


class NetworkConfigError(OdflowError, ValueError):
    exit_code = 2
