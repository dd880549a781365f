"""Exception hierarchy.

Every error carries a stable machine-readable ``code`` and the process exit
status the command-line front end maps it to.
"""

from __future__ import annotations


class GridBlocksError(Exception):
    code = "E_GENERIC"
    exit_status = 1


class ParseError(GridBlocksError):
    """Malformed case-file text."""

    code = "E_PARSE"
    exit_status = 2

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(GridBlocksError):
    """Well-formed input describing an invalid network."""

    code = "E_DATA"
    exit_status = 2


class BalanceError(GridBlocksError):
    """Injections do not sum to zero on some island."""

    code = "E_BALANCE"
    exit_status = 2

    def __init__(self, message: str, residuals: dict[int, float] | None = None):
        self.residuals = dict(residuals or {})
        super().__init__(message)


class UnbalanceableError(BalanceError):
    code = "E_UNBALANCEABLE"


class ConditioningError(GridBlocksError):
    """A matrix that should be invertible is numerically singular."""

    code = "E_CONDITIONING"
    exit_status = 3

    def __init__(self, message: str, island: list[int] | None = None):
        self.island = island
        super().__init__(message)


class NumericError(GridBlocksError):
    code = "E_NUMERIC"
    exit_status = 3


class DisconnectedError(GridBlocksError):
    """An operation defined only for connected networks got a disconnected one."""

    code = "E_DISCONNECTED"
    exit_status = 4


class CutSetError(GridBlocksError):
    """An outage set disconnects the network where a non-cut set is required."""

    code = "E_CUT_SET"
    exit_status = 4

    def __init__(self, message: str, islands: list[list[int]] | None = None):
        self.islands = islands or []
        super().__init__(message)


class BridgeOutageError(CutSetError):
    code = "E_BRIDGE_OUTAGE"


class ControlError(GridBlocksError):
    """Invalid proportional-control participation factors."""

    code = "E_CONTROL"
    exit_status = 4


class UndefinedRatioError(GridBlocksError):
    code = "E_UNDEFINED_RATIO"
    exit_status = 3


class UndefinedObjectiveError(GridBlocksError):
    """Modularity-type objective with zero total weight."""

    code = "E_UNDEFINED_OBJECTIVE"
    exit_status = 3


class PartitionError(GridBlocksError):
    code = "E_PARTITION"
    exit_status = 4


class EnumerationCapError(GridBlocksError):
    """Too many spanning trees to enumerate under the configured cap."""

    code = "E_ENUMERATION_CAP"
    exit_status = 4

    def __init__(self, count: int, cap: int, hint: str = ""):
        self.count = count
        self.cap = cap
        message = f"{count} spanning trees exceed the enumeration cap {cap}"
        if hint:
            message += f"; {hint}"
        super().__init__(message)


class DegenerateError(GridBlocksError):
    code = "E_DEGENERATE"
    exit_status = 4


class UsageError(GridBlocksError):
    code = "E_USAGE"
    exit_status = 5
