"""Exception hierarchy shared by every nalloc module."""


class NallocError(Exception):
    """Base class for all engine errors."""


class DataError(NallocError, ValueError):
    pass


class MalformedRow(DataError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        msg = f"malformed row at line {line}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class NonPositivePrice(DataError):
    def __init__(self, date, ticker: str):
        self.date = date
        self.ticker = ticker
        super().__init__(f"non-positive or missing price for {ticker} on {date}")


class DuplicateDate(DataError):
    def __init__(self, date):
        self.date = date
        super().__init__(f"duplicate date {date}")


class TooShort(DataError):
    pass


class EmptySplit(DataError):
    pass


class AlignmentError(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DimensionMismatch(NallocError, ValueError):
    pass


class InvalidSpec(NallocError, ValueError):
    pass


class TrainingError(NallocError):
    pass


class EmptyDataset(TrainingError):
    pass


class DivergedLoss(TrainingError):
    pass


class RiskError(NallocError):
    pass


class IndexOutOfRange(RiskError, IndexError):
    pass


class InsufficientHistory(RiskError):
    pass


class NegativeDiagonal(RiskError):
    pass


class AllocationError(NallocError):
    pass


class SingularRisk(AllocationError):
    pass


class ZeroAssets(AllocationError):
    pass


class ZeroVolatility(NallocError):
    pass


class BacktestError(NallocError):
    pass


class InsufficientWarmup(BacktestError):
    pass


class DatedError(BacktestError):
    """Wraps a per-date failure inside the backtest loop."""

    def __init__(self, date, cause: Exception):
        self.date = date
        self.cause = cause
        super().__init__(f"{date}: {type(cause).__name__}: {cause}")
