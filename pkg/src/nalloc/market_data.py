"""
Price/return panels, wide-CSV ingestion, log returns, date splits and summary statistics.

Wide CSV layout::

    date,AAPL,MSFT,...
    2010-01-04,7.64,23.90,...

Dates are ISO-8601 (``YYYY-MM-DD``); rows need not be sorted on disk.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DuplicateDate,
    EmptySplit,
    MalformedRow,
    NonPositivePrice,
    TooShort,
)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_increasing(dates: Sequence[dt.date]) -> None:
    for a, b in zip(dates, dates[1:]):
        if not a < b:
            raise ValueError(f"dates must be strictly increasing ({a} !< {b})")


@dataclass(frozen=True)
class PricePanel:
    dates: tuple
    tickers: tuple
    prices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "prices", _frozen(self.prices))
        T, N = self.prices.shape
        if N < 1 or T < 1 or len(self.dates) != T or len(self.tickers) != N:
            raise ValueError("price matrix shape does not match dates/tickers")
        _check_increasing(self.dates)
        if not np.all(np.isfinite(self.prices)) or np.any(self.prices <= 0):
            raise ValueError("prices must be finite and positive")

    @property
    def shape(self):
        return self.prices.shape


@dataclass(frozen=True)
class ReturnPanel:
    """Date-indexed matrix of per-day log returns, one column per ticker."""

    dates: tuple
    tickers: tuple
    returns: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "returns", _frozen(self.returns))
        if self.returns.ndim != 2:
            raise ValueError("returns must be a 2-D matrix")
        T, N = self.returns.shape
        if len(self.dates) != T or len(self.tickers) != N:
            raise ValueError("return matrix shape does not match dates/tickers")
        _check_increasing(self.dates)
        if not np.all(np.isfinite(self.returns)):
            raise ValueError("returns must be finite")

    @property
    def n_days(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    def slice(self, start: int, stop: int) -> "ReturnPanel":
        return ReturnPanel(self.dates[start:stop], self.tickers, self.returns[start:stop])

    def with_returns(self, returns) -> "ReturnPanel":
        return ReturnPanel(self.dates, self.tickers, returns)


@dataclass(frozen=True)
class SummaryStats:
    tickers: tuple
    mean: np.ndarray
    std: np.ndarray

    def rows(self):
        return list(zip(self.tickers, self.mean.tolist(), self.std.tolist()))

    def format_table(self) -> str:
        width = max(6, *(len(t) for t in self.tickers))
        lines = [f"{'Ticker':<{width}}  {'Mean':>10}  {'Std':>10}"]
        for t, m, s in self.rows():
            lines.append(f"{t:<{width}}  {m:>10.6f}  {s:>10.6f}")
        return "\n".join(lines)


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def _read_wide(path, *, positive: bool):
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0].lower() != "date":
            raise MalformedRow(1, "header must be 'date,<ticker1>,...'")
        tickers = header[1:]
        if len(set(tickers)) != len(tickers):
            raise MalformedRow(1, "duplicate ticker column")
        rows = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(line_no, f"expected {len(header)} fields, got {len(row)}")
            try:
                date = parse_date(row[0])
            except ValueError:
                raise MalformedRow(line_no, f"unparseable date {row[0]!r}") from None
            values = []
            for ticker, cell in zip(tickers, row[1:]):
                cell = cell.strip()
                if not cell:
                    raise NonPositivePrice(date, ticker) if positive else MalformedRow(line_no, f"missing value for {ticker}")
                try:
                    v = float(cell)
                except ValueError:
                    raise MalformedRow(line_no, f"non-numeric value {cell!r} for {ticker}") from None
                if positive and not v > 0:
                    raise NonPositivePrice(date, ticker)
                if not math.isfinite(v):
                    raise MalformedRow(line_no, f"non-finite value for {ticker}")
                values.append(v)
            if date in rows:
                raise DuplicateDate(date)
            rows[date] = values
    dates = sorted(rows)
    matrix = np.array([rows[d] for d in dates], dtype=float).reshape(len(dates), len(tickers))
    return dates, tickers, matrix


def load_prices(path) -> PricePanel:
    """Load a wide CSV of adjusted close prices.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    MalformedRow
        Bad header, wrong field count, unparseable date or number.
    NonPositivePrice
        A missing, zero or negative price.
    DuplicateDate
        The same date appears on two rows.
    """
    dates, tickers, prices = _read_wide(path, positive=True)
    if len(dates) < 2:
        raise TooShort(f"{path}: need at least 2 price rows, got {len(dates)}")
    return PricePanel(dates, tickers, prices)


def load_returns(path) -> ReturnPanel:
    """Load a wide CSV of log returns (the format written by :func:`write_wide_csv`)."""
    dates, tickers, returns = _read_wide(path, positive=False)
    if not dates:
        raise TooShort(f"{path}: no data rows")
    return ReturnPanel(dates, tickers, returns)


def write_wide_csv(path, dates, tickers, values, fmt: str = "%.17g") -> None:
    """Write a date x ticker matrix; the default format round-trips float64 exactly."""
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *tickers])
        for d, row in zip(dates, values):
            w.writerow([d.isoformat(), *(fmt % v for v in row)])


def compute_log_returns(panel: PricePanel) -> ReturnPanel:
    """``r[t] = ln(P[t+1] / P[t])``, dated at the later date of each pair."""
    if panel.prices.shape[0] < 2:
        raise TooShort("need at least 2 price rows to form a return")
    p = panel.prices
    returns = np.log(p[1:] / p[:-1])
    return ReturnPanel(panel.dates[1:], panel.tickers, returns)


def split_by_date(panel: ReturnPanel, boundary) -> tuple[ReturnPanel, ReturnPanel]:
    """Split into rows dated before ``boundary`` and rows dated on/after it."""
    if isinstance(boundary, str):
        boundary = parse_date(boundary)
    k = sum(1 for d in panel.dates if d < boundary)
    if k == 0 or k == panel.n_days:
        raise EmptySplit(
            f"boundary {boundary} leaves an empty side "
            f"(panel spans {panel.dates[0]}..{panel.dates[-1]})"
        )
    return panel.slice(0, k), panel.slice(k, panel.n_days)


def summary_stats(panel: ReturnPanel) -> SummaryStats:
    """Per-ticker sample mean and standard deviation (divisor T-1)."""
    if panel.n_days < 2:
        raise TooShort("summary statistics need at least 2 rows")
    r = panel.returns
    return SummaryStats(panel.tickers, _frozen(r.mean(axis=0)), _frozen(r.std(axis=0, ddof=1)))


def prices_from_returns(returns, start: float = 100.0) -> np.ndarray:
    """Rebuild a price path, including the starting row, from log returns."""
    r = np.asarray(returns, dtype=float)
    cum = np.vstack([np.zeros((1, r.shape[1])), np.cumsum(r, axis=0)])
    return start * np.exp(cum)
