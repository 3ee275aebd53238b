"""
Rolling volatility, forecast covariance and covariance conditioning.

``rolling_volatility`` uses the population divisor ``L``; ``forecast_covariance``
uses the sample divisor ``L - 1``. ``condition_covariance`` takes the
correlation structure from the forecast covariance and the scale from the
rolling volatilities.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import IndexOutOfRange, InsufficientHistory, NegativeDiagonal
from .market_data import ReturnPanel

DEFAULT_SHRINKAGE = 0.1
DEFAULT_FLOOR = 1e-8


@dataclass(frozen=True)
class RiskEstimate:
    date: object
    sigma: np.ndarray
    cov: np.ndarray


def rolling_volatility(panel: ReturnPanel | np.ndarray, t: int, L: int) -> np.ndarray:
    """Per-asset std of rows ``t-L .. t-1`` (divisor ``L``)."""
    r = panel.returns if isinstance(panel, ReturnPanel) else np.asarray(panel, dtype=float)
    if L < 1 or t < L or t > r.shape[0]:
        raise IndexOutOfRange(f"rolling window needs L <= t <= {r.shape[0]} (t={t}, L={L})")
    window = r[t - L:t]
    dev = window - window.mean(axis=0)
    return np.sqrt(np.sum(dev * dev, axis=0) / L)


def forecast_covariance(history: Sequence, L: int) -> np.ndarray:
    """Sample covariance (divisor ``L - 1``) of the trailing ``L`` forecast vectors."""
    if L < 2:
        raise InsufficientHistory("covariance window must be >= 2")
    if len(history) < L:
        raise InsufficientHistory(f"need {L} forecasts, have {len(history)}")
    F = np.stack([np.asarray(getattr(f, "mu_hat", f), dtype=float) for f in history[-L:]])
    dev = F - F.mean(axis=0)
    cov = dev.T @ dev / (L - 1)
    return 0.5 * (cov + cov.T)


def condition_covariance(cov, sigma, shrinkage: float = DEFAULT_SHRINKAGE,
                         floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Rebuild a covariance as ``D ((1-lam) R + lam I) D + floor I`` with ``D = diag(sigma)``.

    ``R`` is the correlation matrix implied by ``cov``; assets whose variance in
    ``cov`` is not positive get an identity row/column. If round-off still
    leaves a negative eigenvalue, eigenvalues are clipped at zero.
    """
    cov = np.asarray(cov, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    if floor < 0:
        raise ValueError("floor must be >= 0")
    diag = np.diag(cov)
    if np.any(diag < -1e-12):
        raise NegativeDiagonal(f"covariance diagonal has entry {diag.min():.3g}")

    ok = diag > 0
    scale = np.where(ok, np.sqrt(np.where(ok, diag, 1.0)), 1.0)
    R = cov / np.outer(scale, scale)
    R[~ok, :] = 0.0
    R[:, ~ok] = 0.0
    np.fill_diagonal(R, 1.0)
    R = 0.5 * (R + R.T)

    shrunk = (1.0 - shrinkage) * R + shrinkage * np.eye(len(sigma))
    out = sigma[:, None] * shrunk * sigma[None, :] + floor * np.eye(len(sigma))
    out = 0.5 * (out + out.T)
    vals, vecs = np.linalg.eigh(out)
    if vals[0] < 0:
        out = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        out = 0.5 * (out + out.T)
    return out


def export_risk(estimates: Sequence[RiskEstimate], tickers: Sequence[str], out_dir) -> None:
    """Write ``sigma.csv`` (date,ticker,sigma) and one square ``cov/<date>.csv`` per date."""
    os.makedirs(os.path.join(out_dir, "cov"), exist_ok=True)
    with open(os.path.join(out_dir, "sigma.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ticker", "sigma"])
        for est in estimates:
            for t, s in zip(tickers, est.sigma):
                w.writerow([est.date.isoformat(), t, "%.17g" % s])
    for est in estimates:
        with open(os.path.join(out_dir, "cov", f"{est.date.isoformat()}.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ticker", *tickers])
            for t, row in zip(tickers, est.cov):
                w.writerow([t, *("%.17g" % v for v in row)])


def read_cov_file(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])
