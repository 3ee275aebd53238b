"""
Long-only allocation on the simplex.

Maximising ``w'mu / sqrt(w'S w)`` over ``{sum w = 1, w >= 0}`` is solved through
the convex reformulation

    min y'S y   s.t.   mu'y = 1,  y >= 0,      w = y / sum(y),

which is valid whenever some ``mu_i > 0``. Minimum variance is the same
problem with ``mu`` replaced by a vector of ones. Both go through one dense
primal active-set solver.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientHistory, SingularRisk, ZeroAssets
from .market_data import ReturnPanel
from .risk import DEFAULT_FLOOR, DEFAULT_SHRINKAGE, condition_covariance, rolling_volatility

log = logging.getLogger(__name__)

KKT_TOL = 1e-10
MAX_ITER = 10_000


@dataclass(frozen=True)
class Weights:
    w: np.ndarray
    date: object = None
    fallback: bool = False

    def __post_init__(self):
        w = np.clip(np.asarray(self.w, dtype=float), 0.0, None)
        w = w / w.sum()
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


def sharpe(w, mu, cov) -> float:
    w = np.asarray(w, dtype=float)
    return float(w @ mu / np.sqrt(w @ cov @ w))


def _eqp(Q, a, free):
    """Minimise ``x'Qx`` subject to ``a'x = 1`` with ``x`` zero off ``free``."""
    idx = np.flatnonzero(free)
    k = len(idx)
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = 2.0 * Q[np.ix_(idx, idx)]
    K[:k, k] = -a[idx]
    K[k, :k] = a[idx]
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    x = np.zeros(len(a))
    x[idx] = sol[:k]
    return x, sol[k]


def _active_set(Q, a, x0, tol=KKT_TOL, max_iter=MAX_ITER):
    """Primal active-set iteration for ``min x'Qx, a'x = 1, x >= 0`` from feasible ``x0``."""
    x = np.array(x0, dtype=float)
    bound = x <= 0
    x[bound] = 0.0
    for _ in range(max_iter):
        xhat, nu = _eqp(Q, a, ~bound)
        p = xhat - x
        blocking = ~bound & (p < 0) & (xhat < -tol)
        if not blocking.any():
            x = xhat
            x[bound] = 0.0
            lam = 2.0 * Q @ x - nu * a
            lam_bound = np.where(bound, lam, np.inf)
            j = int(np.argmin(lam_bound))
            if lam_bound[j] >= -tol:
                return np.clip(x, 0.0, None)
            bound[j] = False
            continue
        cand = np.flatnonzero(blocking)
        ratios = x[cand] / -p[cand]
        j = int(cand[np.argmin(ratios)])
        x = x + float(ratios.min()) * p
        x[j] = 0.0
        bound[j] = True
    log.warning("active-set solver hit the %d iteration cap", max_iter)
    return np.clip(x, 0.0, None)


def _check(cov, n=None) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or (n is not None and cov.shape[0] != n):
        raise DimensionMismatch(f"covariance has shape {cov.shape}, expected ({n}, {n})")
    return cov


def _starts(a):
    n = len(a)
    out = []
    if a.sum() > 0:
        out.append(np.ones(n) / a.sum())
    for k in range(n):
        if a[k] > 0:
            e = np.zeros(n)
            e[k] = 1.0 / a[k]
            out.append(e)
    return out


def _solve(Q, a):
    """Run every multistart and return the candidate list in start order."""
    qs = np.max(np.diag(Q))
    As = np.max(np.abs(a))
    Qn, an = Q / qs, a / As
    return [_active_set(Qn, an, x0) for x0 in _starts(an)]


def min_variance(cov, date=None) -> Weights:
    """Minimum-variance weights on the simplex."""
    cov = _check(cov)
    n = cov.shape[0]
    if n == 0:
        raise ZeroAssets("empty covariance")
    if n == 1:
        return Weights(np.ones(1), date)
    cands = [y / y.sum() for y in _solve(cov, np.ones(n))]
    var = [float(w @ cov @ w) for w in cands]
    best = min(var)
    pick = next(i for i, v in enumerate(var) if v <= best + 1e-15 * abs(best))
    return Weights(cands[pick], date)


def max_sharpe(mu, cov, date=None) -> Weights:
    """Long-only maximum-Sharpe weights.

    Falls back to :func:`min_variance` when no asset has a positive expected
    return; the returned ``Weights.fallback`` flag records this.

    Raises
    ------
    SingularRisk
        A feasible portfolio with positive expected return has zero variance.
    DimensionMismatch
        ``mu`` and ``cov`` disagree in size.
    """
    mu = np.asarray(mu, dtype=float)
    cov = _check(cov, len(mu))
    n = len(mu)
    if n == 0:
        raise ZeroAssets("no assets")
    if not np.all(np.isfinite(mu)):
        raise ValueError("mu must be finite")
    if n == 1:
        return Weights(np.ones(1), date)
    if mu.max() <= 0:
        log.info("all expected returns <= 0 on %s; using minimum variance", date)
        w = min_variance(cov, date)
        return Weights(w.w, date, fallback=True)
    if np.any((np.diag(cov) <= 0) & (mu > 0)):
        raise SingularRisk("an asset with positive expected return has zero variance")

    cands = []
    for y in _solve(cov, mu):
        w = y / y.sum()
        var = float(w @ cov @ w)
        if var <= 1e-15 * np.max(np.diag(cov)):
            raise SingularRisk("zero-variance portfolio with positive expected return")
        cands.append((float(w @ mu) / np.sqrt(var), w))
    best = max(s for s, _ in cands)
    pick = next(w for s, w in cands if s >= best - 1e-12 * abs(best))
    return Weights(pick, date)


def equal_weight(n: int, date=None) -> Weights:
    if n < 1:
        raise ZeroAssets("equal weight needs at least one asset")
    return Weights(np.full(n, 1.0 / n), date)


def historical_mv(panel: ReturnPanel, t: int, L_hist: int, shrinkage: float = DEFAULT_SHRINKAGE,
                  floor: float = DEFAULT_FLOOR) -> Weights:
    """Max-Sharpe weights from the trailing ``L_hist`` rows (``t - L_hist .. t - 1``).

    The sample covariance (divisor ``L_hist - 1``) is conditioned with the
    rolling volatility of the same rows before solving.
    """
    if L_hist < 2 or t < L_hist or t > panel.n_days:
        raise InsufficientHistory(f"historical MV at index {t} needs {L_hist} prior rows")
    window = panel.returns[t - L_hist:t]
    mu = window.mean(axis=0)
    cov = np.cov(window, rowvar=False, ddof=1).reshape(panel.n_assets, panel.n_assets)
    sigma = rolling_volatility(panel, t, L_hist)
    date = panel.dates[t] if t < panel.n_days else None
    return max_sharpe(mu, condition_covariance(cov, sigma, shrinkage, floor), date)
