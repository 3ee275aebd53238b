"""
Synthetic return panels: AR(1) mean with GARCH(1,1) variance and equicorrelated
Gaussian innovations.

Per asset ``i`` and day ``t``::

    r[t] = ar * r[t-1] + u[t],        u[t] = sigma[t] * eps[t]
    sigma[t]^2 = omega + alpha * u[t-1]^2 + beta * sigma[t-1]^2

The first generated day uses the stationary variance ``omega / (1 - alpha - beta)``
and ``r[-1] = 0``.

Random source: numpy's PCG64 seeded through ``SeedSequence(seed).spawn(n_assets + 1)``.
Child stream 0 drives the common factor ``f``; child ``i + 1`` drives asset ``i``'s
idiosyncratic draw ``z``. Innovations are ``eps = sqrt(rho) * f + sqrt(1 - rho) * z``,
which have unit variance and pairwise correlation ``rho``.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import InvalidSpec
from .market_data import ReturnPanel

EPOCH = dt.date(2000, 1, 3)

Coef = Union[float, Sequence[float]]


@dataclass(frozen=True)
class SynthSpec:
    n_assets: int = 3
    n_days: int = 2000
    seed: int = 0
    garch_omega: Coef = 1e-6
    garch_alpha: Coef = 0.05
    garch_beta: Coef = 0.90
    cross_corr: float = 0.3
    ar_coeff: Coef = 0.0
    tickers: Sequence[str] = field(default=())

    def per_asset(self, name: str) -> np.ndarray:
        value = getattr(self, name)
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            arr = np.full(self.n_assets, float(arr))
        if arr.shape != (self.n_assets,):
            raise InvalidSpec(f"{name} must be a scalar or have length n_assets={self.n_assets}")
        return arr.copy()

    def validate(self) -> None:
        if int(self.n_assets) < 1:
            raise InvalidSpec("n_assets must be >= 1")
        if int(self.n_days) < 1:
            raise InvalidSpec("n_days must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidSpec("seed must fit in an unsigned 64-bit integer")
        omega, alpha, beta = (self.per_asset(n) for n in ("garch_omega", "garch_alpha", "garch_beta"))
        ar = self.per_asset("ar_coeff")
        if np.any(omega < 0) or np.any(alpha < 0) or np.any(beta < 0):
            raise InvalidSpec("garch_omega/alpha/beta must be non-negative")
        if np.any(alpha + beta >= 1):
            raise InvalidSpec("garch_alpha + garch_beta must be < 1 (covariance stationarity)")
        if not 0 <= self.cross_corr < 1:
            raise InvalidSpec("cross_corr must lie in [0, 1)")
        if np.any(np.abs(ar) >= 1):
            raise InvalidSpec("ar_coeff must lie in (-1, 1)")
        if self.tickers and len(self.tickers) != self.n_assets:
            raise InvalidSpec("tickers must have length n_assets")


def weekday_dates(n: int, start: dt.date = EPOCH) -> list[dt.date]:
    out = []
    d = start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def previous_weekday(d: dt.date) -> dt.date:
    d -= dt.timedelta(days=1)
    while d.weekday() >= 5:
        d -= dt.timedelta(days=1)
    return d


def generate_panel(spec: SynthSpec) -> ReturnPanel:
    """Simulate ``spec.n_days`` x ``spec.n_assets`` log returns; deterministic in ``spec.seed``."""
    spec.validate()
    n, T = int(spec.n_assets), int(spec.n_days)
    omega = spec.per_asset("garch_omega")
    alpha = spec.per_asset("garch_alpha")
    beta = spec.per_asset("garch_beta")
    ar = spec.per_asset("ar_coeff")
    rho = float(spec.cross_corr)

    streams = [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(int(spec.seed)).spawn(n + 1)]
    factor = streams[0].standard_normal(T)
    idio = np.column_stack([g.standard_normal(T) for g in streams[1:]])
    eps = np.sqrt(rho) * factor[:, None] + np.sqrt(1.0 - rho) * idio

    out = np.empty((T, n))
    var = omega / (1.0 - alpha - beta)
    r_prev = np.zeros(n)
    u = np.zeros(n)
    for t in range(T):
        if t > 0:
            var = omega + alpha * u * u + beta * var
        u = np.sqrt(var) * eps[t]
        r_prev = ar * r_prev + u
        out[t] = r_prev

    tickers = tuple(spec.tickers) or tuple(f"A{i}" for i in range(n))
    return ReturnPanel(weekday_dates(T), tickers, out)
