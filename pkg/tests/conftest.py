import datetime as dt

import numpy as np
import pytest

from nalloc.market_data import ReturnPanel


def make_panel(returns, start=dt.date(2020, 1, 1), tickers=None):
    returns = np.asarray(returns, dtype=float)
    if returns.ndim == 1:
        returns = returns[:, None]
    T, N = returns.shape
    dates = [start + dt.timedelta(days=i) for i in range(T)]
    return ReturnPanel(dates, tickers or [f"T{i}" for i in range(N)], returns)


def write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
