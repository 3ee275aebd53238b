"""
Walk-forward backtest of the neural strategy against equal-weight and historical
mean-variance baselines, plus performance metrics and report emission.

Indexing is strictly causal: the weights dated ``t`` are computed from panel
rows ``< t`` and earn the realized return of row ``t``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import allocator, risk
from .errors import AlignmentError, DatedError, InsufficientWarmup, NallocError, TooShort, ZeroVolatility
from .forecaster import LstmModel, Window, predict, prediction_metrics
from .market_data import ReturnPanel, parse_date

log = logging.getLogger(__name__)

STRATEGIES = ("equal_weight", "historical_mv", "neural")
LABELS = {"equal_weight": "Equal Weight", "historical_mv": "Historical MV", "neural": "Neural Portfolio"}


@dataclass(frozen=True)
class BacktestConfig:
    window: int = 30
    rebalance_every: int = 1
    cov_window: int | None = None
    shrinkage: float = risk.DEFAULT_SHRINKAGE
    ridge_floor: float = risk.DEFAULT_FLOOR
    strategies: tuple = STRATEGIES
    trading_days: int = 252
    risk_free_rate: float = 0.0
    hist_window: int = 252
    realized_vol_window: int = 30

    def __post_init__(self):
        if isinstance(self.strategies, str):
            object.__setattr__(self, "strategies", tuple(s.strip() for s in self.strategies.split(",") if s.strip()))
        object.__setattr__(self, "strategies", tuple(self.strategies))
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.rebalance_every < 1:
            raise ValueError("rebalance_every must be >= 1")
        if self.covariance_window < 2:
            raise ValueError("cov_window must be >= 2")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown or not self.strategies:
            raise ValueError(f"strategies must be a non-empty subset of {STRATEGIES}, got {self.strategies}")

    @property
    def covariance_window(self) -> int:
        return self.window if self.cov_window is None else self.cov_window

    def ordered_strategies(self) -> tuple:
        return tuple(s for s in STRATEGIES if s in self.strategies)


@dataclass
class WeightSeries:
    strategy: str
    dates: list
    tickers: tuple
    weights: np.ndarray
    fallback: list = field(default_factory=list)


@dataclass
class PipelineResult:
    weights: dict
    forecasts: list
    risk: list
    mu: np.ndarray
    start: int


def resolve_start(panel: ReturnPanel, start) -> int:
    if start is None:
        raise ValueError("start must be given")
    if isinstance(start, (int, np.integer)):
        return int(start)
    if isinstance(start, str):
        start = parse_date(start)
    return sum(1 for d in panel.dates if d < start)


def warmup_rows(config: BacktestConfig) -> int:
    """Rows that must precede the first scored date."""
    need = config.window + config.covariance_window - 1 if "neural" in config.strategies else 0
    if "historical_mv" in config.strategies:
        need = max(need, config.hist_window)
    return max(need, 1)


def run_pipeline(model: LstmModel | None, panel: ReturnPanel, config: BacktestConfig, start) -> PipelineResult:
    """Compute per-date weights for every configured strategy over ``panel[start:]``.

    For the neural strategy each date gets a forecast from the trailing
    ``window`` rows, a rolling volatility over the same rows, a sample
    covariance of the trailing ``cov_window`` forecasts, conditioning, and a
    max-Sharpe solve. Off rebalance days the previous weights are carried.

    Raises
    ------
    InsufficientWarmup
        Too few rows before ``start``.
    DatedError
        Any estimator or solver failure, tagged with the date.
    """
    s0 = resolve_start(panel, start)
    T, N = panel.returns.shape
    L, C, k = config.window, config.covariance_window, config.rebalance_every
    need = warmup_rows(config)
    if s0 < need or s0 >= T:
        raise InsufficientWarmup(
            f"first scored row {s0} needs >= {need} prior rows and must lie inside the panel (T={T})"
        )
    use_neural = "neural" in config.strategies
    if use_neural:
        if model is None:
            raise ValueError("the neural strategy needs a model")
        if model.input_dim != N:
            raise AlignmentError(f"model expects {model.input_dim} assets, panel has {N}")

    dates = list(panel.dates[s0:])
    M = len(dates)
    out = {s: np.zeros((M, N)) for s in config.ordered_strategies()}
    flags = {s: [False] * M for s in out}
    forecasts, estimates = [], []
    mu_rows = np.zeros((M, N)) if use_neural else np.zeros((0, N))
    history = []
    if use_neural:
        r = panel.returns
        for s in range(s0 - C + 1, s0):
            history.append(predict(model, Window(r[s - L:s], None, panel.dates[s])).mu_hat)

    prev = {}
    for m, t in enumerate(range(s0, T)):
        date = panel.dates[t]
        rebalance = m % k == 0
        try:
            if use_neural:
                fc = predict(model, Window(panel.returns[t - L:t], None, date))
                forecasts.append(fc)
                history.append(fc.mu_hat)
                history = history[-C:]
                mu_rows[m] = fc.mu_hat
                sigma = risk.rolling_volatility(panel, t, L)
                raw = risk.forecast_covariance(history, C)
                cov = risk.condition_covariance(raw, sigma, config.shrinkage, config.ridge_floor)
                estimates.append(risk.RiskEstimate(date, sigma, cov))
            for strat in out:
                if not rebalance:
                    out[strat][m] = prev[strat].w
                    flags[strat][m] = prev[strat].fallback
                    continue
                if strat == "equal_weight":
                    w = allocator.equal_weight(N, date)
                elif strat == "historical_mv":
                    w = allocator.historical_mv(panel, t, config.hist_window, config.shrinkage, config.ridge_floor)
                else:
                    w = allocator.max_sharpe(fc.mu_hat, cov, date)
                prev[strat] = w
                out[strat][m] = w.w
                flags[strat][m] = w.fallback
        except (NallocError, np.linalg.LinAlgError) as exc:
            raise DatedError(date, exc) from exc

    series = {s: WeightSeries(s, dates, panel.tickers, out[s], flags[s]) for s in out}
    return PipelineResult(series, forecasts, estimates, mu_rows, s0)


def portfolio_returns(weights: WeightSeries, panel: ReturnPanel) -> np.ndarray:
    """Daily portfolio log returns ``ln(1 + sum_i w_i (exp(r_i) - 1))``."""
    pos = {d: i for i, d in enumerate(panel.dates)}
    try:
        rows = [pos[d] for d in weights.dates]
    except KeyError as exc:
        raise AlignmentError(f"weight date {exc.args[0]} not in the return panel") from None
    if tuple(weights.tickers) != tuple(panel.tickers):
        raise AlignmentError("weight tickers differ from panel tickers")
    simple = np.expm1(panel.returns[rows])
    return np.log1p(np.sum(np.asarray(weights.weights) * simple, axis=1))


def wealth_path(log_returns) -> np.ndarray:
    """Wealth starting at 1.0, one entry longer than the return series."""
    return np.exp(np.concatenate([[0.0], np.cumsum(log_returns)]))


def max_drawdown(wealth) -> float:
    wealth = np.asarray(wealth, dtype=float)
    peak = np.maximum.accumulate(wealth)
    return float(np.max(1.0 - wealth / peak))


def portfolio_metrics(series, config: BacktestConfig = BacktestConfig()) -> dict:
    """Geometric annual return, annualized Sharpe (``None`` when volatility is zero), max drawdown."""
    r = np.asarray(series, dtype=float)
    n = len(r)
    if n < 2:
        raise TooShort("portfolio metrics need at least 2 daily returns")
    wealth = wealth_path(r)
    ann = float(wealth[-1] ** (config.trading_days / n) - 1.0)
    simple = np.expm1(r)
    sd = float(np.std(simple, ddof=1))
    if sd > 0:
        excess = simple - config.risk_free_rate / config.trading_days
        sr = float(np.mean(excess) / sd * math.sqrt(config.trading_days))
    else:
        sr = None
    return {"annual_return": ann, "sharpe": sr, "max_drawdown": max_drawdown(wealth)}


def sharpe_or_raise(series, config: BacktestConfig = BacktestConfig()) -> float:
    sr = portfolio_metrics(series, config)["sharpe"]
    if sr is None:
        raise ZeroVolatility("daily returns have zero standard deviation")
    return sr


@dataclass
class StrategyResult:
    name: str
    dates: list
    weights: np.ndarray
    daily_returns: np.ndarray
    wealth: np.ndarray
    metrics: dict
    fallback_days: int = 0

    @property
    def label(self) -> str:
        return LABELS[self.name]


@dataclass
class BacktestReport:
    tickers: tuple
    dates: list
    wealth_start_date: object
    strategies: dict
    prediction: dict | None = None
    vol_dates: list = field(default_factory=list)
    vol_predicted: np.ndarray | None = None
    vol_realized: np.ndarray | None = None
    risk: list = field(default_factory=list)
    mu: np.ndarray | None = None
    config: dict = field(default_factory=dict)


def run_backtest(model: LstmModel | None, panel: ReturnPanel, config: BacktestConfig, start) -> BacktestReport:
    """Run the pipeline and collect metrics for every strategy."""
    res = run_pipeline(model, panel, config, start)
    s0 = res.start
    strategies = {}
    for name, ws in res.weights.items():
        r = portfolio_returns(ws, panel)
        strategies[name] = StrategyResult(name, ws.dates, ws.weights, r, wealth_path(r),
                                          portfolio_metrics(r, config), _count_fallbacks(ws, config))

    report = BacktestReport(
        tickers=panel.tickers,
        dates=list(panel.dates[s0:]),
        wealth_start_date=panel.dates[s0 - 1],
        strategies=strategies,
        config=asdict(config),
    )
    if res.forecasts:
        report.prediction = prediction_metrics(res.forecasts, panel.slice(s0, panel.n_days))
        report.risk = res.risk
        report.mu = res.mu
        report.vol_dates = [e.date for e in res.risk]
        report.vol_predicted = np.stack([np.sqrt(np.diag(e.cov)) for e in res.risk])
        V = config.realized_vol_window
        realized = np.full_like(report.vol_predicted, np.nan)
        for m, t in enumerate(range(s0, panel.n_days)):
            if t + 1 >= V:
                realized[m] = risk.rolling_volatility(panel, t + 1, V)
        report.vol_realized = realized
    return report


def _count_fallbacks(ws: WeightSeries, config: BacktestConfig) -> int:
    return sum(1 for m, f in enumerate(ws.fallback) if f and m % config.rebalance_every == 0)


def _f6(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return f"{v:.6f}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(report: BacktestReport, out_dir, *, svg: bool = True, export_risk: bool = False) -> list:
    """Write the metrics table, per-strategy series and volatility comparison.

    All numbers use six decimals, so emitting the same report twice produces
    byte-identical files. Returns the list of paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def path(name):
        p = os.path.join(out_dir, name)
        written.append(p)
        return p

    rows = [[s.label, _f6(s.metrics["annual_return"]), _f6(s.metrics["sharpe"]), _f6(s.metrics["max_drawdown"])]
            for s in report.strategies.values()]
    _write_csv(path("metrics.csv"), ["strategy", "annual_return", "sharpe", "max_drawdown"], rows)

    lines = [f"Backtest {report.dates[0]} .. {report.dates[-1]} ({len(report.dates)} days, {len(report.tickers)} assets)", ""]
    lines.append(f"{'Strategy':<18}{'Annual Return':>15}{'Sharpe':>12}{'Max Drawdown':>15}")
    for r in rows:
        lines.append(f"{r[0]:<18}{r[1]:>15}{(r[2] or 'n/a'):>12}{r[3]:>15}")
    flagged = [(s.label, s.fallback_days) for s in report.strategies.values() if s.fallback_days]
    if flagged:
        lines += ["", "Minimum-variance fallback (no positive expected return):"]
        lines += [f"  {label}: {n} rebalance day(s)" for label, n in flagged]
    if report.prediction:
        p = report.prediction
        lines += ["", f"{'Model':<18}{'RMSE':>12}{'MAE':>12}{'Directional Accuracy':>24}",
                  f"{'Neural forecaster':<18}{_f6(p['rmse']):>12}{_f6(p['mae']):>12}{_f6(p['directional_accuracy']):>24}"]
    with open(path("metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    if report.prediction:
        p = report.prediction
        _write_csv(path("prediction_metrics.csv"), ["rmse", "mae", "directional_accuracy"],
                   [[_f6(p["rmse"]), _f6(p["mae"]), _f6(p["directional_accuracy"])]])

    for s in report.strategies.values():
        wdates = [report.wealth_start_date, *s.dates]
        _write_csv(path(f"wealth_{s.name}.csv"), ["date", "wealth"],
                   [[d.isoformat(), _f6(v)] for d, v in zip(wdates, s.wealth)])
        _write_csv(path(f"weights_{s.name}.csv"), ["date", "ticker", "weight"],
                   [[d.isoformat(), t, _f6(v)] for d, row in zip(s.dates, s.weights)
                    for t, v in zip(report.tickers, row)])

    if report.vol_predicted is not None:
        _write_csv(path("vol_compare.csv"), ["date", "ticker", "predicted", "realized"],
                   [[d.isoformat(), t, _f6(float(p)), _f6(float(r))]
                    for d, prow, rrow in zip(report.vol_dates, report.vol_predicted, report.vol_realized)
                    for t, p, r in zip(report.tickers, prow, rrow)])

    if svg:
        from .svg import line_chart
        wdates = [report.wealth_start_date, *report.dates]
        with open(path("cumulative.svg"), "w", encoding="utf-8") as fh:
            fh.write(line_chart(wdates, {s.label: s.wealth for s in report.strategies.values()},
                                title="Cumulative wealth", ylabel="wealth"))
        if report.vol_predicted is not None:
            with open(path("vol_compare.svg"), "w", encoding="utf-8") as fh:
                fh.write(line_chart(report.vol_dates, {
                    "predicted (mean across assets)": np.nanmean(report.vol_predicted, axis=1),
                    "realized 30-day (mean across assets)": _nanmean_rows(report.vol_realized),
                }, title="Predicted vs realized volatility", ylabel="daily volatility"))

    if export_risk and report.risk:
        risk_dir = os.path.join(out_dir, "risk")
        risk.export_risk(report.risk, report.tickers, risk_dir)
        _write_csv(os.path.join(risk_dir, "mu.csv"), ["date", "ticker", "mu"],
                   [[d.isoformat(), t, "%.17g" % v] for d, row in zip(report.vol_dates, report.mu)
                    for t, v in zip(report.tickers, row)])
        written.append(risk_dir)
    return written


def _nanmean_rows(a):
    a = np.asarray(a, dtype=float)
    out = np.full(a.shape[0], np.nan)
    ok = ~np.all(np.isnan(a), axis=1)
    out[ok] = np.nanmean(a[ok], axis=1)
    return out


def _arr(a):
    return None if a is None else [[None if not math.isfinite(v) else float(v) for v in row] for row in np.asarray(a)]


def save_report_data(report: BacktestReport, path) -> None:
    """Persist the stored series so the report can be re-rendered later."""
    doc = {
        "tickers": list(report.tickers),
        "dates": [d.isoformat() for d in report.dates],
        "wealth_start_date": report.wealth_start_date.isoformat(),
        "config": report.config,
        "prediction": report.prediction,
        "strategies": {
            name: {"weights": _arr(s.weights), "daily_returns": [float(v) for v in s.daily_returns],
                   "fallback_days": s.fallback_days}
            for name, s in report.strategies.items()
        },
        "vol_dates": [d.isoformat() for d in report.vol_dates],
        "vol_predicted": _arr(report.vol_predicted),
        "vol_realized": _arr(report.vol_realized),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_report_data(path) -> BacktestReport:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = dict(doc["config"])
    cfg["strategies"] = tuple(cfg["strategies"])
    config = BacktestConfig(**cfg)
    dates = [parse_date(d) for d in doc["dates"]]

    def mat(a):
        return None if a is None else np.array([[np.nan if v is None else v for v in row] for row in a], dtype=float)

    strategies = {}
    for name in config.ordered_strategies():
        s = doc["strategies"][name]
        r = np.array(s["daily_returns"], dtype=float)
        strategies[name] = StrategyResult(name, dates, mat(s["weights"]), r, wealth_path(r),
                                          portfolio_metrics(r, config), s.get("fallback_days", 0))
    return BacktestReport(
        tickers=tuple(doc["tickers"]),
        dates=dates,
        wealth_start_date=parse_date(doc["wealth_start_date"]),
        strategies=strategies,
        prediction=doc.get("prediction"),
        vol_dates=[parse_date(d) for d in doc.get("vol_dates", [])],
        vol_predicted=mat(doc.get("vol_predicted")),
        vol_realized=mat(doc.get("vol_realized")),
        config=doc["config"],
    )
