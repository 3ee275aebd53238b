"""
Command-line front end: ``nalloc {ingest,synth,train,backtest,report}``.

Settings come from built-in defaults, then an optional ``--config`` file of
flat ``key = value`` lines, then command-line flags (``--kebab-case`` form of
the same keys). Exit codes: 0 ok, 2 data error, 3 training error,
4 backtest error, 64 usage error. ``NALLOC_LOG`` (error, info, debug) sets
the stderr log level.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass

from . import __version__
from .backtest import STRATEGIES, BacktestConfig, emit_report, load_report_data, run_backtest, save_report_data
from .errors import DataError, InvalidSpec, NallocError, TrainingError
from .forecaster import TrainConfig, load_model, make_windows, save_model, train
from .market_data import (
    compute_log_returns,
    load_prices,
    load_returns,
    prices_from_returns,
    split_by_date,
    summary_stats,
    write_wide_csv,
)
from .synth import SynthSpec, generate_panel, previous_weekday

log = logging.getLogger("nalloc")

EXIT_DATA, EXIT_TRAIN, EXIT_BACKTEST, EXIT_USAGE = 2, 3, 4, 64
SECTION = "nalloc"


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    parts = [p for p in str(text).split(",") if p.strip()]
    return float(parts[0]) if len(parts) == 1 else [float(p) for p in parts]


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text in (None, "", "none", "None") else int(text)


def _strategies(text):
    items = text if isinstance(text, (list, tuple)) else str(text).split(",")
    out = tuple(s.strip() for s in items if s.strip())
    bad = set(out) - set(STRATEGIES)
    if bad or not out:
        raise ValueError(f"strategies must be drawn from {','.join(STRATEGIES)}")
    return out


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    help: str


_T, _B, _S = TrainConfig(), BacktestConfig(), SynthSpec()

KEYS = {
    # paths
    "prices": Key(str, None, "wide CSV of adjusted close prices"),
    "returns": Key(str, None, "wide CSV of log returns (ingest/synth output)"),
    "model": Key(str, "model.json", "model checkpoint path"),
    "out": Key(str, None, "output file"),
    "out_dir": Key(str, "report", "report output directory"),
    "boundary": Key(str, "2020-01-01", "first date of the test period (YYYY-MM-DD)"),
    "seed": Key(int, 0, "random seed"),
    # forecaster
    "window": Key(int, 30, "input window length L"),
    "epochs": Key(int, _T.epochs, "training epochs"),
    "learning_rate": Key(float, _T.learning_rate, "Adam learning rate"),
    "batch_size": Key(int, _T.batch_size, "mini-batch size"),
    "hidden_dim": Key(int, _T.hidden_dim, "LSTM hidden size d"),
    "gradient_clip_norm": Key(float, _T.gradient_clip_norm, "global gradient-norm clip"),
    "beta1": Key(float, _T.beta1, "first-moment decay"),
    "beta2": Key(float, _T.beta2, "second-moment decay"),
    # backtest
    "rebalance_every": Key(int, _B.rebalance_every, "rebalance every k days"),
    "cov_window": Key(_opt_int, None, "forecast-covariance window (default: window)"),
    "shrinkage": Key(float, _B.shrinkage, "correlation shrinkage toward identity, in [0,1]"),
    "ridge_floor": Key(float, _B.ridge_floor, "ridge added to the covariance diagonal"),
    "strategies": Key(_strategies, ",".join(STRATEGIES), "comma list of strategies"),
    "trading_days": Key(int, _B.trading_days, "trading days per year"),
    "risk_free_rate": Key(float, _B.risk_free_rate, "annual risk-free rate"),
    "hist_window": Key(int, _B.hist_window, "historical MV lookback"),
    "realized_vol_window": Key(int, _B.realized_vol_window, "realized volatility window in the report"),
    "svg": Key(_bool, True, "write SVG charts"),
    "export_risk": Key(_bool, False, "export per-date sigma, mu and covariance files"),
    # synth
    "n_assets": Key(int, _S.n_assets, "number of synthetic assets"),
    "n_days": Key(int, _S.n_days, "number of synthetic days"),
    "garch_omega": Key(_floats, _S.garch_omega, "GARCH omega (scalar or comma list)"),
    "garch_alpha": Key(_floats, _S.garch_alpha, "GARCH alpha (scalar or comma list)"),
    "garch_beta": Key(_floats, _S.garch_beta, "GARCH beta (scalar or comma list)"),
    "cross_corr": Key(float, _S.cross_corr, "innovation correlation in [0,1)"),
    "ar_coeff": Key(_floats, _S.ar_coeff, "AR(1) coefficient (scalar or comma list)"),
    "as_prices": Key(_bool, False, "emit prices starting at 100 instead of returns"),
}

COMMAND_KEYS = {
    "ingest": ("prices", "out", "seed"),
    "synth": ("out", "seed", "n_assets", "n_days", "garch_omega", "garch_alpha", "garch_beta",
              "cross_corr", "ar_coeff", "as_prices"),
    "train": ("returns", "model", "boundary", "seed", "window", "epochs", "learning_rate", "batch_size",
              "hidden_dim", "gradient_clip_norm", "beta1", "beta2"),
    "backtest": ("returns", "model", "boundary", "out_dir", "seed", "window", "rebalance_every", "cov_window",
                 "shrinkage", "ridge_floor", "strategies", "trading_days", "risk_free_rate", "hist_window",
                 "realized_vol_window", "svg", "export_risk"),
    "report": ("out_dir", "seed", "svg", "export_risk"),
}

DESCRIPTIONS = {
    "ingest": "Load a price CSV, print summary statistics and write a log-return cache.",
    "synth": "Generate a synthetic AR(1)-GARCH(1,1) panel as wide CSV.",
    "train": "Train the LSTM forecaster on returns before the boundary date.",
    "backtest": "Backtest the neural, equal-weight and historical MV strategies after the boundary date.",
    "report": "Re-render a report directory from its stored report.json.",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nalloc", description="Joint return/risk portfolio construction engine.")
    parser.add_argument("--version", action="version", version=f"nalloc {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for cmd, keys in COMMAND_KEYS.items():
        p = sub.add_parser(cmd, help=DESCRIPTIONS[cmd], description=DESCRIPTIONS[cmd])
        p.add_argument("--config", help="flat key = value settings file (flags take precedence)")
        for key in keys:
            spec = KEYS[key]
            flag = "--" + key.replace("_", "-")
            default = spec.default if spec.default is not None else "none"
            if spec.parse is _bool:
                p.add_argument(flag, dest=key, nargs="?", const="true", default=argparse.SUPPRESS,
                               metavar="BOOL", help=f"{spec.help} (default: {str(default).lower()})")
            else:
                p.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar=key.upper(),
                               help=f"{spec.help} (default: {default})")
    return parser


def read_config_file(path) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text if text.lstrip().startswith("[") else f"[{SECTION}]\n{text}")
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            key = key.replace("-", "_")
            if key not in KEYS:
                raise UsageError(f"{path}: unknown key {key!r}")
            out[key] = value
    return out


def effective_settings(cmd: str, ns: argparse.Namespace) -> dict:
    raw = {k: KEYS[k].default for k in COMMAND_KEYS[cmd]}
    if getattr(ns, "config", None):
        for k, v in read_config_file(ns.config).items():
            if k in raw:
                raw[k] = v
    for k in COMMAND_KEYS[cmd]:
        if hasattr(ns, k):
            raw[k] = getattr(ns, k)
    settings = {}
    for k, v in raw.items():
        try:
            settings[k] = None if v is None else KEYS[k].parse(v)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {k}: {v!r} ({exc})") from None
    return settings


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_value(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def write_effective_config(settings: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"[{SECTION}]\n")
        for k in sorted(settings):
            fh.write(f"{k} = {_fmt_value(settings[k])}\n")


def _require(settings, key):
    if not settings.get(key):
        raise UsageError(f"--{key.replace('_', '-')} is required (flag or config file)")
    return settings[key]


def _dirname(path):
    return os.path.dirname(os.path.abspath(path))


def cmd_ingest(s) -> int:
    src = _require(s, "prices")
    prices = load_prices(src)
    returns = compute_log_returns(prices)
    stats = summary_stats(returns)
    out = s["out"] or os.path.splitext(src)[0] + ".returns.csv"
    write_wide_csv(out, returns.dates, returns.tickers, returns.returns)
    write_effective_config(s, os.path.join(_dirname(out), "ingest.effective.ini"))
    T, N = prices.prices.shape
    print(f"{src}: N={N} tickers, T={T} price rows, {prices.dates[0]} .. {prices.dates[-1]}")
    print(f"returns: {returns.n_days} rows -> {out}")
    print(stats.format_table())
    return 0


def synth_spec(s) -> SynthSpec:
    return SynthSpec(
        n_assets=s["n_assets"], n_days=s["n_days"], seed=s["seed"],
        garch_omega=s["garch_omega"], garch_alpha=s["garch_alpha"], garch_beta=s["garch_beta"],
        cross_corr=s["cross_corr"], ar_coeff=s["ar_coeff"],
    )


def cmd_synth(s) -> int:
    panel = generate_panel(synth_spec(s))
    out = s["out"] or "synth.csv"
    if s["as_prices"]:
        dates = [previous_weekday(panel.dates[0]), *panel.dates]
        write_wide_csv(out, dates, panel.tickers, prices_from_returns(panel.returns, 100.0))
    else:
        write_wide_csv(out, panel.dates, panel.tickers, panel.returns)
    write_effective_config(s, os.path.join(_dirname(out), "synth.effective.ini"))
    kind = "prices" if s["as_prices"] else "log returns"
    print(f"wrote {panel.n_days} x {panel.n_assets} synthetic {kind} to {out}")
    return 0


def train_config(s) -> TrainConfig:
    return TrainConfig(
        epochs=s["epochs"], learning_rate=s["learning_rate"], batch_size=s["batch_size"],
        hidden_dim=s["hidden_dim"], seed=s["seed"], gradient_clip_norm=s["gradient_clip_norm"],
        beta1=s["beta1"], beta2=s["beta2"],
    )


def cmd_train(s) -> int:
    panel = load_returns(_require(s, "returns"))
    train_part, _ = split_by_date(panel, s["boundary"])
    windows = make_windows(train_part, s["window"])
    try:
        config = train_config(s)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = train(windows, config)
    path = s["model"]
    save_model(model, path)
    log_path = os.path.splitext(path)[0] + ".log"
    with open(log_path, "w", encoding="utf-8") as fh:
        for i, loss in enumerate(model.loss_history, start=1):
            fh.write(f"epoch {i} mean_loss {loss:.10f}\n")
    write_effective_config(s, os.path.join(_dirname(path), "train.effective.ini"))
    last = f", final loss {model.loss_history[-1]:.6f}" if model.loss_history else ""
    print(f"trained on {len(windows)} windows ({config.epochs} epochs{last}) -> {path}")
    return 0


def backtest_config(s, model_window) -> BacktestConfig:
    return BacktestConfig(
        window=model_window, rebalance_every=s["rebalance_every"], cov_window=s["cov_window"],
        shrinkage=s["shrinkage"], ridge_floor=s["ridge_floor"], strategies=s["strategies"],
        trading_days=s["trading_days"], risk_free_rate=s["risk_free_rate"], hist_window=s["hist_window"],
        realized_vol_window=s["realized_vol_window"],
    )


def cmd_backtest(s, explicit_window: bool) -> int:
    panel = load_returns(_require(s, "returns"))
    model = None
    window = s["window"]
    if "neural" in s["strategies"]:
        model = load_model(_require(s, "model"))
        if model.window is not None:
            if explicit_window and window != model.window:
                raise UsageError(f"--window {window} differs from the checkpoint's window {model.window}")
            window = model.window
    s = {**s, "window": window}
    try:
        config = backtest_config(s, window)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = run_backtest(model, panel, config, s["boundary"])
    out_dir = s["out_dir"]
    emit_report(report, out_dir, svg=s["svg"], export_risk=s["export_risk"])
    save_report_data(report, os.path.join(out_dir, "report.json"))
    write_effective_config(s, os.path.join(out_dir, "effective_config.ini"))
    with open(os.path.join(out_dir, "metrics.txt"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_report(s) -> int:
    out_dir = s["out_dir"]
    src = os.path.join(out_dir, "report.json")
    if not os.path.exists(src):
        raise FileNotFoundError(f"no stored report at {src}")
    report = load_report_data(src)
    emit_report(report, out_dir, svg=s["svg"], export_risk=False)
    print(f"re-rendered {len(report.strategies)} strategies into {out_dir}")
    return 0


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("NALLOC_LOG", "error").strip().lower(), logging.ERROR)
    root = logging.getLogger("nalloc")
    root.handlers[:] = []
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False


def main(argv=None) -> int:
    _setup_logging()
    ns = build_parser().parse_args(argv)
    cmd = ns.command
    try:
        s = effective_settings(cmd, ns)
        if cmd == "ingest":
            return cmd_ingest(s)
        if cmd == "synth":
            try:
                return cmd_synth(s)
            except InvalidSpec as exc:
                raise UsageError(str(exc)) from None
        if cmd == "train":
            try:
                return cmd_train(s)
            except TrainingError as exc:
                print(f"nalloc train: {exc}", file=sys.stderr)
                return EXIT_TRAIN
        if cmd == "backtest":
            try:
                return cmd_backtest(s, hasattr(ns, "window"))
            except (DataError, FileNotFoundError, UsageError):
                raise
            except (NallocError, ValueError) as exc:
                print(f"nalloc backtest: {exc}", file=sys.stderr)
                return EXIT_BACKTEST
        return cmd_report(s)
    except UsageError as exc:
        print(f"nalloc {cmd}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"nalloc {cmd}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
