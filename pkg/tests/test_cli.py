import csv
import json

import numpy as np
import pytest

from nalloc.cli import COMMAND_KEYS, main
from nalloc.forecaster import init_model, load_model

from conftest import write_csv

TICKERS = ["AAPL", "MSFT", "GOOGL", "AMZN", "TSLA", "NVDA", "META", "JPM", "V", "UNH"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def synth_returns(workdir, days=700, assets=3, ar=0.3):
    assert main(["synth", "--n-assets", str(assets), "--n-days", str(days), "--ar-coeff", str(ar),
                 "--garch-omega", "2e-6", "--seed", "3", "--out", "r.csv"]) == 0
    return workdir / "r.csv"


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.mark.parametrize("cmd", list(COMMAND_KEYS))
def test_help_documents_every_flag(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for key in COMMAND_KEYS[cmd]:
        assert "--" + key.replace("_", "-") in out
    assert "--config" in out


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as info:
        main(["backtest", "--no-such-flag"])
    assert info.value.code == 64
    assert main(["train", "--returns", "x.csv", "--epochs", "abc"]) == 64


def test_ingest_ten_tickers(workdir, capsys):
    rng = np.random.default_rng(0)
    prices = 100 * np.exp(np.cumsum(rng.normal(0, 0.01, (30, 10)), axis=0))
    rows = [[f"2021-02-{d + 1:02d}", *p] for d, p in enumerate(prices[:28])]
    write_csv(workdir / "p.csv", ["date", *TICKERS], rows)
    assert main(["ingest", "--prices", "p.csv", "--out", "ret.csv"]) == 0
    out = capsys.readouterr().out
    assert "N=10" in out and "T=28" in out
    table = out.split("Ticker", 1)[1].strip().splitlines()[1:]
    assert len(table) == 10
    assert [line.split()[0] for line in table] == TICKERS
    assert read_rows(workdir / "ret.csv")[0] == ["date", *TICKERS]
    assert len(read_rows(workdir / "ret.csv")) == 1 + 27


def test_ingest_missing_file(workdir, capsys):
    assert main(["ingest", "--prices", "missing_prices.csv"]) == 2
    assert "missing_prices.csv" in capsys.readouterr().err


def test_ingest_bad_price_exit_2(workdir, capsys):
    (workdir / "p.csv").write_text("date,A\n2020-01-02,1\n2020-01-03,0\n")
    assert main(["ingest", "--prices", "p.csv"]) == 2


def test_synth_as_prices(workdir):
    assert main(["synth", "--n-assets", "2", "--n-days", "50", "--as-prices", "--out", "p.csv"]) == 0
    rows = read_rows(workdir / "p.csv")
    assert len(rows) == 52
    assert rows[1][1:] == ["100", "100"]
    assert main(["ingest", "--prices", "p.csv", "--out", "r.csv"]) == 0


def test_synth_invalid_spec(workdir):
    assert main(["synth", "--garch-alpha", "0.6", "--garch-beta", "0.6"]) == 64


def test_train_zero_epochs(workdir):
    synth_returns(workdir, days=200)
    assert main(["train", "--returns", "r.csv", "--boundary", "2000-06-01", "--epochs", "0",
                 "--hidden-dim", "5", "--window", "8", "--seed", "11", "--model", "m.json"]) == 0
    m = load_model(workdir / "m.json")
    ref = init_model(3, 5, seed=11)
    for k in ref.params():
        np.testing.assert_array_equal(getattr(m, k), getattr(ref, k))
    assert (workdir / "m.log").read_text() == ""


def test_train_deterministic_and_learns(workdir):
    synth_returns(workdir, days=900, ar=0.4)
    args = ["train", "--returns", "r.csv", "--boundary", "2003-01-01", "--epochs", "6", "--hidden-dim", "8",
            "--window", "10", "--seed", "2"]
    assert main(args + ["--model", "a.json"]) == 0
    assert main(args + ["--model", "b.json"]) == 0
    assert (workdir / "a.json").read_bytes() == (workdir / "b.json").read_bytes()
    losses = [float(line.split()[-1]) for line in (workdir / "a.log").read_text().splitlines()]
    assert len(losses) == 6
    assert losses[-1] < losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_3(workdir):
    synth_returns(workdir, days=200)
    assert main(["train", "--returns", "r.csv", "--boundary", "2000-06-01", "--epochs", "5",
                 "--learning-rate", "1e308", "--gradient-clip-norm", "0", "--window", "5",
                 "--hidden-dim", "3"]) == 3


def _train_small(workdir):
    synth_returns(workdir, days=700)
    assert main(["train", "--returns", "r.csv", "--boundary", "2002-01-01", "--epochs", "2",
                 "--hidden-dim", "6", "--window", "10"]) == 0


def test_backtest_rows_and_determinism(workdir, capsys):
    _train_small(workdir)
    args = ["backtest", "--returns", "r.csv", "--boundary", "2002-01-01", "--hist-window", "100"]
    assert main(args + ["--out-dir", "a"]) == 0
    assert main(args + ["--out-dir", "b"]) == 0
    rows = read_rows(workdir / "a" / "metrics.csv")
    assert [r[0] for r in rows[1:]] == ["Equal Weight", "Historical MV", "Neural Portfolio"]
    assert (workdir / "a" / "metrics.csv").read_bytes() == (workdir / "b" / "metrics.csv").read_bytes()
    assert "Neural Portfolio" in capsys.readouterr().out
    assert (workdir / "a" / "report.json").exists()
    echo = (workdir / "a" / "effective_config.ini").read_text()
    assert "hist_window = 100" in echo and "window = 10" in echo


def test_backtest_neural_only(workdir):
    _train_small(workdir)
    assert main(["backtest", "--returns", "r.csv", "--boundary", "2002-01-01", "--strategies", "neural",
                 "--out-dir", "n"]) == 0
    assert len(read_rows(workdir / "n" / "metrics.csv")) == 2


def test_backtest_warmup_exit_4(workdir, capsys):
    _train_small(workdir)
    assert main(["backtest", "--returns", "r.csv", "--boundary", "2000-01-10"]) == 4
    assert "prior rows" in capsys.readouterr().err


def test_config_file_and_flag_precedence(workdir):
    _train_small(workdir)
    (workdir / "run.ini").write_text(
        "# comment\nreturns = r.csv\nboundary = 2002-01-01\nhist_window = 120\nshrinkage = 0.5\nout_dir = cfg\n")
    assert main(["backtest", "--config", "run.ini", "--shrinkage", "0.2"]) == 0
    echo = (workdir / "cfg" / "effective_config.ini").read_text()
    assert "shrinkage = 0.2" in echo
    assert "hist_window = 120" in echo
    # the echoed config is itself a valid config file
    assert main(["backtest", "--config", "cfg/effective_config.ini", "--out-dir", "cfg2"]) == 0
    assert (workdir / "cfg" / "metrics.csv").read_bytes() == (workdir / "cfg2" / "metrics.csv").read_bytes()


def test_config_unknown_key(workdir):
    (workdir / "bad.ini").write_text("nonsense = 1\n")
    assert main(["ingest", "--config", "bad.ini"]) == 64


def test_report_rerender(workdir):
    _train_small(workdir)
    assert main(["backtest", "--returns", "r.csv", "--boundary", "2002-01-01", "--hist-window", "100",
                 "--out-dir", "rep"]) == 0
    before = (workdir / "rep" / "metrics.csv").read_bytes()
    (workdir / "rep" / "metrics.csv").unlink()
    assert main(["report", "--out-dir", "rep"]) == 0
    assert (workdir / "rep" / "metrics.csv").read_bytes() == before
    doc = json.loads((workdir / "rep" / "report.json").read_text())
    assert set(doc["strategies"]) == {"equal_weight", "historical_mv", "neural"}


def test_log_env_var(workdir, monkeypatch, capsys):
    monkeypatch.setenv("NALLOC_LOG", "info")
    synth_returns(workdir, days=200)
    assert main(["train", "--returns", "r.csv", "--boundary", "2000-06-01", "--epochs", "1", "--window", "5",
                 "--hidden-dim", "3"]) == 0
    captured = capsys.readouterr()
    assert "epoch 1/1" in captured.err
    assert "epoch" not in captured.out.replace("epochs", "")
