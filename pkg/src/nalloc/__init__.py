"""Joint return/risk portfolio construction: LSTM forecasts, rolling risk, max-Sharpe allocation."""

__version__ = "0.1.0"
