"""
Windowed multivariate LSTM return forecaster, written directly in numpy.

A window of ``L`` lagged return rows is z-scored per asset, run through a
single-layer LSTM starting from ``h = c = 0``, and the final hidden state is
projected linearly onto the ``N`` assets. Training minimises the per-sample
loss ``mean_i (r_i - mu_i)^2`` in normalised space with hand-written
backpropagation through time, Adam moment scaling and global-norm clipping.

Gate parameters are stored stacked in the order (input, forget, output,
candidate): ``W`` is ``(4d, N)``, ``U`` is ``(4d, d)`` and ``b`` is ``(4d,)``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .errors import (
    AlignmentError,
    DimensionMismatch,
    DivergedLoss,
    EmptyDataset,
    LengthMismatch,
    TooShort,
)
from .market_data import ReturnPanel

log = logging.getLogger(__name__)

FORMAT_TAG = "nalloc-model-v1"
GATES = ("i", "f", "o", "g")
PARAM_NAMES = ("W", "U", "b", "W_mu", "b_mu")


@dataclass(frozen=True)
class Window:
    inputs: np.ndarray
    target: np.ndarray
    target_date: object = None


@dataclass(frozen=True)
class Forecast:
    date: object
    mu_hat: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 64
    hidden_dim: int = 64
    seed: int = 0
    gradient_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LstmModel:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    W_mu: np.ndarray
    b_mu: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    window: int | None = None
    config: TrainConfig | None = None
    loss_history: tuple = field(default=())

    def __post_init__(self):
        for name in PARAM_NAMES + ("norm_mean", "norm_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        d, N = self.hidden_dim, self.input_dim
        shapes = {"W": (4 * d, N), "U": (4 * d, d), "b": (4 * d,), "W_mu": (N, d), "b_mu": (N,),
                  "norm_mean": (N,), "norm_std": (N,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.norm_std <= 0):
            raise ValueError("normalization std must be > 0")

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def gate(self, tensor: str, gate: str) -> np.ndarray:
        """Slice one gate's block out of a stacked tensor, e.g. ``gate("W", "f")``."""
        k = GATES.index(gate)
        d = self.hidden_dim
        return getattr(self, tensor)[k * d:(k + 1) * d]

    def replace(self, **params) -> "LstmModel":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(params)
        return LstmModel(**kw)


def init_model(input_dim: int, hidden_dim: int, seed: int = 0, *, norm_mean=None, norm_std=None,
               window: int | None = None, config: TrainConfig | None = None) -> LstmModel:
    """Seeded initialisation: weights uniform in +-1/sqrt(d), forget-gate bias +1."""
    rng = np.random.default_rng(seed)
    d, N = hidden_dim, input_dim
    bound = 1.0 / math.sqrt(d)
    W = rng.uniform(-bound, bound, (4 * d, N))
    U = rng.uniform(-bound, bound, (4 * d, d))
    W_mu = rng.uniform(-bound, bound, (N, d))
    b = np.zeros(4 * d)
    b[d:2 * d] = 1.0
    return LstmModel(
        W, U, b, W_mu, np.zeros(N),
        np.zeros(N) if norm_mean is None else norm_mean,
        np.ones(N) if norm_std is None else norm_std,
        window=window, config=config,
    )


def make_windows(panel: ReturnPanel, L: int) -> list[Window]:
    """All ``T - L`` windows; window ``k`` has inputs rows ``k..k+L-1`` and target row ``k+L``."""
    if L < 1:
        raise ValueError("window length must be >= 1")
    T = panel.n_days
    if T < L + 1:
        raise TooShort(f"need at least L+1={L + 1} rows, got {T}")
    r = panel.returns
    return [Window(r[k:k + L], r[k + L], panel.dates[k + L]) for k in range(T - L)]


def stack_windows(windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([np.asarray(w.inputs, dtype=float) for w in windows])
    Y = np.stack([np.asarray(w.target, dtype=float) for w in windows])
    return X, Y


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(params: dict, X: np.ndarray, keep: bool = False):
    """Batched forward pass over normalised inputs ``X`` of shape (B, L, N)."""
    W, U, b = params["W"], params["U"], params["b"]
    d = U.shape[1]
    B, L, _ = X.shape
    h = np.zeros((B, d))
    c = np.zeros((B, d))
    cache = []
    for t in range(L):
        z = X[:, t] @ W.T + h @ U.T + b
        i = _sigmoid(z[:, :d])
        f = _sigmoid(z[:, d:2 * d])
        o = _sigmoid(z[:, 2 * d:3 * d])
        g = np.tanh(z[:, 3 * d:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        if keep:
            cache.append((X[:, t], h_prev, c_prev, i, f, o, g, tc))
    return h, cache


def loss_and_grad(params: dict, X: np.ndarray, Y: np.ndarray) -> tuple[float, dict]:
    """Mean-squared loss over a normalised batch and its BPTT gradient."""
    W_mu, b_mu, U = params["W_mu"], params["b_mu"], params["U"]
    d = U.shape[1]
    B, _, N = X.shape
    h, cache = _forward(params, X, keep=True)
    y = h @ W_mu.T + b_mu
    err = y - Y
    loss = float(np.mean(err * err))

    dy = 2.0 * err / (B * N)
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    grads["W_mu"] = dy.T @ h
    grads["b_mu"] = dy.sum(axis=0)
    dh = dy @ W_mu
    dc = np.zeros((B, d))
    for x_t, h_prev, c_prev, i, f, o, g, tc in reversed(cache):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                do * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ],
            axis=1,
        )
        grads["W"] += dz.T @ x_t
        grads["U"] += dz.T @ h_prev
        grads["b"] += dz.sum(axis=0)
        dh = dz @ U
        dc = dc * f
    return loss, grads


def _normalize(model: LstmModel, a: np.ndarray) -> np.ndarray:
    return (a - model.norm_mean) / model.norm_std


def _check_width(model: LstmModel, inputs: np.ndarray) -> None:
    if inputs.ndim != 2 or inputs.shape[1] != model.input_dim:
        raise DimensionMismatch(f"window has shape {inputs.shape}, model expects width {model.input_dim}")


def lstm_forward(model: LstmModel, window: Window) -> np.ndarray:
    """Final hidden state for one window."""
    x = np.asarray(window.inputs, dtype=float)
    _check_width(model, x)
    h, _ = _forward(model.params(), _normalize(model, x)[None])
    return h[0]


def predict_normalized(model: LstmModel, window: Window) -> np.ndarray:
    return model.W_mu @ lstm_forward(model, window) + model.b_mu


def predict(model: LstmModel, window: Window) -> Forecast:
    """Next-day log-return forecast in return units."""
    z = predict_normalized(model, window)
    return Forecast(window.target_date, z * model.norm_std + model.norm_mean)


def predict_batch(model: LstmModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 3 or X.shape[2] != model.input_dim:
        raise DimensionMismatch(f"batch has shape {X.shape}, model expects width {model.input_dim}")
    h, _ = _forward(model.params(), _normalize(model, X))
    return (h @ model.W_mu.T + model.b_mu) * model.norm_std + model.norm_mean


def _as_matrix(items) -> np.ndarray:
    rows = [it.mu_hat if isinstance(it, Forecast) else it for it in items]
    if not rows:
        return np.zeros((0, 0))
    return np.stack([np.asarray(r, dtype=float) for r in rows])


def mse_loss(forecasts, targets) -> float:
    """Mean over samples of ``(1/N) * ||target - forecast||^2``."""
    F = _as_matrix(forecasts)
    Y = _as_matrix(targets)
    if F.shape != Y.shape:
        raise LengthMismatch(f"forecasts {F.shape} vs targets {Y.shape}")
    if F.size == 0:
        raise LengthMismatch("no samples")
    return float(np.mean((Y - F) ** 2))


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train(windows: Sequence[Window], config: TrainConfig = TrainConfig()) -> LstmModel:
    """Fit an :class:`LstmModel` to ``windows``.

    Normalisation statistics are the per-asset mean and population std of the
    window targets (a zero std is replaced by 1). Mini-batches are drawn from a
    seeded permutation each epoch, so the result is bitwise reproducible for a
    fixed ``config.seed``. The model's ``loss_history`` holds the mean training
    loss of every epoch.

    Raises
    ------
    EmptyDataset
        If ``windows`` is empty.
    DivergedLoss
        If a batch loss becomes non-finite.
    """
    if len(windows) == 0:
        raise EmptyDataset("no training windows")
    X, Y = stack_windows(windows)
    M, L, N = X.shape
    mean = Y.mean(axis=0)
    std = Y.std(axis=0)
    std = np.where(std > 0, std, 1.0)

    model = init_model(N, config.hidden_dim, config.seed, norm_mean=mean, norm_std=std,
                       window=L, config=config)
    Xn = (X - mean) / std
    Yn = (Y - mean) / std

    params = {k: v.copy() for k, v in model.params().items()}
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng([config.seed, 1])
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.adam_eps
    step = 0
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(M)
        total = 0.0
        for start in range(0, M, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grad(params, Xn[idx], Yn[idx])
            if not math.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch + 1}")
            total += loss * len(idx)
            _clip(grads, config.gradient_clip_norm)
            step += 1
            c1 = 1.0 - b1 ** step
            c2 = 1.0 - b2 ** step
            for k, g in grads.items():
                m1[k] = b1 * m1[k] + (1.0 - b1) * g
                m2[k] = b2 * m2[k] + (1.0 - b2) * g * g
                params[k] -= lr * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + eps)
        history.append(total / M)
        log.info("epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, history[-1])
    return model.replace(**params, loss_history=tuple(history))


def prediction_metrics(forecasts: Sequence[Forecast], actuals: ReturnPanel) -> dict:
    """RMSE, MAE and directional accuracy pooled over all (date, asset) pairs.

    ``sign(0)`` counts as positive.
    """
    if len(forecasts) != actuals.n_days or any(f.date != d for f, d in zip(forecasts, actuals.dates)):
        raise AlignmentError("forecast dates do not match the actual return dates")
    F = _as_matrix(forecasts)
    R = np.asarray(actuals.returns)
    if F.shape != R.shape:
        raise AlignmentError(f"forecast matrix {F.shape} vs actuals {R.shape}")
    e = F - R
    return {
        "rmse": float(np.sqrt(np.mean(e * e))),
        "mae": float(np.mean(np.abs(e))),
        "directional_accuracy": float(np.mean((F >= 0) == (R >= 0))),
    }


def _tensor(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in np.ravel(a, order="C")]}


def _untensor(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=float).reshape(obj["shape"])


def save_model(model: LstmModel, path) -> None:
    """Write a ``nalloc-model-v1`` JSON checkpoint (row-major tensors, one per gate)."""
    tensors = {}
    for tensor in ("W", "U", "b"):
        for g in GATES:
            tensors[f"{tensor}_{g}"] = _tensor(model.gate(tensor, g))
    tensors["W_mu"] = _tensor(model.W_mu)
    tensors["b_mu"] = _tensor(model.b_mu)
    doc = {
        "format": FORMAT_TAG,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "window": model.window,
        "params": tensors,
        "normalization": {"mean": _tensor(model.norm_mean), "std": _tensor(model.norm_std)},
        "config": asdict(model.config) if model.config is not None else None,
        "loss_history": [float(v) for v in model.loss_history],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> LstmModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT_TAG:
        raise ValueError(f"{path}: not a {FORMAT_TAG} checkpoint")
    p = doc["params"]
    stacked = {t: np.concatenate([_untensor(p[f"{t}_{g}"]) for g in GATES]) for t in ("W", "U", "b")}
    cfg = doc.get("config")
    return LstmModel(
        stacked["W"], stacked["U"], stacked["b"], _untensor(p["W_mu"]), _untensor(p["b_mu"]),
        _untensor(doc["normalization"]["mean"]), _untensor(doc["normalization"]["std"]),
        window=doc.get("window"),
        config=TrainConfig(**cfg) if cfg else None,
        loss_history=tuple(doc.get("loss_history", ())),
    )
