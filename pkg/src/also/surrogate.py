"""Trainable value network and replay buffer.

All parameters live in one flat float64 vector ``theta``; layers are views
into it. Gradients are hand-derived and checked against central finite
differences by :func:`gradient_check`.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import (
    DimensionMismatch,
    EmptyBuffer,
    InvalidConfig,
    InvalidEpsilon,
    InvalidReward,
    NumericError,
)

ARCHITECTURES = ("linear", "mlp1", "mlp2_preln")
ACTIVATIONS = ("gelu", "relu")
LN_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class NetworkConfig:
    architecture: str = "mlp1"
    hidden: int = 512
    activation: str = "gelu"
    input_dim: int = 128
    init_seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise InvalidConfig(f"unknown architecture {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if self.hidden < 1 or self.input_dim < 1:
            raise InvalidConfig("hidden and input_dim must be >= 1")


def _layout(config: NetworkConfig):
    """Ordered (name, shape, decayed) triples describing theta."""
    d, h = config.input_dim, config.hidden
    if config.architecture == "linear":
        return [("w", (d,), True), ("b", (), False)]
    if config.architecture == "mlp1":
        return [
            ("W1", (h, d), True),
            ("b1", (h,), False),
            ("w2", (h,), True),
            ("b2", (), False),
        ]
    return [
        ("ln0_g", (d,), False),
        ("ln0_b", (d,), False),
        ("W1", (h, d), True),
        ("b1", (h,), False),
        ("ln1_g", (h,), False),
        ("ln1_b", (h,), False),
        ("W2", (h, h), True),
        ("b2", (h,), False),
        ("w3", (h,), True),
        ("b3", (), False),
    ]


def parameter_count(config: NetworkConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _layout(config))


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z * 0.5 * (1.0 + erf(z * _INV_SQRT2))


def _act_grad(z, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    return cdf + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)


def _ln_forward(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dg, db


class ValueNetwork:
    def __init__(self, config: NetworkConfig, theta: np.ndarray, step_count: int = 0):
        self.config = config
        self.theta = np.ascontiguousarray(theta, dtype=np.float64)
        if self.theta.shape != (parameter_count(config),):
            raise DimensionMismatch(
                f"theta has {self.theta.size} entries, architecture needs "
                f"{parameter_count(config)}"
            )
        self.step_count = step_count
        self._bind()

    def _bind(self):
        self.params = {}
        mask = np.zeros_like(self.theta)
        offset = 0
        for name, shape, decayed in _layout(self.config):
            size = int(np.prod(shape))
            view = self.theta[offset : offset + size]
            self.params[name] = view.reshape(shape) if shape else view
            if decayed:
                mask[offset : offset + size] = 1.0
            offset += size
        self.decay_mask = mask

    @property
    def n_params(self) -> int:
        return self.theta.size

    def copy(self) -> "ValueNetwork":
        return ValueNetwork(self.config, self.theta.copy(), self.step_count)

    # forward / backward over a batch of rows ---------------------------------

    def _forward(self, X):
        p, cfg = self.params, self.config
        if cfg.architecture == "linear":
            return X @ p["w"] + p["b"][0], (X,)
        if cfg.architecture == "mlp1":
            z1 = X @ p["W1"].T + p["b1"]
            a1 = _act(z1, cfg.activation)
            return a1 @ p["w2"] + p["b2"][0], (X, z1, a1)
        h0, ln0 = _ln_forward(X, p["ln0_g"], p["ln0_b"])
        z1 = h0 @ p["W1"].T + p["b1"]
        a1 = _act(z1, cfg.activation)
        h1, ln1 = _ln_forward(a1, p["ln1_g"], p["ln1_b"])
        z2 = h1 @ p["W2"].T + p["b2"]
        a2 = _act(z2, cfg.activation)
        return a2 @ p["w3"] + p["b3"][0], (h0, ln0, z1, a1, h1, ln1, z2, a2)

    def _backward(self, cache, dout):
        """Gradient of sum_i dout_i * f(x_i) with respect to theta."""
        p, cfg = self.params, self.config
        grads = {}
        if cfg.architecture == "linear":
            (X,) = cache
            grads["w"] = X.T @ dout
            grads["b"] = np.array([dout.sum()])
        elif cfg.architecture == "mlp1":
            X, z1, a1 = cache
            grads["w2"] = a1.T @ dout
            grads["b2"] = np.array([dout.sum()])
            dz1 = np.outer(dout, p["w2"]) * _act_grad(z1, cfg.activation)
            grads["W1"] = dz1.T @ X
            grads["b1"] = dz1.sum(axis=0)
        else:
            h0, ln0, z1, a1, h1, ln1, z2, a2 = cache
            grads["w3"] = a2.T @ dout
            grads["b3"] = np.array([dout.sum()])
            dz2 = np.outer(dout, p["w3"]) * _act_grad(z2, cfg.activation)
            grads["W2"] = dz2.T @ h1
            grads["b2"] = dz2.sum(axis=0)
            da1, grads["ln1_g"], grads["ln1_b"] = _ln_backward(dz2 @ p["W2"], p["ln1_g"], ln1)
            dz1 = da1 * _act_grad(z1, cfg.activation)
            grads["W1"] = dz1.T @ h0
            grads["b1"] = dz1.sum(axis=0)
            _, grads["ln0_g"], grads["ln0_b"] = _ln_backward(dz1 @ p["W1"], p["ln0_g"], ln0)
        return np.concatenate([np.ravel(grads[name]) for name, _, _ in _layout(cfg)])

    def _check_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.config.input_dim:
            raise DimensionMismatch(
                f"feature dim {X.shape[-1]} != network input_dim {self.config.input_dim}"
            )
        return X

    def forward(self, X):
        return self._forward(self._check_input(X))[0]

    def loss_and_grad(self, X, y):
        """Mean squared error over the batch and its gradient."""
        X = self._check_input(X)
        out, cache = self._forward(X)
        err = out - y
        loss = float(np.mean(err * err))
        return loss, self._backward(cache, 2.0 * err / len(y))

    def output_gradients(self, X) -> np.ndarray:
        """Per-row gradient of f(x) with respect to theta, shape (n, P)."""
        X = self._check_input(X)
        rows = []
        for i in range(X.shape[0]):
            _, cache = self._forward(X[i : i + 1])
            rows.append(self._backward(cache, np.ones(1)))
        return np.vstack(rows)


def init_network(config: NetworkConfig) -> ValueNetwork:
    rng = np.random.default_rng(config.init_seed)
    net = ValueNetwork(config, np.zeros(parameter_count(config)))
    for name, shape, _ in _layout(config):
        view = net.params[name]
        if name.startswith("ln") and name.endswith("_g"):
            view[...] = 1.0
        elif name.startswith(("w", "W")):
            fan_in = shape[-1] if len(shape) == 2 else shape[0]
            view[...] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
    return net


def predict(net: ValueNetwork, features) -> np.ndarray:
    out = net.forward(features)
    if not np.all(np.isfinite(out)):
        raise NumericError("surrogate produced a non-finite prediction")
    return out


class ReplayBuffer:
    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise InvalidConfig("buffer capacity must be >= 1")
        self.capacity = capacity
        self._x = deque(maxlen=capacity)
        self._r = deque(maxlen=capacity)
        self._arrays = None

    def __len__(self):
        return len(self._r)

    @property
    def samples(self):
        return list(zip(self._x, self._r))

    def push(self, x, r: float):
        r = float(r)
        if not (0.0 <= r <= 1.0):
            raise InvalidReward(f"reward {r!r} outside [0, 1]")
        x = np.array(x, dtype=np.float64)
        if self._x and x.shape != self._x[0].shape:
            raise DimensionMismatch("sample dim differs from buffer contents")
        self._x.append(x)
        self._r.append(r)
        self._arrays = None

    def arrays(self):
        if self._arrays is None:
            self._arrays = (np.vstack(self._x), np.asarray(self._r, dtype=np.float64))
        return self._arrays


def push_sample(buffer: ReplayBuffer, x, r: float) -> None:
    buffer.push(x, r)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.001
    batch_size: int = 8
    max_epochs: int = 100
    early_stop_patience: int = 5
    early_stop_tol: float = 1e-5

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidConfig("lr must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise InvalidConfig("batch_size, max_epochs, early_stop_patience must be >= 1")


def weight_decay(n: int) -> float:
    return min(0.01, 0.01 / n)


@dataclass
class TrainReport:
    epochs_run: int
    initial_mse: float
    final_mse: float
    stopped_early: bool
    weight_decay: float
    steps: int = 0


def mse(net: ValueNetwork, X, y) -> float:
    err = net.forward(X) - y
    return float(np.mean(err * err))


def train_step(net: ValueNetwork, buffer: ReplayBuffer, hyper: TrainHyper, rng) -> TrainReport:
    """Minibatch gradient descent on the buffer, updating ``net`` in place."""
    if len(buffer) == 0:
        raise EmptyBuffer("cannot train on an empty replay buffer")
    X, y = buffer.arrays()
    n = len(y)
    wd = weight_decay(n)
    decay = hyper.lr * wd * net.decay_mask
    initial = prev = mse(net, X, y)
    stall = 0
    stopped = False
    steps = 0
    epoch = 0
    for epoch in range(1, hyper.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            _, grad = net.loss_and_grad(X[idx], y[idx])
            net.theta -= hyper.lr * grad + decay * net.theta
            net.step_count += 1
            steps += 1
        cur = mse(net, X, y)
        if not math.isfinite(cur):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        stall = stall + 1 if prev - cur < hyper.early_stop_tol else 0
        prev = cur
        if stall >= hyper.early_stop_patience:
            stopped = True
            break
    return TrainReport(
        epochs_run=epoch,
        initial_mse=initial,
        final_mse=prev,
        stopped_early=stopped,
        weight_decay=wd,
        steps=steps,
    )


@dataclass
class CheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def gradient_check(net: ValueNetwork, x, eps: float = 1e-5, tol: float = 1e-4,
                   target: float = 0.0, floor: float = 1e-6) -> CheckReport:
    """Compare backprop against central differences on (f(x) - target)^2."""
    if not eps > 0:
        raise InvalidEpsilon(f"eps must be > 0, got {eps!r}")
    X = net._check_input(x)[:1]
    y = np.array([target], dtype=np.float64)
    _, analytic = net.loss_and_grad(X, y)
    probe = net.copy()
    numeric = np.empty_like(analytic)
    for i in range(probe.n_params):
        orig = probe.theta[i]
        probe.theta[i] = orig + eps
        up = mse(probe, X, y)
        probe.theta[i] = orig - eps
        down = mse(probe, X, y)
        probe.theta[i] = orig
        numeric[i] = (up - down) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = float(np.max(np.abs(analytic - numeric) / denom))
    return CheckReport(max_rel_error=rel, passed=rel <= tol, analytic=analytic, numeric=numeric)
