"""Arm-selection policies.

ALSO keeps decayed scores ``S`` fed by surrogate predictions and samples
from ``softmax(eta * S)``. Baselines: epsilon-greedy over predictions,
classical EXP3 with importance-weighted reward estimates, and NeuralUCB with
a diagonal gradient covariance.

Ties are broken toward the lowest arm index everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, InvalidDistribution, InvalidEpsilon, NumericError


def _finite_vector(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be a 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


@dataclass(frozen=True)
class AlsoState:
    scores: np.ndarray
    eta: float = 10.0
    lam: float = 0.9
    gamma: float = 0.0

    def __post_init__(self):
        _finite_vector(self.scores, "scores")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")

    @classmethod
    def initial(cls, K: int, eta=10.0, lam=0.9, gamma=0.0) -> "AlsoState":
        return cls(np.zeros(K), eta, lam, gamma)

    @property
    def K(self) -> int:
        return len(self.scores)

    def extended(self, extra: int = 1) -> "AlsoState":
        """State for a pool grown by ``extra`` arms; new arms start at 0."""
        return replace(self, scores=np.concatenate([self.scores, np.zeros(extra)]))


def smooth_scores(state: AlsoState, predictions) -> AlsoState:
    v = _finite_vector(predictions, "predictions")
    if v.shape != state.scores.shape:
        raise DimensionMismatch(f"expected {state.K} predictions, got {v.shape[0]}")
    return replace(state, scores=state.lam * state.scores + v)


def exp_weights(scores, eta: float, gamma: float = 0.0) -> np.ndarray:
    """``(1 - gamma) * softmax(eta * scores) + gamma / K``."""
    s = _finite_vector(scores, "scores")
    pi = softmax(eta * s)
    if gamma > 0:
        pi = (1.0 - gamma) * pi + gamma / len(s)
    return pi


def selection_distribution(state: AlsoState) -> np.ndarray:
    return exp_weights(state.scores, state.eta, state.gamma)


def sample_arm(pi, rng) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from ``rng``."""
    p = np.asarray(pi, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidDistribution("pi must be a non-empty, non-negative finite vector")
    total = p.sum()
    if abs(total - 1.0) > 1e-6:
        raise InvalidDistribution(f"pi sums to {total}, not 1")
    cdf = np.cumsum(p) / total
    u = rng.random()
    k = int(np.searchsorted(cdf, u, side="right"))
    if k >= len(p):
        k = int(np.flatnonzero(p)[-1])
    return k


def greedy_arm(values) -> int:
    return int(np.argmax(np.asarray(values)))


def epsilon_greedy_distribution(predictions, epsilon: float) -> np.ndarray:
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidEpsilon(f"epsilon must lie in [0, 1], got {epsilon}")
    v = _finite_vector(predictions, "predictions")
    pi = np.full(len(v), epsilon / len(v))
    pi[greedy_arm(v)] += 1.0 - epsilon
    return pi


def select_epsilon_greedy(predictions, epsilon: float, rng) -> int:
    """Explore with probability epsilon (one uniform draw plus one index draw)."""
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidEpsilon(f"epsilon must lie in [0, 1], got {epsilon}")
    v = _finite_vector(predictions, "predictions")
    if len(v) < 1:
        raise DimensionMismatch("need at least one arm")
    explore = rng.random() < epsilon
    k = int(rng.integers(len(v)))
    return k if explore else greedy_arm(v)


@dataclass(frozen=True)
class Exp3State:
    cum_estimates: np.ndarray
    gamma: float = 0.05
    eta: float = 0.1

    def __post_init__(self):
        _finite_vector(self.cum_estimates, "cum_estimates")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")

    @classmethod
    def initial(cls, K: int, gamma=0.05, eta=0.1) -> "Exp3State":
        return cls(np.zeros(K), gamma, eta)


def exp3_distribution(state: Exp3State) -> np.ndarray:
    return exp_weights(state.cum_estimates, state.eta, state.gamma)


def select_exp3(state: Exp3State, rng):
    pi = exp3_distribution(state)
    return sample_arm(pi, rng), pi


def update_exp3(state: Exp3State, arm: int, reward: float, prob: float) -> Exp3State:
    """Add the importance-weighted estimate ``reward / prob`` to the pulled arm."""
    if not prob > 0:
        raise InvalidDistribution("probability of the pulled arm must be > 0")
    est = state.cum_estimates.copy()
    est[arm] += reward / prob
    return replace(state, cum_estimates=est)


@dataclass(frozen=True)
class NeuralUcbState:
    grad_cov_diag: np.ndarray
    lambda_reg: float = 0.1
    nu: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.grad_cov_diag) <= 0):
            raise ValueError("gradient covariance diagonal must be positive")

    @classmethod
    def initial(cls, n_params: int, lambda_reg=0.1, nu=1.0) -> "NeuralUcbState":
        return cls(np.full(n_params, float(lambda_reg)), lambda_reg, nu)


def ucb_scores(mean, grads, state: NeuralUcbState) -> np.ndarray:
    """mean + nu * sqrt(sum_i lambda * g_i^2 / U_i), one entry per arm."""
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    if grads.shape[1] != state.grad_cov_diag.shape[0]:
        raise DimensionMismatch(
            f"gradient length {grads.shape[1]} != covariance length "
            f"{state.grad_cov_diag.shape[0]}"
        )
    bonus = np.sqrt(state.lambda_reg * (grads * grads / state.grad_cov_diag).sum(axis=1))
    return np.asarray(mean, dtype=np.float64) + state.nu * bonus


def select_neural_ucb(net, features, state: NeuralUcbState):
    """Return (arm, ucb scores, per-arm output gradients); state is untouched."""
    mean = net.forward(features)
    grads = net.output_gradients(features)
    scores = ucb_scores(mean, grads, state)
    return greedy_arm(scores), scores, grads


def update_neural_ucb(state: NeuralUcbState, grad) -> NeuralUcbState:
    g = np.asarray(grad, dtype=np.float64)
    return replace(state, grad_cov_diag=state.grad_cov_diag + g * g)
