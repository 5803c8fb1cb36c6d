"""Named experiment configurations used by the acceptance suite and the CLI.

The "desk" surrogate settings trade the full-scale network (hidden 512,
lr 0.001, 100 epochs) for a size that finishes 20-seed sweeps in minutes on
one CPU core. Selector constants (eta=10, lambda=0.9) stay at their defaults.
"""

from __future__ import annotations

from .harness import RunConfig

DESK = dict(
    method="also",
    hidden=32,
    context_window=1,
    buffer_capacity=256,
    train={"lr": 0.1, "max_epochs": 1},
    gamma=0.05,
    ucb_hidden=32,
)

SEEDS_20 = tuple(range(20))

TRANSFER_STRUCTURE_SEED = 7


def _desk(**changes) -> RunConfig:
    params = {**DESK, **changes}
    return RunConfig(**params)


def abrupt_switch(turns: int = 1000, seeds=SEEDS_20) -> RunConfig:
    """Full ALSO against the no-smoothing ablation under a hidden switch schedule."""
    return _desk(
        env={"kind": "abrupt_switch", "K": 12, "switch_period": 50, "turns_per_episode": turns},
        seeds=seeds,
        variants=(
            {"name": "full"},
            {"name": "no_smoothing", "ablation_flags": ("no_smoothing",)},
        ),
    )


def context_drift(turns: int = 1000, seeds=SEEDS_20) -> RunConfig:
    """Drifting rewards whose best arm is set by a regime announced in context."""
    return _desk(
        env={"kind": "drifting", "K": 12, "context_regimes": 4, "regime_dwell": 50,
             "turns_per_episode": turns},
        seeds=seeds,
        variants=(
            {"name": "full"},
            {"name": "no_surrogate", "ablation_flags": ("no_surrogate",)},
        ),
    )


def adversary(turns: int = 1000, seeds=SEEDS_20) -> RunConfig:
    """Best-response opponent that penalizes the agent's modal recent arm."""
    return _desk(
        env={"kind": "adaptive_adversary", "K": 12, "adversary_memory": 5,
             "turns_per_episode": turns},
        seeds=seeds,
        variants=(
            {"name": "also"},
            {"name": "epsilon_greedy", "method": "epsilon_greedy", "epsilon": 0.1},
        ),
    )


STATIONARY_ENV = {"kind": "stationary", "K": 12, "emission": "bernoulli",
                  "mean_range": (0.1, 0.5), "best_mean": 0.9}


def stationary(turns: int = 1000, seeds=SEEDS_20) -> RunConfig:
    """Bernoulli-emission bandit; EXP3 runs at its library defaults."""
    return _desk(
        env={**STATIONARY_ENV, "turns_per_episode": turns},
        seeds=seeds,
        variants=({"name": "also"}, {"name": "exp3", "method": "exp3"}),
    )


def transfer_train(turns: int = 500) -> RunConfig:
    """Family A: training scenarios sharing one arm-value landscape."""
    return _desk(env={"kind": "drifting", "K": 12, "context_regimes": 4, "regime_dwell": 50,
                      "structure_seed": TRANSFER_STRUCTURE_SEED, "turns_per_episode": turns})


def transfer_eval(turns: int = 200, seeds=SEEDS_20) -> RunConfig:
    """Family B: held-out instances with faster regime changes and wider drift."""
    return _desk(
        env={"kind": "drifting", "K": 12, "context_regimes": 4, "regime_dwell": 30,
             "drift_variance_range": (0.008, 0.02), "structure_seed": TRANSFER_STRUCTURE_SEED,
             "turns_per_episode": turns, "seed": 1},
        seeds=seeds,
    )


TRANSFER_TRAIN_SEEDS = (100, 101, 102, 103)

PRESETS = {
    "abrupt-switch": abrupt_switch,
    "context-drift": context_drift,
    "adversary": adversary,
    "stationary": stationary,
}


def baselines(turns: int = 200, seeds=SEEDS_20, env=None) -> RunConfig:
    """Every method on one environment."""
    return _desk(
        env=env or {"kind": "drifting", "K": 12, "context_regimes": 4, "turns_per_episode": turns},
        seeds=seeds,
        variants=tuple({"name": m, "method": m} for m in
                       ("also", "epsilon_greedy", "exp3", "neural_ucb", "vanilla")),
    )


PRESETS["baselines"] = baselines
