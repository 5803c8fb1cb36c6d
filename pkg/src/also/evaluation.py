"""Metrics over episode traces and per-episode call budgets."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .environment import DIM_NAMES, TurnRecord
from .errors import DimensionMismatch, UnknownMethod

BUDGET_METHODS = ("vanilla", "instinct", "also", "opro", "evoprompt")
OPTIMIZER_INTERVAL = 5
EVOPROMPT_POPULATION = 5


@dataclass
class EpisodeLog:
    scenario_id: str
    agent_id: str
    method: str
    seed: int
    records: list = field(default_factory=list)
    predictions: list = field(default_factory=list)  # T rows of K
    pi: list = field(default_factory=list)  # T rows of K
    selected_arms: list = field(default_factory=list)
    counterfactual: list | None = field(default_factory=list)  # T rows of K
    latent_means: list | None = field(default_factory=list)
    agent_calls: int = 0
    evaluator_calls: int = 0
    optimizer_calls: int = 0
    embedding_calls: int = 0
    incomplete: bool = False
    error: str | None = None
    partner: "EpisodeLog | None" = None

    @property
    def T(self) -> int:
        return len(self.records)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records], dtype=np.float64)

    def validate(self):
        T = self.T
        for name in ("predictions", "pi", "selected_arms"):
            if len(getattr(self, name)) != T:
                raise DimensionMismatch(f"{name} has {len(getattr(self, name))} rows, expected {T}")
        for row in self.pi:
            if abs(sum(row) - 1.0) > 1e-9:
                raise DimensionMismatch("a pi row does not sum to 1")

    def counterfactual_matrix(self):
        if not self.counterfactual or len(self.counterfactual) != self.T:
            return None
        return np.asarray(self.counterfactual, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "agent_id": self.agent_id,
            "method": self.method,
            "seed": self.seed,
            "records": [r.to_dict() for r in self.records],
            "predictions": [list(map(float, row)) for row in self.predictions],
            "pi": [list(map(float, row)) for row in self.pi],
            "selected_arms": list(map(int, self.selected_arms)),
            "counterfactual": None if self.counterfactual is None
            else [list(map(float, row)) for row in self.counterfactual],
            "latent_means": None if self.latent_means is None
            else [list(map(float, row)) for row in self.latent_means],
            "agent_calls": self.agent_calls,
            "evaluator_calls": self.evaluator_calls,
            "optimizer_calls": self.optimizer_calls,
            "embedding_calls": self.embedding_calls,
            "incomplete": self.incomplete,
            "error": self.error,
            "partner": None if self.partner is None else self.partner.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeLog":
        d = dict(d)
        d["records"] = [
            TurnRecord(**{**r, "raw_dims": tuple(r["raw_dims"])}) for r in d["records"]
        ]
        if d.get("partner") is not None:
            d["partner"] = cls.from_dict(d["partner"])
        return cls(**d)


def pseudo_regret(per_arm_rewards, selected) -> float:
    """Best fixed arm's total minus the played sequence's total."""
    R = np.asarray(per_arm_rewards, dtype=np.float64)
    sel = np.asarray(selected, dtype=np.int64)
    if R.ndim != 2 or sel.ndim != 1 or R.shape[0] != sel.shape[0]:
        raise DimensionMismatch(
            f"reward matrix {R.shape} does not match {sel.shape[0]} selections"
        )
    if sel.size and (sel.min() < 0 or sel.max() >= R.shape[1]):
        raise DimensionMismatch("selected arm index out of range")
    if not np.all(np.isfinite(R)):
        raise DimensionMismatch("reward matrix must be finite")
    # correctly rounded sums so fixed-arm play of the best arm gives exactly 0
    played = math.fsum(R[np.arange(len(sel)), sel])
    return float(max(math.fsum(R[:, k]) for k in range(R.shape[1])) - played)


def regret_curve(per_arm_rewards, selected) -> np.ndarray:
    """Pseudo-regret of every prefix; entry t covers turns 1..t+1."""
    R = np.asarray(per_arm_rewards, dtype=np.float64)
    sel = np.asarray(selected, dtype=np.int64)
    if R.shape[0] != sel.shape[0]:
        raise DimensionMismatch("reward matrix and selections differ in length")
    best = np.cumsum(R, axis=0).max(axis=1)
    played = np.cumsum(R[np.arange(len(sel)), sel])
    return best - played


@dataclass(frozen=True)
class BudgetReport:
    method: str
    T: int
    agent_calls: int
    evaluator_calls: int
    optimizer_calls: int

    def as_tuple(self):
        return (self.agent_calls, self.evaluator_calls, self.optimizer_calls)


def budget_report(method: str, T: int) -> BudgetReport:
    if method not in BUDGET_METHODS:
        raise UnknownMethod(f"no budget formula for method {method!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    rounds = -(-T // OPTIMIZER_INTERVAL)
    optimizer = {"opro": rounds, "evoprompt": EVOPROMPT_POPULATION * rounds}.get(method, 0)
    return BudgetReport(method, T, 2 * T, T, optimizer)


def count_budget_calls(method: str, T: int) -> BudgetReport:
    """Tally calls by walking the turn loop of a two-agent episode.

    Prompt optimizers fire at the start of every ``OPTIMIZER_INTERVAL``-turn
    block; EvoPrompt regenerates its whole population each time.
    """
    if method not in BUDGET_METHODS:
        raise UnknownMethod(f"no call schedule for method {method!r}")
    agent = evaluator = optimizer = 0
    for t in range(1, T + 1):
        if (t - 1) % OPTIMIZER_INTERVAL == 0:
            if method == "opro":
                optimizer += 1
            elif method == "evoprompt":
                optimizer += EVOPROMPT_POPULATION
        agent += 2  # both agents speak once
        evaluator += 1
    return BudgetReport(method, T, agent, evaluator, optimizer)


def budget_method_for(run_method: str) -> str:
    return {"neural_ucb": "instinct", "also": "also", "vanilla": "vanilla"}.get(run_method, "also")


def drift_stats(logs) -> dict:
    """Per-arm mean and unbiased variance of realized reward.

    Arms observed fewer than twice are left out.
    """
    if isinstance(logs, EpisodeLog):
        logs = [logs]
    by_arm = {}
    for log in logs:
        for rec in log.records:
            by_arm.setdefault(rec.agent_arm, []).append(rec.reward)
    out = {}
    for arm in sorted(by_arm):
        vals = np.asarray(by_arm[arm], dtype=np.float64)
        if len(vals) < 2:
            continue
        out[arm] = {"mean": float(vals.mean()), "variance": float(vals.var(ddof=1)), "n": len(vals)}
    return out


def mean_se(values):
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) == 0:
        return float("nan"), float("nan")
    if len(vals) == 1:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def episode_summary(log: EpisodeLog) -> dict:
    rewards = log.rewards
    raw = np.array([r.raw_dims for r in log.records]) if log.records else np.zeros((0, 7))
    R = log.counterfactual_matrix()
    return {
        "turns": log.T,
        "mean_reward": float(rewards.mean()) if len(rewards) else float("nan"),
        "cumulative_reward": float(rewards.sum()),
        "pseudo_regret": None if R is None else pseudo_regret(R, log.selected_arms),
        "dimension_means": {
            name: float(raw[:, i].mean()) if len(raw) else float("nan")
            for i, name in enumerate(DIM_NAMES)
        },
        "incomplete": log.incomplete,
    }


CSV_FIELDS = ("episode", "turn", "method", "arm", "reward", "regret_so_far")


def episode_csv_rows(log: EpisodeLog, episode: str):
    R = log.counterfactual_matrix()
    regret = regret_curve(R, log.selected_arms) if R is not None else None
    for i, rec in enumerate(log.records):
        row = [
            episode,
            rec.turn,
            log.method,
            rec.agent_arm,
            repr(float(rec.reward)),
            "" if regret is None else repr(float(regret[i])),
        ]
        row.extend(repr(float(p)) for p in log.pi[i])
        yield row


def write_csv(logs_by_episode, fp) -> None:
    """One row per turn; ``logs_by_episode`` yields (episode_name, log)."""
    items = list(logs_by_episode)
    K = max((len(log.pi[0]) for _, log in items if log.pi), default=0)
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(list(CSV_FIELDS) + [f"pi_{k}" for k in range(K)])
    for name, log in items:
        for row in episode_csv_rows(log, name):
            writer.writerow(row)


def csv_text(logs_by_episode) -> str:
    buf = io.StringIO()
    write_csv(logs_by_episode, buf)
    return buf.getvalue()
