"""Episode and experiment runner.

Per turn (``method="also"``): encode the history into a context vector,
predict every arm's value, sample an arm from the exponential weights over
the decayed scores, step the environment with the augmented persona, train
the surrogate on the replay buffer, then fold this turn's predictions into
the scores.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .environment import EnvConfig, create_environment
from .errors import AlsoError, CheckpointError, InvalidConfig
from .evaluation import (
    EpisodeLog,
    budget_method_for,
    budget_report,
    csv_text,
    episode_summary,
    mean_se,
)
from .featurizer import (
    EmbeddingProvider,
    build_features,
    encode_context,
    precompute_arm_embeddings,
)
from .selector import (
    AlsoState,
    Exp3State,
    NeuralUcbState,
    epsilon_greedy_distribution,
    exp3_distribution,
    exp_weights,
    sample_arm,
    select_epsilon_greedy,
    select_neural_ucb,
    selection_distribution,
    smooth_scores,
    update_exp3,
    update_neural_ucb,
)
from .strategy_space import DEFAULT_PERSONA, Persona, augment_persona, load_pool
from .surrogate import (
    NetworkConfig,
    ReplayBuffer,
    TrainHyper,
    ValueNetwork,
    init_network,
    predict,
    train_step,
)

METHODS = ("also", "epsilon_greedy", "exp3", "neural_ucb", "vanilla")
ABLATIONS = ("no_smoothing", "no_context", "no_surrogate", "epsilon_greedy_selector")
OUTPUT_ENV_VAR = "ALSO_OUTPUT_DIR"

# Table-3 style component ablation matrix: name -> (method, flags)
ABLATION_MATRIX = {
    "full": ("also", ()),
    "wo_exp3": ("also", ("epsilon_greedy_selector",)),
    "wo_smoothing": ("also", ("no_smoothing",)),
    "wo_context": ("also", ("no_context",)),
    "wo_surrogate": ("also", ("no_surrogate",)),
}


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    pool_path: str | None = None
    persona: str = DEFAULT_PERSONA.text
    method: str = "also"
    bilateral: bool = False
    partner_seed: int | None = None
    ablation_flags: tuple = ()
    # surrogate
    architecture: str = "mlp1"
    hidden: int = 512
    activation: str = "gelu"
    train: TrainHyper = field(default_factory=TrainHyper)
    buffer_capacity: int | None = None
    update_interval: int = 1
    init_checkpoint: str | None = None
    freeze_surrogate: bool = False
    # featurizer
    embedding_kind: str = "synthetic"
    embedding_dim: int = 64
    embedding_seed: int = 0
    embedding_endpoint: str | None = None
    context_window: int | None = None
    # selectors
    eta: float = 10.0
    lam: float = 0.9
    gamma: float = 0.0
    epsilon: float = 0.1
    exp3_eta: float = 0.1
    exp3_gamma: float = 0.05
    nu: float = 1.0
    lambda_reg: float = 0.1
    ucb_hidden: int = 128
    ucb_activation: str = "relu"
    round_length: int = 1
    # experiment
    seeds: tuple = (0,)
    variants: tuple = ()
    scenario_id: str = "sim"
    output_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig(**self.env)
        if isinstance(self.train, dict):
            self.train = TrainHyper(**self.train)
        self.ablation_flags = tuple(self.ablation_flags)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.variants = tuple(dict(v) for v in self.variants)
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise InvalidConfig(f"unknown method {self.method!r}")
        unknown = set(self.ablation_flags) - set(ABLATIONS)
        if unknown:
            raise InvalidConfig(f"unknown ablation flags {sorted(unknown)}")
        if self.ablation_flags and self.method != "also":
            raise InvalidConfig("ablation flags apply to method='also' only")
        if self.round_length < 1 or self.update_interval < 1:
            raise InvalidConfig("round_length and update_interval must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidConfig("epsilon must lie in [0, 1]")
        if not (self.eta > 0 and self.exp3_eta > 0):
            raise InvalidConfig("eta must be > 0")
        if not 0.0 < self.lam <= 1.0:
            raise InvalidConfig("lambda must lie in (0, 1]")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.exp3_gamma <= 1.0):
            raise InvalidConfig("gamma must lie in [0, 1]")
        if self.nu < 0 or self.lambda_reg <= 0:
            raise InvalidConfig("nu must be >= 0 and lambda_reg > 0")
        if self.embedding_kind == "remote" and not self.embedding_endpoint:
            raise InvalidConfig("remote embeddings need embedding_endpoint")
        if not self.seeds:
            raise InvalidConfig("at least one seed is required")
        if self.embedding_dim < 1:
            raise InvalidConfig("embedding_dim must be >= 1")

    @property
    def input_dim(self) -> int:
        return 2 * self.embedding_dim

    def replace(self, **changes) -> "RunConfig":
        env_changes = changes.pop("env", None)
        cfg = dataclasses.replace(self, **changes)
        if env_changes:
            if isinstance(env_changes, EnvConfig):
                cfg.env = env_changes
            else:
                cfg.env = dataclasses.replace(self.env, **env_changes)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["env"] = self.env.to_dict()
        d["train"] = dataclasses.asdict(self.train)
        d["ablation_flags"] = list(self.ablation_flags)
        d["seeds"] = list(self.seeds)
        d["variants"] = [dict(v) for v in self.variants]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from None
    return RunConfig.from_dict(data)


# -- agent state & checkpoints -------------------------------------------------


@dataclass
class AgentState:
    net: ValueNetwork
    buffer: ReplayBuffer
    scores: np.ndarray | None = None


CHECKPOINT_MAGIC = b"ALSOCKPT\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(state: AgentState, path) -> None:
    """Magic, u32 header length, JSON header, then a little-endian float64 payload."""
    X, r = state.buffer.arrays() if len(state.buffer) else (np.zeros((0, 0)), np.zeros(0))
    scores = np.zeros(0) if state.scores is None else np.asarray(state.scores, dtype=np.float64)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(state.net.config),
        "step_count": int(state.net.step_count),
        "n_params": int(state.net.n_params),
        "buffer_n": int(X.shape[0]),
        "buffer_dim": int(X.shape[1]) if X.ndim == 2 else 0,
        "buffer_capacity": state.buffer.capacity,
        "n_scores": int(scores.size) if state.scores is not None else None,
    }
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (state.net.theta, X, r, scores)
    )
    digest = hashlib.sha256(blob).hexdigest()
    header["sha256"] = digest
    head = canonical_json(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(blob)


def load_checkpoint(path) -> AgentState:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 4:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", data[off : off + 4])
    off += 4
    try:
        header = json.loads(data[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt checkpoint header") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('version')!r} != supported {CHECKPOINT_VERSION}"
        )
    blob = data[off + hlen :]
    if hashlib.sha256(blob).hexdigest() != header.get("sha256"):
        raise CheckpointError("checkpoint payload checksum mismatch")
    try:
        config = NetworkConfig(**header["config"])
        n, bn, bd = header["n_params"], header["buffer_n"], header["buffer_dim"]
        n_scores = header["n_scores"] or 0
        values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
        if values.size != n + bn * bd + bn + n_scores:
            raise CheckpointError("checkpoint payload has the wrong length")
        theta = values[:n].copy()
        X = values[n : n + bn * bd].reshape(bn, bd)
        r = values[n + bn * bd : n + bn * bd + bn]
        scores = values[n + bn * bd + bn :].copy() if header["n_scores"] is not None else None
        net = ValueNetwork(config, theta, header["step_count"])
    except (KeyError, TypeError, ValueError, AlsoError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    buffer = ReplayBuffer(header["buffer_capacity"])
    for i in range(bn):
        buffer.push(X[i], r[i])
    return AgentState(net=net, buffer=buffer, scores=scores)


# -- episode -------------------------------------------------------------------


def _sub_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


class _Agent:
    """One agent's optimizer: surrogate, replay buffer, selector state."""

    def __init__(self, config: RunConfig, seed: int, K: int, table, provider, pool, persona):
        self.cfg = config
        self.K = K
        self.table = table
        self.provider = provider
        self.pool = pool
        self.persona = persona
        self.rng = np.random.default_rng(_sub_seed(seed, 1))
        self.train_rng = np.random.default_rng(_sub_seed(seed, 2))
        flags = set(config.ablation_flags)
        if config.method == "epsilon_greedy":
            flags.add("epsilon_greedy_selector")
        self.flags = flags
        self.history = []
        self.last_arm = None
        self.last_pi = None
        self.turn = 0
        self.state = AlsoState.initial(K, config.eta, config.lam, config.gamma)
        self.exp3 = Exp3State.initial(K, config.exp3_gamma, config.exp3_eta)
        self.uses_surrogate = config.method in ("also", "epsilon_greedy", "neural_ucb") and (
            "no_surrogate" not in flags
        )
        self.net = None
        self.buffer = ReplayBuffer(config.buffer_capacity)
        if self.uses_surrogate:
            if config.init_checkpoint:
                loaded = load_checkpoint(config.init_checkpoint)
                if loaded.net.config.input_dim != config.input_dim:
                    raise InvalidConfig("checkpoint input_dim does not match the featurizer")
                self.net = loaded.net
            elif config.method == "neural_ucb":
                self.net = init_network(NetworkConfig(
                    "mlp1", config.ucb_hidden, config.ucb_activation, config.input_dim,
                    _sub_seed(seed, 3)))
            else:
                self.net = init_network(NetworkConfig(
                    config.architecture, config.hidden, config.activation, config.input_dim,
                    _sub_seed(seed, 3)))
        if config.method == "neural_ucb":
            self.ucb = NeuralUcbState.initial(self.net.n_params, config.lambda_reg, config.nu)

    def _features(self):
        if "no_context" in self.flags:
            context = np.zeros(self.table.dim)
        else:
            context = encode_context(self.provider, self.history, self.cfg.context_window)
        return build_features(self.table, context)

    def choose(self):
        """Return (arm, pi, predictions, features) for the coming turn."""
        cfg = self.cfg
        method = cfg.method
        hold = self.last_arm is not None and self.turn % cfg.round_length != 0
        X = v = None
        grads = None
        if self.uses_surrogate:
            X = self._features()
            v = predict(self.net, X)

        if method == "vanilla":
            pi = np.full(self.K, 1.0 / self.K)
            arm = sample_arm(pi, self.rng)
        elif method == "exp3":
            pi = exp3_distribution(self.exp3)
            arm = sample_arm(pi, self.rng)
        elif method == "neural_ucb":
            arm, _, grads = select_neural_ucb(self.net, X, self.ucb)
            pi = np.zeros(self.K)
            pi[arm] = 1.0
        elif "epsilon_greedy_selector" in self.flags and v is not None:
            pi = epsilon_greedy_distribution(v, cfg.epsilon)
            arm = select_epsilon_greedy(v, cfg.epsilon, self.rng)
        elif "no_smoothing" in self.flags and v is not None:
            pi = exp_weights(v, cfg.eta, cfg.gamma)
            arm = sample_arm(pi, self.rng)
        else:
            pi = selection_distribution(self.state)
            arm = sample_arm(pi, self.rng)

        if hold:
            arm, pi = self.last_arm, self.last_pi
        self._grads = grads
        return arm, pi, v, X

    def persona_text(self, arm):
        return augment_persona(self.persona, self.pool[arm]).text

    def learn(self, arm, pi, v, X, record):
        cfg = self.cfg
        r = record.reward
        self.history.append(record)
        self.turn += 1
        method = cfg.method
        if method == "exp3":
            self.exp3 = update_exp3(self.exp3, arm, r, pi[arm])
            row = np.zeros(self.K)
            row[arm] = r / pi[arm]
        elif method == "vanilla":
            row = np.zeros(self.K)
        elif not self.uses_surrogate:
            row = np.zeros(self.K)
            row[arm] = r
            self.state = smooth_scores(self.state, row)
        else:
            self.buffer.push(X[arm], r)
            if not cfg.freeze_surrogate and self.turn % cfg.update_interval == 0:
                train_step(self.net, self.buffer, cfg.train, self.train_rng)
            if method == "neural_ucb":
                self.ucb = update_neural_ucb(self.ucb, self._grads[arm])
            self.state = smooth_scores(self.state, v)
            row = v
        self.last_arm, self.last_pi = arm, pi
        return row

    def agent_state(self) -> AgentState:
        return AgentState(net=self.net, buffer=self.buffer, scores=self.state.scores.copy())


def _new_log(config, seed, agent_id):
    return EpisodeLog(
        scenario_id=config.scenario_id,
        agent_id=agent_id,
        method=variant_label(config),
        seed=seed,
    )


def variant_label(config: RunConfig) -> str:
    if config.ablation_flags:
        return config.method + "+" + "+".join(sorted(config.ablation_flags))
    return config.method


def run_episode(config: RunConfig, seed: int, return_agents: bool = False):
    """Run one episode; with ``bilateral`` the partner's log is in ``log.partner``."""
    pool = load_pool(config.pool_path)
    persona = Persona(config.persona, "p1")
    env_cfg = config.env
    if env_cfg.K != len(pool):
        env_cfg = dataclasses.replace(env_cfg, K=len(pool))
    provider = EmbeddingProvider(
        kind=config.embedding_kind,
        dim=config.embedding_dim,
        seed=config.embedding_seed,
        endpoint=config.embedding_endpoint,
    )
    n_agents = 2 if config.bilateral else 1
    partner_seed = seed if config.partner_seed is None else config.partner_seed
    agent_seeds = [seed, partner_seed][:n_agents]
    logs, agents, envs = [], [], []
    for i in range(n_agents):
        logs.append(_new_log(config, seed, f"p{i + 1}"))
    try:
        for i in range(n_agents):
            needs_table = config.method in ("also", "epsilon_greedy", "neural_ucb")
            table = None
            if needs_table:
                table = precompute_arm_embeddings(provider, Persona(config.persona, f"p{i + 1}"), pool)
            env = create_environment(
                dataclasses.replace(env_cfg, seed=_sub_seed(env_cfg.seed, agent_seeds[i], 7, i)),
                arm_labels=pool.ids,
            )
            envs.append(env)
            agents.append(_Agent(config, _sub_seed(agent_seeds[i], 11, i), len(pool),
                                 table, provider, pool, persona))
        T = env_cfg.turns_per_episode
        for _ in range(T):
            choices = [a.choose() for a in agents]
            for i, (agent, env, log) in enumerate(zip(agents, envs, logs)):
                arm, pi, v, X = choices[i]
                other = choices[1 - i][0] if n_agents == 2 else None
                rec = env.step(arm, opponent_arm=other, persona_text=agent.persona_text(arm))
                row = agent.learn(arm, pi, v, X, rec)
                log.records.append(rec)
                log.selected_arms.append(int(arm))
                log.pi.append([float(p) for p in pi])
                log.predictions.append([float(x) for x in row])
                if env.counterfactual_available:
                    log.counterfactual.append([float(x) for x in env.last_counterfactual])
                    log.latent_means.append([float(x) for x in env.last_latent_means])
    except AlsoError as exc:
        for log in logs:
            log.incomplete = True
            log.error = f"{type(exc).__name__}: {exc}"
    for log, env in zip(logs, envs):
        log.agent_calls = env.agent_calls
        log.evaluator_calls = env.evaluator_calls
        log.optimizer_calls = 0
        if not env.counterfactual_available:
            log.counterfactual = None
            log.latent_means = None
    for log in logs:
        log.embedding_calls = provider.texts_embedded
    primary = logs[0]
    primary.partner = logs[1] if n_agents == 2 else None
    if return_agents:
        return primary, agents
    return primary


# -- experiments ---------------------------------------------------------------


def resolve_variants(config: RunConfig):
    """List of (name, RunConfig) cells; defaults to the config itself."""
    if not config.variants:
        return [(variant_label(config), config)]
    out = []
    for spec in config.variants:
        spec = dict(spec)
        name = spec.pop("name", None)
        if "ablation" in spec:
            method, flags = ABLATION_MATRIX[spec.pop("ablation")]
            spec.setdefault("method", method)
            spec.setdefault("ablation_flags", flags)
        cell = config.replace(variants=(), **spec)
        out.append((name or variant_label(cell), cell))
    return out


def win_rate_matrix(per_variant_scores):
    """W[i][j]: fraction of seeds where variant i beats j (ties count half)."""
    names = list(per_variant_scores)
    W = []
    for a in names:
        row = []
        for b in names:
            if a == b:
                row.append(1.0)
                continue
            xa, xb = np.asarray(per_variant_scores[a]), np.asarray(per_variant_scores[b])
            wins = np.sum(xa > xb) + 0.5 * np.sum(xa == xb)
            row.append(float(wins / len(xa)))
        W.append(row)
    return names, W


@dataclass
class ExperimentReport:
    logs: dict  # variant -> list of EpisodeLog (seed order)
    aggregates: dict
    win_rates: dict
    budgets: dict
    manifest: dict
    incomplete: bool = False

    def to_dict(self) -> dict:
        return {
            "aggregates": self.aggregates,
            "win_rates": self.win_rates,
            "budgets": self.budgets,
            "manifest": self.manifest,
            "incomplete": self.incomplete,
        }

    def win_rate(self, a: str, b: str) -> float:
        names = self.win_rates["variants"]
        return self.win_rates["matrix"][names.index(a)][names.index(b)]


def run_experiment(config: RunConfig, metric: str = "cumulative_reward") -> ExperimentReport:
    cells = resolve_variants(config)
    logs, summaries = {}, {}
    incomplete = False
    for name, cell in cells:
        logs[name], summaries[name] = [], []
        for seed in config.seeds:
            try:
                log = run_episode(cell, seed)
            except AlsoError as exc:
                log = _new_log(cell, seed, "p1")
                log.incomplete, log.error = True, f"{type(exc).__name__}: {exc}"
                log.partner = None
            incomplete |= log.incomplete
            logs[name].append(log)
            summaries[name].append(episode_summary(log))

    aggregates = {}
    for name, rows in summaries.items():
        agg = {}
        for key in ("mean_reward", "cumulative_reward", "pseudo_regret"):
            vals = [r[key] for r in rows if r[key] is not None]
            m, se = mean_se(vals)
            agg[key] = {"mean": m, "se": se, "n": len(vals)}
        agg["per_seed"] = {key: [r[key] for r in rows] for key in ("mean_reward", "cumulative_reward")}
        aggregates[name] = agg

    names, W = win_rate_matrix({n: [r[metric] for r in rows] for n, rows in summaries.items()})
    budgets = {}
    for name, cell in cells:
        T = cell.env.turns_per_episode
        formula = budget_report(budget_method_for(cell.method), T)
        counted = [(lg.agent_calls, lg.evaluator_calls, lg.optimizer_calls) for lg in logs[name]]
        budgets[name] = {
            "method": formula.method,
            "T": T,
            "agent_calls": formula.agent_calls,
            "evaluator_calls": formula.evaluator_calls,
            "optimizer_calls": formula.optimizer_calls,
            "counters_match": all(c == formula.as_tuple() for c in counted),
        }
    manifest = {
        "config_digest": config.digest(),
        "code_version": __version__,
        "seeds": list(config.seeds),
        "variants": names,
        "metric": metric,
    }
    return ExperimentReport(
        logs=logs,
        aggregates=aggregates,
        win_rates={"variants": names, "metric": metric, "matrix": W},
        budgets=budgets,
        manifest=manifest,
        incomplete=incomplete,
    )


def output_dir(config: RunConfig, override=None) -> Path:
    path = override or config.output_dir or os.environ.get(OUTPUT_ENV_VAR) or "runs"
    return Path(path)


def write_experiment(report: ExperimentReport, config: RunConfig, out: Path) -> dict:
    """Write report.json, turns.csv, logs.jsonl, resolved_config.json."""
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.json",
        "csv": out / "turns.csv",
        "logs": out / "logs.jsonl",
        "config": out / "resolved_config.json",
    }
    paths["report"].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    items = [
        (f"{name}/seed{log.seed}", log)
        for name, rows in report.logs.items()
        for log in rows
    ]
    paths["csv"].write_text(csv_text(items))
    with paths["logs"].open("w") as fh:
        for name, log in items:
            fh.write(canonical_json({"episode": name, "log": log.to_dict()}) + "\n")
    paths["config"].write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")
    return paths


def fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def train_across(config: RunConfig, seeds, path) -> list:
    """Train one surrogate over consecutive episodes, checkpointing after each.

    Each episode warm-starts from the previous checkpoint; the final
    checkpoint is left at ``path``.
    """
    logs = []
    cfg = config
    for seed in seeds:
        log, agents = run_episode(cfg, seed, return_agents=True)
        if agents[0].net is None:
            raise InvalidConfig("this method has no surrogate to checkpoint")
        if log.incomplete:
            raise AlsoError(f"training episode {seed} failed: {log.error}")
        save_checkpoint(agents[0].agent_state(), path)
        logs.append(log)
        cfg = config.replace(init_checkpoint=str(path), freeze_surrogate=False)
    return logs
