"""Simulated non-stationary social environment.

Each arm owns a latent mean vector over the seven judge dimensions, kept in
normalized [0, 1] units. The per-turn latent mean is

    profile[regime][k] + dim_offset[k, m] + drift[k, m] + opponent_offset[k]

clipped to [0, 1]. A turn emits normalized dimension draws for every arm
(the played arm's row becomes the TurnRecord; the full row vector is the
counterfactual reward vector used for pseudo-regret), then rescales them to
the raw judge ranges.

The regime process is what the counterpart "says": when the regime is
revealed (by default only for the drifting kind), the opponent utterance
emitted at turn t names the regime that will hold at turn t + 1, so the
dialogue history carries a real signal about upcoming rewards.
"""

from __future__ import annotations

import json
import math
from collections import Counter, deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    ArmOutOfRange,
    DimensionOutOfRange,
    EpisodeExhausted,
    InvalidConfig,
    ProtocolError,
)

DIMENSIONS = (
    ("BEL", 0.0, 10.0),
    ("REL", -5.0, 5.0),
    ("KNO", 0.0, 10.0),
    ("SEC", -10.0, 0.0),
    ("SOC", -10.0, 0.0),
    ("FIN", -5.0, 5.0),
    ("GOAL", 0.0, 10.0),
)
DIM_NAMES = tuple(d[0] for d in DIMENSIONS)
DIM_LOW = np.array([d[1] for d in DIMENSIONS])
DIM_HIGH = np.array([d[2] for d in DIMENSIONS])
N_DIMS = len(DIMENSIONS)

ENV_KINDS = ("stationary", "drifting", "abrupt_switch", "adaptive_adversary", "remote")
OPPONENT_KINDS = ("static", "drifting", "best_response")
PROTOCOL_VERSION = "also-env/1"


def normalize_reward(dims) -> float:
    """Mean over the seven dimensions of (d - min) / (max - min)."""
    if len(dims) != N_DIMS:
        raise DimensionOutOfRange("dims", len(dims), N_DIMS, N_DIMS)
    total = 0.0
    for (name, lo, hi), d in zip(DIMENSIONS, dims):
        d = float(d)
        if not (lo <= d <= hi):
            raise DimensionOutOfRange(name, d, lo, hi)
        total += (d - lo) / (hi - lo)
    return total / N_DIMS


def to_raw(unit) -> np.ndarray:
    """Map normalized [0, 1] dimension values onto the judge ranges."""
    unit = np.clip(np.asarray(unit, dtype=np.float64), 0.0, 1.0)
    return np.clip(DIM_LOW + unit * (DIM_HIGH - DIM_LOW), DIM_LOW, DIM_HIGH)


@dataclass
class TurnRecord:
    turn: int
    agent_arm: int
    opponent_arm: int | None
    agent_utterance: str
    opponent_utterance: str
    raw_dims: tuple
    reward: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["raw_dims"] = list(self.raw_dims)
        return d


@dataclass
class EnvConfig:
    kind: str = "stationary"
    K: int = 12
    turns_per_episode: int = 20
    drift_variance_range: tuple = (0.004, 0.015)
    switch_period: int = 50
    adversary_memory: int = 5
    adversary_penalty: float = 0.15
    seed: int = 0
    arm_means: list | None = None
    mean_range: tuple = (0.25, 0.6)
    best_mean: float = 0.8
    emission: str = "gaussian"
    noise_sd: float = 0.05
    context_regimes: int = 1
    regime_dwell: float = 50.0
    phases: int = 4
    drift_rho: float = 0.9
    drift_fraction: float = 0.5
    opponent: str | None = None
    opponent_step: float = 0.0
    opponent_bound: float = 0.1
    endpoint: str | None = None
    reveal_regime: bool | None = None  # None: only the drifting kind announces its regime
    structure_seed: int | None = None  # shared arm-value landscape across a family

    def __post_init__(self):
        self.drift_variance_range = tuple(self.drift_variance_range)
        self.mean_range = tuple(self.mean_range)
        self.validate()

    def validate(self):
        if self.kind not in ENV_KINDS:
            raise InvalidConfig(f"unknown environment kind {self.kind!r}")
        if self.K < 1:
            raise InvalidConfig("K must be >= 1")
        if self.turns_per_episode < 1:
            raise InvalidConfig("turns_per_episode must be >= 1")
        lo, hi = self.drift_variance_range
        if not (0 < lo <= hi):
            raise InvalidConfig("drift_variance_range needs 0 < low <= high")
        if self.switch_period < 1:
            raise InvalidConfig("switch_period must be >= 1")
        if self.adversary_memory < 1:
            raise InvalidConfig("adversary_memory must be >= 1")
        if self.emission not in ("gaussian", "bernoulli"):
            raise InvalidConfig(f"unknown emission {self.emission!r}")
        if self.arm_means is not None:
            if len(self.arm_means) != self.K:
                raise InvalidConfig("arm_means must have K entries")
            if any(not 0.0 <= m <= 1.0 for m in self.arm_means):
                raise InvalidConfig("arm_means must lie in [0, 1]")
        if self.context_regimes < 1 or self.phases < 1:
            raise InvalidConfig("context_regimes and phases must be >= 1")
        if self.kind == "abrupt_switch" and (self.phases < 2 or self.phases > self.K):
            raise InvalidConfig("abrupt_switch needs 2 <= phases <= K")
        if self.context_regimes > self.K:
            raise InvalidConfig("context_regimes cannot exceed K")
        if not 0.0 <= self.drift_rho < 1.0:
            raise InvalidConfig("drift_rho must lie in [0, 1)")
        if not 0.0 <= self.drift_fraction <= 1.0:
            raise InvalidConfig("drift_fraction must lie in [0, 1]")
        if self.opponent is not None and self.opponent not in OPPONENT_KINDS:
            raise InvalidConfig(f"unknown opponent kind {self.opponent!r}")
        if self.kind == "remote" and not self.endpoint:
            raise InvalidConfig("remote environment requires an endpoint")

    def opponent_kind(self) -> str:
        if self.opponent is not None:
            return self.opponent
        return "best_response" if self.kind == "adaptive_adversary" else "static"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drift_variance_range"] = list(self.drift_variance_range)
        d["mean_range"] = list(self.mean_range)
        return d


# -- opponent ----------------------------------------------------------------


@dataclass
class OpponentModel:
    """Counterpart whose state shifts per-arm latent means.

    ``offsets`` is the policy state, in normalized reward units.
    """

    kind: str
    K: int
    memory: int = 5
    penalty: float = 0.15
    step_size: float = 0.0
    bound: float = 0.1
    seed: int = 0
    offsets: np.ndarray = None
    recent: deque = None
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in OPPONENT_KINDS:
            raise InvalidConfig(f"unknown opponent kind {self.kind!r}")
        if self.kind == "best_response" and self.memory < 1:
            raise InvalidConfig("best_response opponent needs memory >= 1")
        if self.offsets is None:
            self.offsets = np.zeros(self.K)
        if self.recent is None:
            self.recent = deque(maxlen=self.memory)
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    def target(self) -> int | None:
        """Modal arm of a full memory window; ties go to the most recent."""
        if len(self.recent) < self.memory:
            return None
        counts = Counter(self.recent)
        top = max(counts.values())
        for arm in reversed(self.recent):
            if counts[arm] == top:
                return arm
        return None


def opponent_act(model: OpponentModel, observed_agent_arm: int) -> OpponentModel:
    if not 0 <= observed_agent_arm < model.K:
        raise ArmOutOfRange(f"arm {observed_agent_arm} outside [0, {model.K})")
    if model.kind == "static":
        return model
    if model.kind == "drifting":
        step = model.rng.normal(0.0, 1.0, size=model.K) * model.step_size
        model.offsets = np.clip(model.offsets + step, -model.bound, model.bound)
        return model
    model.recent.append(observed_agent_arm)
    offsets = np.zeros(model.K)
    target = model.target()
    if target is not None:
        offsets[target] = -model.penalty
    model.offsets = offsets
    return model


# -- environment -------------------------------------------------------------


def _shared_fraction():
    # cross-dimension correlation of drift and noise innovations
    return 0.8


def _mean_var_factor(c):
    return c + (1.0 - c) / N_DIMS


class Environment:
    """Seeded simulator; one instance per episode, single owner."""

    counterfactual_available = True

    def __init__(self, config: EnvConfig, arm_labels=None):
        config.validate()
        if config.kind == "remote":
            raise InvalidConfig("use RemoteEnvironment for kind='remote'")
        self.config = config
        K = config.K
        self.K = K
        self.arm_labels = list(arm_labels) if arm_labels is not None else [f"arm{k}" for k in range(K)]
        if len(self.arm_labels) != K:
            raise InvalidConfig("arm_labels must have K entries")

        ss = np.random.SeedSequence(config.seed)
        s_struct, s_emit, s_drift, s_regime, s_opp = ss.spawn(5)
        self._emit_rng = np.random.default_rng(s_emit)
        self._drift_rng = np.random.default_rng(s_drift)
        self._regime_rng = np.random.default_rng(s_regime)
        struct = np.random.default_rng(s_struct)

        self.profiles = self._build_profiles(struct)
        self.dim_offsets = struct.uniform(-0.05, 0.05, size=(K, N_DIMS))
        self.dim_offsets -= self.dim_offsets.mean(axis=1, keepdims=True)

        c = _shared_fraction()
        phi = _mean_var_factor(c)
        if config.kind == "drifting":
            lo, hi = config.drift_variance_range
            targets = np.linspace(lo, hi, K) if K > 1 else np.array([(lo + hi) / 2])
            self.variance_targets = targets[struct.permutation(K)]
            self.drift_sd = np.sqrt(config.drift_fraction * self.variance_targets / phi)
            self.noise_sd = np.sqrt((1.0 - config.drift_fraction) * self.variance_targets / phi)
        else:
            self.variance_targets = None
            self.drift_sd = np.zeros(K)
            self.noise_sd = np.full(K, config.noise_sd / math.sqrt(phi))
        self.drift = self._drift_innovation() if config.kind == "drifting" else np.zeros((K, N_DIMS))

        if config.kind == "abrupt_switch":
            self._phase_seq = [int(struct.integers(config.phases))]
        self.regime = self._regime_for_turn(1, initial=True)

        self.opponent = OpponentModel(
            kind=config.opponent_kind(),
            K=K,
            memory=config.adversary_memory,
            penalty=config.adversary_penalty,
            step_size=config.opponent_step,
            bound=config.opponent_bound,
            seed=int(s_opp.generate_state(1)[0]),
        )
        self.turn = 0
        self.steps = 0
        self.agent_calls = 0
        self.evaluator_calls = 0
        self.last_counterfactual = None
        self.last_latent_means = None

    @property
    def reveals_regime(self) -> bool:
        if self.config.reveal_regime is not None:
            return self.config.reveal_regime
        return self.config.kind == "drifting"

    # structure ---------------------------------------------------------------

    def _n_regimes(self):
        cfg = self.config
        if cfg.kind == "abrupt_switch":
            return cfg.phases
        if cfg.kind == "drifting":
            return cfg.context_regimes
        return 1

    def _build_profiles(self, rng):
        cfg = self.config
        R = self._n_regimes()
        if cfg.arm_means is not None:
            base = np.asarray(cfg.arm_means, dtype=np.float64)
            if R == 1:
                self.best_arms = [int(np.argmax(base))]
                return base[None, :].copy()
        else:
            base = rng.uniform(cfg.mean_range[0], cfg.mean_range[1], size=cfg.K)
        if cfg.structure_seed is not None:
            # the reward landscape is shared by every instance of a family
            shared = np.random.default_rng(cfg.structure_seed)
            if cfg.arm_means is None:
                base = shared.uniform(cfg.mean_range[0], cfg.mean_range[1], size=cfg.K)
            best = shared.choice(cfg.K, size=R, replace=False)
            rng.uniform(size=cfg.K + R)  # keep the instance stream aligned
        else:
            best = rng.choice(cfg.K, size=R, replace=False)
        profiles = np.tile(base, (R, 1))
        for r, arm in enumerate(best):
            profiles[r, arm] = cfg.best_mean
        self.best_arms = [int(a) for a in best]
        return profiles

    def _regime_for_turn(self, turn, initial=False):
        cfg = self.config
        if cfg.kind == "abrupt_switch":
            seg = turn // cfg.switch_period
            while len(self._phase_seq) <= seg:
                prev = self._phase_seq[-1]
                nxt = int(self._regime_rng.integers(cfg.phases - 1))
                self._phase_seq.append(nxt if nxt < prev else nxt + 1)
            return self._phase_seq[seg]
        R = self._n_regimes()
        if R == 1:
            return 0
        if initial:
            return int(self._regime_rng.integers(R))
        u, pick = self._regime_rng.random(), int(self._regime_rng.integers(R - 1))
        if u < 1.0 / cfg.regime_dwell:
            return pick if pick < self.regime else pick + 1
        return self.regime

    def _drift_innovation(self):
        c = _shared_fraction()
        shared = self._drift_rng.normal(size=(self.K, 1))
        own = self._drift_rng.normal(size=(self.K, N_DIMS))
        return self.drift_sd[:, None] * (math.sqrt(c) * shared + math.sqrt(1 - c) * own)

    # dynamics ----------------------------------------------------------------

    def latent_dim_means(self) -> np.ndarray:
        mu = (
            self.profiles[self.regime][:, None]
            + self.dim_offsets
            + self.drift
            + self.opponent.offsets[:, None]
        )
        return np.clip(mu, 0.0, 1.0)

    def latent_means(self) -> np.ndarray:
        return self.latent_dim_means().mean(axis=1)

    def best_arm(self) -> int:
        return int(np.argmax(self.latent_means()))

    def _emit(self, mu):
        if self.config.emission == "bernoulli":
            return (self._emit_rng.random(mu.shape) < mu).astype(np.float64)
        c = _shared_fraction()
        shared = self._emit_rng.normal(size=(self.K, 1))
        own = self._emit_rng.normal(size=mu.shape)
        noise = self.noise_sd[:, None] * (math.sqrt(c) * shared + math.sqrt(1 - c) * own)
        return np.clip(mu + noise, 0.0, 1.0)

    def _advance(self, agent_arm):
        opponent_act(self.opponent, agent_arm)
        if self.config.kind == "drifting":
            rho = self.config.drift_rho
            self.drift = rho * self.drift + math.sqrt(1 - rho * rho) * self._drift_innovation()
        self.regime = self._regime_for_turn(self.turn + 1)

    def step(self, agent_arm: int, opponent_arm: int | None = None,
             persona_text: str | None = None) -> TurnRecord:
        if self.turn >= self.config.turns_per_episode:
            raise EpisodeExhausted(
                f"episode already ran {self.config.turns_per_episode} turns"
            )
        if not 0 <= agent_arm < self.K:
            raise ArmOutOfRange(f"arm {agent_arm} outside [0, {self.K})")
        self.turn += 1
        mu = self.latent_dim_means()
        self.last_latent_means = mu.mean(axis=1)
        unit = self._emit(mu)
        raw_all = DIM_LOW + unit * (DIM_HIGH - DIM_LOW)
        counterfactual = ((raw_all - DIM_LOW) / (DIM_HIGH - DIM_LOW)).mean(axis=1)
        raw = tuple(float(v) for v in to_raw(unit[agent_arm]))
        reward = normalize_reward(raw)
        counterfactual[agent_arm] = reward
        self.last_counterfactual = counterfactual

        self._advance(agent_arm)
        self.steps += 1
        self.agent_calls += 2
        self.evaluator_calls += 1
        return TurnRecord(
            turn=self.turn,
            agent_arm=int(agent_arm),
            opponent_arm=None if opponent_arm is None else int(opponent_arm),
            agent_utterance=self.arm_labels[agent_arm],
            opponent_utterance=f"stance-{self.regime}" if self.reveals_regime else "stance-neutral",
            raw_dims=raw,
            reward=reward,
        )


def create_environment(config: EnvConfig, arm_labels=None):
    if config.kind == "remote":
        return RemoteEnvironment.connect(config, arm_labels=arm_labels)
    return Environment(config, arm_labels=arm_labels)


# -- remote wire protocol ----------------------------------------------------
#
# Newline-delimited JSON. Client request:
#   {"version": "also-env/1", "type": "step", "episode_id": str, "turn": int,
#    "agent_arm": int, "augmented_persona_text": str}
# Server response:
#   {"version": "also-env/1", "raw_dims": [7 floats], "opponent_utterance": str,
#    "done": bool}


def encode_message(msg: dict) -> bytes:
    return (json.dumps(msg, sort_keys=True) + "\n").encode()


def decode_message(line: bytes) -> dict:
    try:
        msg = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable message: {exc}") from None
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    if msg.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {msg.get('version')!r}")
    return msg


class StreamTransport:
    """Request/response over a pair of binary file objects."""

    def __init__(self, reader, writer):
        self.reader = reader
        self.writer = writer

    def exchange(self, msg: dict) -> dict:
        self.writer.write(encode_message(msg))
        self.writer.flush()
        line = self.reader.readline()
        if not line:
            raise ProtocolError("remote environment closed the stream")
        return decode_message(line)


class HttpTransport:
    """Same messages, one JSON body per POST."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def exchange(self, msg: dict) -> dict:
        import urllib.error
        import urllib.request

        req = urllib.request.Request(
            self.url,
            data=encode_message(msg),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return decode_message(resp.read().strip())
        except urllib.error.URLError as exc:
            raise ProtocolError(f"transport failure: {exc}") from None


class RemoteEnvironment:
    """Client side of the step protocol. Responses are re-validated."""

    counterfactual_available = False

    def __init__(self, config: EnvConfig, transport, episode_id: str = "episode-0",
                 arm_labels=None):
        self.config = config
        self.K = config.K
        self.transport = transport
        self.episode_id = episode_id
        self.arm_labels = list(arm_labels) if arm_labels is not None else [f"arm{k}" for k in range(config.K)]
        self.turn = 0
        self.steps = 0
        self.agent_calls = 0
        self.evaluator_calls = 0
        self.done = False
        self.last_counterfactual = None
        self.last_latent_means = None

    @classmethod
    def connect(cls, config: EnvConfig, arm_labels=None):
        if config.endpoint.startswith(("http://", "https://")):
            return cls(config, HttpTransport(config.endpoint), arm_labels=arm_labels)
        if config.endpoint.startswith("tcp://"):
            import socket

            host, port = config.endpoint[len("tcp://"):].rsplit(":", 1)
            sock = socket.create_connection((host, int(port)))
            return cls(config, StreamTransport(sock.makefile("rb"), sock.makefile("wb")),
                       arm_labels=arm_labels)
        raise InvalidConfig(f"unsupported endpoint {config.endpoint!r}")

    def step(self, agent_arm: int, opponent_arm: int | None = None,
             persona_text: str | None = None) -> TurnRecord:
        if self.done or self.turn >= self.config.turns_per_episode:
            raise EpisodeExhausted("remote episode has ended")
        if not 0 <= agent_arm < self.K:
            raise ArmOutOfRange(f"arm {agent_arm} outside [0, {self.K})")
        reply = self.transport.exchange({
            "version": PROTOCOL_VERSION,
            "type": "step",
            "episode_id": self.episode_id,
            "turn": self.turn + 1,
            "agent_arm": int(agent_arm),
            "augmented_persona_text": persona_text or "",
        })
        if "error" in reply:
            raise ProtocolError(f"remote environment error: {reply['error']}")
        for key in ("raw_dims", "opponent_utterance", "done"):
            if key not in reply:
                raise ProtocolError(f"response missing {key!r}")
        raw = reply["raw_dims"]
        if not isinstance(raw, list) or len(raw) != N_DIMS:
            raise ProtocolError("raw_dims must be a list of 7 numbers")
        try:
            raw = tuple(float(v) for v in raw)
        except (TypeError, ValueError):
            raise ProtocolError("raw_dims must be numeric") from None
        reward = normalize_reward(raw)  # raises DimensionOutOfRange
        self.turn += 1
        self.steps += 1
        self.agent_calls += 2
        self.evaluator_calls += 1
        self.done = bool(reply["done"])
        return TurnRecord(
            turn=self.turn,
            agent_arm=int(agent_arm),
            opponent_arm=None if opponent_arm is None else int(opponent_arm),
            agent_utterance=self.arm_labels[agent_arm],
            opponent_utterance=str(reply["opponent_utterance"]),
            raw_dims=raw,
            reward=reward,
        )


def serve_stream(env: Environment, reader, writer) -> int:
    """Answer step requests from ``reader`` using a local simulator.

    Reference peer for the wire protocol; returns the number of steps served.
    """
    served = 0
    for line in iter(reader.readline, b""):
        try:
            msg = decode_message(line)
            if msg.get("type") != "step":
                raise ProtocolError(f"unknown request type {msg.get('type')!r}")
            rec = env.step(int(msg["agent_arm"]), persona_text=msg.get("augmented_persona_text"))
            reply = {
                "version": PROTOCOL_VERSION,
                "raw_dims": list(rec.raw_dims),
                "opponent_utterance": rec.opponent_utterance,
                "done": env.turn >= env.config.turns_per_episode,
            }
        except Exception as exc:  # reported to the peer, never fatal here
            reply = {"version": PROTOCOL_VERSION, "error": str(exc)}
        writer.write(encode_message(reply))
        writer.flush()
        served += 1
    return served
