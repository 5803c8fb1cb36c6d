import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from also.environment import (
    DIM_HIGH,
    DIM_LOW,
    DIM_NAMES,
    PROTOCOL_VERSION,
    EnvConfig,
    Environment,
    HttpTransport,
    OpponentModel,
    RemoteEnvironment,
    StreamTransport,
    create_environment,
    decode_message,
    encode_message,
    normalize_reward,
    opponent_act,
    serve_stream,
)
from also.errors import (
    ArmOutOfRange,
    DimensionOutOfRange,
    EpisodeExhausted,
    InvalidConfig,
    ProtocolError,
)

MAXIMA = (10, 5, 10, 0, 0, 5, 10)
MINIMA = (0, -5, 0, -10, -10, -5, 0)


def _oracle(dims):
    return sum((d - lo) / (hi - lo) for d, lo, hi in zip(dims, DIM_LOW, DIM_HIGH)) / 7


def test_normalize_extremes():
    assert normalize_reward(MAXIMA) == 1.0
    assert normalize_reward(MINIMA) == 0.0


def test_normalize_hand_example():
    assert normalize_reward((8, 0, 5, -2, 0, 1, 7)) == pytest.approx(0.7, abs=1e-15)


def test_normalize_matches_formula_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d = DIM_LOW + rng.random(7) * (DIM_HIGH - DIM_LOW)
        assert abs(normalize_reward(d) - _oracle(d)) <= 1e-12


@pytest.mark.parametrize("m", range(7))
def test_normalize_names_offending_dimension(m):
    dims = list(MAXIMA)
    dims[m] += 0.5
    with pytest.raises(DimensionOutOfRange) as info:
        normalize_reward(dims)
    assert info.value.dimension == DIM_NAMES[m]


def test_stationary_best_arm_fixed():
    env = Environment(EnvConfig(kind="stationary", K=2, arm_means=[0.9, 0.1], turns_per_episode=200))
    for _ in range(200):
        assert env.best_arm() == 0
        env.step(1)


def test_abrupt_switch_changes_on_schedule():
    env = Environment(EnvConfig(kind="abrupt_switch", K=12, switch_period=50, turns_per_episode=300))
    best = []
    for _ in range(300):
        env.step(0)
        best.append(int(np.argmax(env.last_latent_means)))
    changes = [t + 1 for t in range(1, 300) if best[t] != best[t - 1]]
    assert changes == [50, 100, 150, 200, 250, 300]


def test_episode_exhausted_on_21st_step():
    env = Environment(EnvConfig())
    for _ in range(20):
        env.step(0)
    with pytest.raises(EpisodeExhausted):
        env.step(0)


def test_arm_out_of_range():
    with pytest.raises(ArmOutOfRange):
        Environment(EnvConfig()).step(12)


@pytest.mark.parametrize("kind", ["stationary", "drifting", "abrupt_switch", "adaptive_adversary"])
def test_determinism(kind):
    arms = np.random.default_rng(1).integers(12, size=100)

    def run():
        env = Environment(EnvConfig(kind=kind, turns_per_episode=100, seed=3))
        return [env.step(int(a)).to_dict() for a in arms]

    assert run() == run()


@pytest.mark.parametrize("kind", ["stationary", "drifting", "abrupt_switch", "adaptive_adversary"])
def test_range_safety(kind):
    env = Environment(EnvConfig(kind=kind, turns_per_episode=300, seed=2, noise_sd=0.4))
    rng = np.random.default_rng(0)
    for _ in range(300):
        rec = env.step(int(rng.integers(12)))
        assert np.all(np.array(rec.raw_dims) >= DIM_LOW)
        assert np.all(np.array(rec.raw_dims) <= DIM_HIGH)
        assert 0.0 <= rec.reward <= 1.0
        assert rec.reward == normalize_reward(rec.raw_dims)


def test_turns_strictly_increase():
    env = Environment(EnvConfig())
    assert [env.step(0).turn for _ in range(20)] == list(range(1, 21))


def test_best_response_penalty_on_turn_six():
    env = Environment(EnvConfig(kind="adaptive_adversary", adversary_memory=5, turns_per_episode=10))
    means = []
    for _ in range(6):
        env.step(4)
        means.append(env.last_latent_means[4])
    assert means[4] == pytest.approx(means[0], abs=1e-12)
    assert means[5] == pytest.approx(means[4] - 0.15, abs=1e-12)


def test_best_response_spreads_under_uniform_play():
    model = OpponentModel("best_response", K=12, memory=5)
    rng = np.random.default_rng(0)
    penalized = np.zeros(12)
    for _ in range(2000):
        opponent_act(model, int(rng.integers(12)))
        penalized += model.offsets < 0
    share = penalized.sum() / 12
    assert np.all(penalized <= 2 * share) and np.all(penalized >= share / 2)


def test_fixed_arm_play_is_exploited():
    # a fixed arm earns less than the same arm does under uniform play
    gaps = []
    for seed in range(20):
        cfg = dict(kind="adaptive_adversary", turns_per_episode=500, seed=seed)
        env = Environment(EnvConfig(**cfg))
        rng = np.random.default_rng(seed)
        latent = []
        for _ in range(500):
            env.step(int(rng.integers(12)))
            latent.append(env.last_latent_means)
        uniform = np.mean(latent, axis=0)
        row = []
        for k in range(12):
            env = Environment(EnvConfig(**cfg))
            row.append(np.mean([env.step(k).reward for _ in range(500)]) - uniform[k])
        gaps.append(row)
    assert np.all(np.median(gaps, axis=0) < 0)


def test_static_opponent_is_noop():
    model = OpponentModel("static", K=3)
    before = model.offsets.copy()
    for a in (0, 1, 2, 2):
        opponent_act(model, a)
    assert np.array_equal(model.offsets, before)


def test_drifting_opponent_step_zero_is_static():
    model = OpponentModel("drifting", K=3, step_size=0.0)
    for a in range(10):
        opponent_act(model, a % 3)
    assert not model.offsets.any()


def test_drifting_opponent_moves_within_bound():
    model = OpponentModel("drifting", K=3, step_size=0.05, bound=0.1)
    for a in range(200):
        opponent_act(model, a % 3)
    assert model.offsets.any() and np.all(np.abs(model.offsets) <= 0.1)


def test_opponent_rejects_bad_arm():
    with pytest.raises(ArmOutOfRange):
        opponent_act(OpponentModel("static", K=3), 3)


def test_drift_calibration_five_seeds():
    lo, hi = 0.004, 0.015
    for seed in range(5):
        env = Environment(EnvConfig(kind="drifting", turns_per_episode=2000, seed=seed))
        rewards = np.array([env.step(t % 12) and env.last_counterfactual for t in range(2000)])
        var = rewards.var(axis=0)
        assert np.all(var >= 0.8 * lo) and np.all(var <= 1.2 * hi), var


def test_regime_revealed_only_when_configured():
    drifting = Environment(EnvConfig(kind="drifting", context_regimes=4, turns_per_episode=5))
    assert drifting.step(0).opponent_utterance.startswith("stance-")
    assert drifting.step(0).opponent_utterance != "stance-neutral"
    switch = Environment(EnvConfig(kind="abrupt_switch", turns_per_episode=5))
    assert switch.step(0).opponent_utterance == "stance-neutral"


def test_structure_seed_shares_landscape():
    a = Environment(EnvConfig(kind="drifting", context_regimes=4, structure_seed=7, seed=1))
    b = Environment(EnvConfig(kind="drifting", context_regimes=4, structure_seed=7, seed=2))
    assert np.array_equal(a.profiles, b.profiles)
    assert a.best_arms == b.best_arms


@pytest.mark.parametrize("bad", [
    dict(kind="nope"), dict(K=0), dict(turns_per_episode=0), dict(drift_variance_range=(0.02, 0.01)),
    dict(arm_means=[0.5]), dict(kind="remote"), dict(kind="abrupt_switch", phases=1),
])
def test_invalid_configs(bad):
    with pytest.raises(InvalidConfig):
        EnvConfig(**bad)


# -- wire protocol ----------------------------------------------------------------


def test_message_round_trip_and_version():
    msg = {"version": PROTOCOL_VERSION, "type": "step", "turn": 1}
    assert decode_message(encode_message(msg)) == msg
    with pytest.raises(ProtocolError):
        decode_message(encode_message({"version": "other/9"}))
    with pytest.raises(ProtocolError):
        decode_message(b"not json\n")


@pytest.fixture
def stream_pair():
    server_sock, client_sock = socket.socketpair()
    local = Environment(EnvConfig(seed=5))
    t = threading.Thread(
        target=serve_stream,
        args=(local, server_sock.makefile("rb"), server_sock.makefile("wb")),
        daemon=True,
    )
    t.start()
    transport = StreamTransport(client_sock.makefile("rb"), client_sock.makefile("wb"))
    yield transport
    client_sock.close()
    server_sock.close()


def test_remote_over_stream_matches_local(stream_pair):
    remote = RemoteEnvironment(EnvConfig(kind="remote", endpoint="tcp://unused:0"), stream_pair)
    local = Environment(EnvConfig(seed=5))
    for arm in [0, 3, 3, 7, 11]:
        r, l = remote.step(arm), local.step(arm)
        assert r.raw_dims == l.raw_dims
        assert r.reward == l.reward


def test_remote_stream_relays_errors(stream_pair):
    remote = RemoteEnvironment(EnvConfig(kind="remote", endpoint="tcp://unused:0", K=20), stream_pair)
    with pytest.raises(ProtocolError, match="remote environment error"):
        remote.step(15)


class _Canned:
    def __init__(self, reply):
        self.reply = reply
        self.sent = []

    def exchange(self, msg):
        self.sent.append(msg)
        return self.reply


def _remote(reply):
    return RemoteEnvironment(EnvConfig(kind="remote", endpoint="tcp://x:1"), _Canned(reply))


def test_remote_request_fields():
    reply = {"version": PROTOCOL_VERSION, "raw_dims": list(MAXIMA), "opponent_utterance": "hi",
             "done": False}
    env = _remote(reply)
    rec = env.step(2, persona_text="P\n\nD")
    assert rec.reward == 1.0
    assert env.transport.sent[0] == {
        "version": PROTOCOL_VERSION, "type": "step", "episode_id": "episode-0", "turn": 1,
        "agent_arm": 2, "augmented_persona_text": "P\n\nD",
    }


def test_remote_revalidates_ranges():
    reply = {"version": PROTOCOL_VERSION, "raw_dims": [11, 0, 0, 0, 0, 0, 0],
             "opponent_utterance": "", "done": False}
    with pytest.raises(DimensionOutOfRange):
        _remote(reply).step(0)


@pytest.mark.parametrize("reply", [
    {"raw_dims": [0] * 7, "done": False},
    {"raw_dims": [0] * 6, "opponent_utterance": "", "done": False},
    {"raw_dims": ["a"] * 7, "opponent_utterance": "", "done": False},
])
def test_remote_malformed_replies(reply):
    with pytest.raises(ProtocolError):
        _remote({"version": PROTOCOL_VERSION, **reply}).step(0)


def test_remote_done_ends_episode():
    reply = {"version": PROTOCOL_VERSION, "raw_dims": list(MINIMA), "opponent_utterance": "",
             "done": True}
    env = _remote(reply)
    env.step(0)
    with pytest.raises(EpisodeExhausted):
        env.step(0)


def test_remote_over_http():
    local = Environment(EnvConfig(seed=9))

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            msg = decode_message(self.rfile.read(int(self.headers["Content-Length"])))
            rec = local.step(msg["agent_arm"])
            body = encode_message({"version": PROTOCOL_VERSION, "raw_dims": list(rec.raw_dims),
                                   "opponent_utterance": rec.opponent_utterance, "done": False})
            self.send_response(200)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}/step"
        env = create_environment(EnvConfig(kind="remote", endpoint=url))
        assert isinstance(env.transport, HttpTransport)
        twin = Environment(EnvConfig(seed=9))
        for arm in (1, 2, 3):
            assert env.step(arm).reward == twin.step(arm).reward
    finally:
        server.shutdown()
        server.server_close()


def test_http_transport_failure():
    with pytest.raises(ProtocolError, match="transport"):
        HttpTransport("http://127.0.0.1:9/none", timeout=0.5).exchange({"version": PROTOCOL_VERSION})


@given(st.lists(st.floats(0, 1), min_size=7, max_size=7))
def test_normalize_in_unit_interval(unit):
    d = DIM_LOW + np.array(unit) * (DIM_HIGH - DIM_LOW)
    r = normalize_reward(d)
    assert 0.0 <= r <= 1.0
    assert json.loads(json.dumps(r)) == r
