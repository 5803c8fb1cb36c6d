import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from also.environment import TurnRecord
from also.errors import DimensionMismatch, EmbeddingError
from also.featurizer import (
    EmbeddingProvider,
    build_features,
    embed_text,
    embed_texts,
    encode_context,
    precompute_arm_embeddings,
    serialize_history,
)
from also.strategy_space import DEFAULT_PERSONA, Persona, Strategy, StrategyPool, load_pool


def _rec(turn, agent, opp):
    return TurnRecord(turn, 0, None, agent, opp, (5.0, 0.0, 5.0, -5.0, -5.0, 0.0, 5.0), 0.5)


@pytest.fixture
def provider():
    return EmbeddingProvider(dim=64, seed=0)


def test_empty_text_is_zero_vector(provider):
    v = embed_text(provider, "")
    assert v.shape == (64,)
    assert not v.any()


def test_same_text_same_vector(provider):
    a = embed_text(provider, "hold firm on price")
    b = embed_text(EmbeddingProvider(dim=64, seed=0), "hold firm on price")
    assert np.array_equal(a, b)


def test_single_letters_differ():
    p = EmbeddingProvider(dim=8, seed=0)
    assert np.any(embed_text(p, "a") != embed_text(p, "b"))


def test_seed_changes_projection():
    a = embed_text(EmbeddingProvider(seed=0), "offer a concession")
    b = embed_text(EmbeddingProvider(seed=1), "offer a concession")
    assert not np.array_equal(a, b)


@given(st.text(min_size=1, max_size=80).filter(lambda t: t.strip()))
def test_nonempty_text_is_unit_norm(text):
    v = embed_text(EmbeddingProvider(dim=32, seed=3), text)
    assert np.isfinite(v).all()
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


def test_default_dims_and_full_dim():
    pool = load_pool()
    table = precompute_arm_embeddings(EmbeddingProvider(dim=4096), DEFAULT_PERSONA, pool)
    assert table.embeddings.shape == (12, 4096)
    assert EmbeddingProvider().dim == 64


def test_identical_descriptions_identical_embeddings(provider):
    pool = StrategyPool((
        Strategy("a", "Cooperative", "Share interests openly."),
        Strategy("b", "Rational", "Share interests openly."),
    ))
    table = precompute_arm_embeddings(provider, DEFAULT_PERSONA, pool)
    assert np.array_equal(table.embeddings[0], table.embeddings[1])


def test_table_recompute_is_identical(provider):
    pool = load_pool()
    t1 = precompute_arm_embeddings(provider, DEFAULT_PERSONA, pool)
    t2 = precompute_arm_embeddings(EmbeddingProvider(dim=64, seed=0), DEFAULT_PERSONA, pool)
    assert t1.embeddings.tobytes() == t2.embeddings.tobytes()
    assert t1.pool_hash == t2.pool_hash
    t3 = precompute_arm_embeddings(provider, Persona("Another persona."), pool)
    assert t3.pool_hash != t1.pool_hash


def test_table_is_read_only(provider):
    table = precompute_arm_embeddings(provider, DEFAULT_PERSONA, load_pool())
    with pytest.raises(ValueError):
        table.embeddings[0, 0] = 1.0


def test_context_empty_history_is_zero(provider):
    assert not encode_context(provider, []).any()


def test_context_one_turn_nonzero(provider):
    assert np.linalg.norm(encode_context(provider, [_rec(1, "grit", "stance-0")])) > 0


def test_context_order_matters(provider):
    h = [_rec(1, "grit", "stance-0"), _rec(2, "face_saving", "stance-1")]
    assert not np.array_equal(encode_context(provider, h), encode_context(provider, h[::-1]))


def test_history_serialization_and_window():
    h = [_rec(1, "grit", "stance-0"), _rec(2, "logrolling", "stance-3")]
    assert serialize_history(h) == (
        "agent: grit\nopponent: stance-0\nagent: logrolling\nopponent: stance-3"
    )
    assert serialize_history(h, max_turns=1) == "agent: logrolling\nopponent: stance-3"
    assert serialize_history(h, max_turns=0) == ""


def test_build_features_layout(provider):
    pool = load_pool()
    table = precompute_arm_embeddings(provider, DEFAULT_PERSONA, pool)
    c = encode_context(provider, [_rec(1, "grit", "stance-2")])
    X = build_features(table, c)
    assert X.shape == (12, 128)
    for k in range(12):
        assert np.array_equal(X[k, :64], table.embeddings[k])
        assert np.array_equal(X[k, 64:], c)


def test_build_features_zero_context_and_small_table(provider):
    pool = StrategyPool(tuple(Strategy(f"s{i}", "Strategic", f"Move number {i}.") for i in range(3)))
    table = precompute_arm_embeddings(provider, DEFAULT_PERSONA, pool)
    X = build_features(table, np.zeros(64))
    assert X.shape[0] == 3
    assert not np.array_equal(X[0], X[1])


def test_full_dim_concatenation():
    pool = StrategyPool((Strategy("s", "Strategic", "Move."),))
    table = precompute_arm_embeddings(EmbeddingProvider(dim=4096), DEFAULT_PERSONA, pool)
    assert build_features(table, np.zeros(4096)).shape == (1, 8192)


def test_build_features_dim_mismatch(provider):
    table = precompute_arm_embeddings(provider, DEFAULT_PERSONA, load_pool())
    with pytest.raises(DimensionMismatch):
        build_features(table, np.zeros(32))


def test_provider_validation():
    with pytest.raises(EmbeddingError):
        EmbeddingProvider(kind="remote")
    with pytest.raises(EmbeddingError):
        EmbeddingProvider(dim=0)


def test_calls_are_counted(provider):
    embed_texts(provider, ["a", "b", ""])
    assert provider.texts_embedded == 3


# -- remote provider -------------------------------------------------------------


class _EmbedHandler(BaseHTTPRequestHandler):
    mode = "ok"
    dim = 8
    hits = 0

    def do_POST(self):
        type(self).hits += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        n = len(body["input"])
        if self.mode == "ok":
            vecs = [[float(len(t) + i) for i in range(self.dim)] for t in body["input"]]
            payload = {"vectors": vecs}
        elif self.mode == "wrong_dim":
            payload = {"vectors": [[1.0] * (self.dim + 1)] * n}
        elif self.mode == "nan":
            payload = {"vectors": [[float("nan")] * self.dim] * n}
        else:
            payload = {"nothing": True}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def embed_server():
    server = HTTPServer(("127.0.0.1", 0), _EmbedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _EmbedHandler.mode = "ok"
    _EmbedHandler.hits = 0
    yield f"http://127.0.0.1:{server.server_address[1]}/embed"
    server.shutdown()
    server.server_close()


def test_remote_embedding(embed_server):
    p = EmbeddingProvider(kind="remote", dim=8, endpoint=embed_server)
    v = embed_text(p, "abc")
    assert v.tolist() == [3.0 + i for i in range(8)]
    assert not embed_text(p, "").any()


@pytest.mark.parametrize("mode", ["wrong_dim", "nan", "garbage"])
def test_remote_bad_responses(embed_server, mode):
    _EmbedHandler.mode = mode
    p = EmbeddingProvider(kind="remote", dim=8, endpoint=embed_server)
    with pytest.raises(EmbeddingError):
        embed_text(p, "hello")


def test_remote_error_carries_arm_index(embed_server):
    _EmbedHandler.mode = "nan"
    p = EmbeddingProvider(kind="remote", dim=8, endpoint=embed_server)
    with pytest.raises(EmbeddingError) as info:
        precompute_arm_embeddings(p, DEFAULT_PERSONA, load_pool())
    assert info.value.arm_index == 0


def test_remote_transport_failure_retries():
    p = EmbeddingProvider(kind="remote", dim=8, endpoint="http://127.0.0.1:9/none",
                          retries=1, timeout=0.5)
    with pytest.raises(EmbeddingError, match="transport"):
        embed_text(p, "x")
    assert p.calls == 2
