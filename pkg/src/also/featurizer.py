"""Frozen text featurizer: arm embeddings, context vectors, surrogate inputs.

The synthetic provider hashes unigram and bigram tokens; every token owns a
pseudo-random +-1 vector derived from (seed, token), which is equivalent to
multiplying the hashed bag-of-features by a seeded sign matrix. The sum is
L2-normalized.

The remote provider speaks a small JSON protocol over HTTP POST::

    request   {"model": "<optional>", "input": ["text", ...]}
    response  {"vectors": [[float, ...], ...]}
"""

from __future__ import annotations

import hashlib
import json
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmbeddingError
from .strategy_space import Persona, StrategyPool, augment_persona

_TOKEN = re.compile(r"\w+", re.UNICODE)


@dataclass
class EmbeddingProvider:
    kind: str = "synthetic"
    dim: int = 64
    seed: int = 0
    endpoint: str | None = None
    model: str | None = None
    timeout: float = 30.0
    retries: int = 2
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    calls: int = field(default=0, repr=False, compare=False)  # HTTP requests incl. retries
    texts_embedded: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("synthetic", "remote"):
            raise EmbeddingError(f"unknown provider kind {self.kind!r}")
        if int(self.dim) < 1:
            raise EmbeddingError("dim must be >= 1")
        if self.kind == "remote" and not self.endpoint:
            raise EmbeddingError("remote provider requires an endpoint")

    def identity(self) -> dict:
        if self.kind == "synthetic":
            return {"kind": "synthetic", "dim": self.dim, "seed": self.seed}
        return {"kind": "remote", "dim": self.dim, "endpoint": self.endpoint, "model": self.model}


def tokenize(text: str) -> list[str]:
    tokens = _TOKEN.findall(text.lower())
    if not tokens and text.strip():
        tokens = [c for c in text if not c.isspace()]
    return tokens


def _features(tokens):
    feats = list(tokens)
    feats += [a + " " + b for a, b in zip(tokens, tokens[1:])]
    return feats


def _sign_vector(provider: EmbeddingProvider, feature: str) -> np.ndarray:
    vec = provider._cache.get(feature)
    if vec is None:
        digest = hashlib.blake2b(
            f"{provider.seed}\x00{feature}".encode(), digest_size=8
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        vec = rng.integers(0, 2, size=provider.dim).astype(np.float64) * 2.0 - 1.0
        vec.setflags(write=False)
        provider._cache[feature] = vec
    return vec


def _synthetic_embed(provider: EmbeddingProvider, text: str) -> np.ndarray:
    out = np.zeros(provider.dim)
    if not text:
        return out
    for feat in _features(tokenize(text)):
        out += _sign_vector(provider, feat)
    norm = np.linalg.norm(out)
    if norm > 0:
        out /= norm
    return out


def _post_json(url, payload, timeout):
    body = json.dumps(payload).encode()
    req = urllib.request.Request(
        url, data=body, headers={"Content-Type": "application/json"}, method="POST"
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode())


def _remote_embed(provider: EmbeddingProvider, texts: list[str]) -> np.ndarray:
    payload = {"input": list(texts)}
    if provider.model:
        payload["model"] = provider.model
    last_exc = None
    for attempt in range(provider.retries + 1):
        try:
            provider.calls += 1
            data = _post_json(provider.endpoint, payload, provider.timeout)
            break
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last_exc = exc
            if attempt < provider.retries:
                time.sleep(min(0.05 * 2**attempt, 1.0))
        except ValueError as exc:
            raise EmbeddingError(f"response is not valid JSON: {exc}") from None
    else:
        raise EmbeddingError(f"transport failure: {last_exc}")

    if not isinstance(data, dict) or not isinstance(data.get("vectors"), list):
        raise EmbeddingError("response lacks a 'vectors' list")
    vectors = data["vectors"]
    if len(vectors) != len(texts):
        raise EmbeddingError(f"expected {len(texts)} vectors, got {len(vectors)}")
    try:
        arr = np.asarray(vectors, dtype=np.float64)
    except (TypeError, ValueError):
        raise EmbeddingError("vectors are not numeric") from None
    if arr.ndim != 2 or arr.shape[1] != provider.dim:
        raise EmbeddingError(
            f"dimension mismatch: configured {provider.dim}, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise EmbeddingError("response contains non-finite values")
    return arr


def embed_texts(provider: EmbeddingProvider, texts: list[str]) -> np.ndarray:
    """Embed a batch; rows follow ``texts``. Empty strings map to zeros."""
    out = np.zeros((len(texts), provider.dim))
    provider.texts_embedded += len(texts)
    if provider.kind == "synthetic":
        for i, t in enumerate(texts):
            out[i] = _synthetic_embed(provider, t)
        return out
    todo = [i for i, t in enumerate(texts) if t]
    if todo:
        out[todo] = _remote_embed(provider, [texts[i] for i in todo])
    return out


def embed_text(provider: EmbeddingProvider, text: str) -> np.ndarray:
    return embed_texts(provider, [text])[0]


@dataclass(frozen=True)
class ArmEmbeddingTable:
    embeddings: np.ndarray  # (K, dim), read-only
    pool_hash: str

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def table_hash(provider, base: Persona, pool: StrategyPool) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(provider.identity(), sort_keys=True).encode())
    h.update(base.text.encode())
    h.update(pool.digest().encode())
    return h.hexdigest()


def precompute_arm_embeddings(provider, base: Persona, pool: StrategyPool) -> ArmEmbeddingTable:
    if len(pool) == 0:
        raise EmbeddingError("pool is empty")
    texts = [augment_persona(base, s).text for s in pool]
    if provider.kind == "synthetic":
        emb = embed_texts(provider, texts)
    else:
        # one request per arm so a failure can name its arm
        emb = np.zeros((len(texts), provider.dim))
        for k, t in enumerate(texts):
            try:
                emb[k] = embed_text(provider, t)
            except EmbeddingError as exc:
                raise EmbeddingError(str(exc), arm_index=k) from None
    emb.setflags(write=False)
    return ArmEmbeddingTable(embeddings=emb, pool_hash=table_hash(provider, base, pool))


def serialize_history(history, max_turns: int | None = None) -> str:
    """Render turns as ``speaker: utterance`` lines, oldest first."""
    records = list(history)
    if max_turns is not None:
        records = records[-max_turns:] if max_turns > 0 else []
    lines = []
    for rec in records:
        lines.append(f"agent: {rec.agent_utterance}")
        lines.append(f"opponent: {rec.opponent_utterance}")
    return "\n".join(lines)


def encode_context(provider, history, max_turns: int | None = None) -> np.ndarray:
    return embed_text(provider, serialize_history(history, max_turns))


def build_features(table: ArmEmbeddingTable, context: np.ndarray) -> np.ndarray:
    """Stack x_k = [b_k; c] for every arm, one row per arm."""
    context = np.asarray(context, dtype=np.float64)
    if context.ndim != 1:
        raise DimensionMismatch("context must be a 1-D vector")
    if context.shape[0] != table.dim:
        raise DimensionMismatch(
            f"context dim {context.shape[0]} != arm embedding dim {table.dim}"
        )
    tiled = np.broadcast_to(context, (table.K, context.shape[0]))
    return np.hstack([table.embeddings, tiled])
