"""Strategy arms, personas, and the pool file format.

A pool file is JSON Lines, one strategy per line::

    {"id": "grit", "category": "Reciprocation", "description": "...", "origin": "base"}

Blank lines and lines starting with ``#`` are skipped. Arm index is the
record's position in the file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import DuplicateId, PoolError

CATEGORIES = (
    "Cooperative",
    "Competitive",
    "Strategic",
    "Rational",
    "Reciprocation",
    "Exploratory",
)
ORIGINS = ("base", "paraphrase")
SEPARATOR = "\n\n"


@dataclass(frozen=True)
class Strategy:
    id: str
    category: str
    description: str
    origin: str = "base"

    def __post_init__(self):
        if not self.id:
            raise PoolError("strategy id must be non-empty")
        if not self.description:
            raise PoolError(f"strategy {self.id!r}: empty description")
        if self.category not in CATEGORIES:
            raise PoolError(f"strategy {self.id!r}: unknown category {self.category!r}")
        if self.origin not in ORIGINS:
            raise PoolError(f"strategy {self.id!r}: unknown origin {self.origin!r}")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "description": self.description,
            "origin": self.origin,
        }


@dataclass(frozen=True)
class Persona:
    text: str
    agent_id: str = "agent"

    def __post_init__(self):
        if not self.text:
            raise PoolError("persona text must be non-empty")


@dataclass(frozen=True)
class AugmentedPersona:
    base: Persona
    strategy_id: str
    text: str


@dataclass(frozen=True)
class StrategyPool:
    """Ordered, immutable collection of strategies."""

    strategies: tuple[Strategy, ...]

    def __post_init__(self):
        seen = set()
        for s in self.strategies:
            if s.id in seen:
                raise DuplicateId(f"duplicate strategy id {s.id!r}")
            seen.add(s.id)

    @property
    def K(self) -> int:
        return len(self.strategies)

    def __len__(self):
        return len(self.strategies)

    def __getitem__(self, index) -> Strategy:
        return self.strategies[index]

    def __iter__(self):
        return iter(self.strategies)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.strategies]

    def index_of(self, strategy_id: str) -> int:
        return self.ids.index(strategy_id)

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.strategies:
            h.update(json.dumps(s.to_record(), sort_keys=True).encode())
            h.update(b"\n")
        return h.hexdigest()


def default_pool_path() -> Path:
    return Path(str(resources.files("also") / "data" / "default_pool.jsonl"))


def parse_pool(text: str, source: str = "<string>") -> StrategyPool:
    strategies = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise PoolError(f"{source}:{lineno}: malformed record ({exc.msg})") from None
        if not isinstance(record, dict):
            raise PoolError(f"{source}:{lineno}: record must be an object")
        missing = {"id", "category", "description"} - record.keys()
        if missing:
            raise PoolError(f"{source}:{lineno}: missing fields {sorted(missing)}")
        try:
            strategies.append(
                Strategy(
                    id=str(record["id"]),
                    category=record["category"],
                    description=record["description"],
                    origin=record.get("origin", "base"),
                )
            )
        except DuplicateId:
            raise
        except PoolError as exc:
            raise PoolError(f"{source}:{lineno}: {exc}") from None
    if not strategies:
        raise PoolError(f"{source}: pool is empty")
    return StrategyPool(tuple(strategies))


def load_pool(path=None) -> StrategyPool:
    """Load a pool file; ``None`` loads the bundled 12-strategy pool."""
    path = default_pool_path() if path is None else Path(path)
    if not path.exists():
        raise PoolError(f"pool file not found: {path}")
    return parse_pool(path.read_text(encoding="utf-8"), source=str(path))


def dump_pool(pool: StrategyPool) -> str:
    return "".join(json.dumps(s.to_record(), ensure_ascii=False) + "\n" for s in pool)


def augment_persona(base: Persona, strategy: Strategy) -> AugmentedPersona:
    return AugmentedPersona(
        base=base,
        strategy_id=strategy.id,
        text=base.text + SEPARATOR + strategy.description,
    )


def append_strategy(pool: StrategyPool, strategy: Strategy) -> StrategyPool:
    """Return a new pool with ``strategy`` appended as the last arm."""
    if strategy.id in pool.ids:
        raise DuplicateId(f"duplicate strategy id {strategy.id!r}")
    return StrategyPool(pool.strategies + (strategy,))


DEFAULT_PERSONA = Persona(
    text=(
        "You are a pragmatic negotiator who values fair outcomes and long-term "
        "relationships, speaks plainly, and keeps private information private."
    ),
    agent_id="agent",
)
