"""Eviction policies as importance-score x eviction-scope compositions.

Importance methods score how much a cached token still matters (higher =
keep); scope methods pick which slots are even eligible for eviction. The
six canonical policies are fixed compositions of the two:

    random        random draw        + all slots
    streamllm     recency            + everything after 4 sink slots
    scissorhands  quantized acc. attention + outside local window of r
    h2o           accumulated attention    + outside local window of r
    tova          last-token attention     + all slots
    roco          mean attention score     + outside the top-r attention-std set

All functions are pure; cache state is owned by the caller.
"""

import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError

IMPORTANCE_KINDS = ("random", "recency", "aas", "aqas", "ltas", "mas")
SCOPE_KINDS = ("all", "window", "sink", "topstd")

# StreamLLM keeps this many initial attention-sink slots out of reach.
SINK_SLOTS = 4


@dataclass(frozen=True)
class ImportanceMethod:
    kind: str

    def __post_init__(self):
        if self.kind not in IMPORTANCE_KINDS:
            raise ConfigurationError(f"unknown importance method {self.kind!r}")


@dataclass(frozen=True)
class ScopeMethod:
    kind: str
    r: int | None = None  # None = resolve to B//2 when the budget is known

    def __post_init__(self):
        if self.kind not in SCOPE_KINDS:
            raise ConfigurationError(f"unknown scope method {self.kind!r}")
        if self.r is not None and self.r < 0:
            raise ConfigurationError("scope size r must be >= 0")


@dataclass(frozen=True)
class Policy:
    name: str
    importance: ImportanceMethod
    scope: ScopeMethod
    seed: int = 0


_CANONICAL = {
    "random": ("random", "all"),
    "streamllm": ("recency", "sink"),
    "scissorhands": ("aqas", "window"),
    "h2o": ("aas", "window"),
    "tova": ("ltas", "all"),
    "roco": ("mas", "topstd"),
}

_SCOPE_ALIASES = {"all": "all", "sink": "sink", "window": "window", "std": "topstd", "topstd": "topstd"}

_SCOPE_RE = re.compile(r"^([a-z]+)(?:\((\d+)\))?$")


def canonical_policy_names() -> tuple[str, ...]:
    return tuple(_CANONICAL)


def policy_from_name(name: str, *, seed: int = 0, window: int | None = None) -> Policy:
    """Build a Policy from a canonical name or an "importance+scope" string.

    Custom compositions look like "mas+window(8)" or "aas+all"; omitting the
    scope size (e.g. "mas+std") defers it to the B//2 default. An explicit
    `window` argument overrides the scope size for parameterized scopes.
    """
    key = name.strip().lower()
    if key in _CANONICAL:
        imp_kind, scope_kind = _CANONICAL[key]
        return Policy(key, ImportanceMethod(imp_kind), ScopeMethod(scope_kind, window), seed)
    if "+" not in key:
        raise ConfigurationError(
            f"unknown policy {name!r}; expected one of {', '.join(_CANONICAL)} "
            f"or an 'importance+scope' composition like 'mas+window(8)'"
        )
    imp_part, scope_part = key.split("+", 1)
    if imp_part not in IMPORTANCE_KINDS:
        raise ConfigurationError(f"unknown importance method {imp_part!r} in policy {name!r}")
    m = _SCOPE_RE.match(scope_part)
    if not m or m.group(1) not in _SCOPE_ALIASES:
        raise ConfigurationError(f"unknown scope {scope_part!r} in policy {name!r}")
    scope_kind = _SCOPE_ALIASES[m.group(1)]
    r = int(m.group(2)) if m.group(2) is not None else None
    if window is not None:
        r = window
    return Policy(key, ImportanceMethod(imp_part), ScopeMethod(scope_kind, r), seed)


def with_resolved_scope(policy: Policy, r: int) -> Policy:
    """Fill in the default scope size once the budget is known."""
    if policy.scope.kind in ("window", "topstd") and policy.scope.r is None:
        return replace(policy, scope=replace(policy.scope, r=r))
    return policy


def protected_size(scope: ScopeMethod) -> int:
    """Number of slots a full cache keeps out of the eviction scope."""
    if scope.kind == "all":
        return 0
    if scope.kind == "sink":
        return SINK_SLOTS
    if scope.r is None:
        raise ConfigurationError(f"scope {scope.kind} has no resolved size r")
    return scope.r


def event_rng(seed: int, layer: int, head: int, step: int) -> np.random.Generator:
    """Per-eviction-event generator; replayable from (seed, layer, head, step)."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, layer, head, step])


def importance_scores(stats, positions, method: ImportanceMethod, *, rng=None) -> np.ndarray:
    """Per-slot importance (higher = more important, evicted last)."""
    n = len(positions)
    if stats.n != n or n < 1:
        raise ValueError(f"stats cover {stats.n} slots but {n} positions given")
    kind = method.kind
    if kind == "random":
        if rng is None:
            raise ValueError("random importance needs an eviction-event rng")
        return rng.random(n)
    if kind == "recency":
        return np.asarray(positions, dtype=np.float64)
    if kind == "aas":
        return np.asarray(stats.acc, dtype=np.float64)
    if kind == "aqas":
        return np.asarray(stats.quant_acc, dtype=np.float64)
    if kind == "ltas":
        return np.asarray(stats.last, dtype=np.float64)
    # mas: accumulated score normalized by how often the slot was attended
    return np.asarray(stats.acc, dtype=np.float64) / np.maximum(stats.count, 1)


def std_scores(stats) -> np.ndarray:
    """Streaming standard deviation sqrt(E[x^2] - E[x]^2) per slot.

    Rounding can push the radicand slightly negative; clamp to zero.
    """
    cnt = np.maximum(stats.count, 1)
    mean = stats.acc / cnt
    var = stats.acc_sq / cnt - mean * mean
    return np.sqrt(np.maximum(var, 0.0))


def eviction_scope(scope: ScopeMethod, positions, stats) -> np.ndarray:
    """Slot indices eligible for eviction (ascending)."""
    n = len(positions)
    if n < 1:
        raise ValueError("eviction_scope: empty cache")
    if scope.kind == "all":
        return np.arange(n)
    if scope.kind == "sink":
        if n <= SINK_SLOTS:
            raise ConfigurationError(f"sink scope leaves no candidates (n={n} <= {SINK_SLOTS} sinks)")
        return np.arange(SINK_SLOTS, n)
    if scope.r is None:
        raise ConfigurationError(f"scope {scope.kind} has no resolved size r")
    if scope.kind == "window":
        if scope.r >= n:
            raise ConfigurationError(f"local window r={scope.r} covers the whole cache (n={n})")
        return np.arange(n - scope.r)
    # topstd: protect the r slots with the largest std; ties protect the more
    # recent slot (slots are stored in ascending position order).
    if scope.r == 0:
        return np.arange(n)
    stds = std_scores(stats)
    order = np.lexsort((-np.arange(n), -stds))  # std desc, then recency desc
    excluded = order[: min(scope.r, n)]
    candidates = np.setdiff1d(np.arange(n), excluded)
    if candidates.size == 0:
        raise ConfigurationError(f"top-std scope r={scope.r} covers the whole cache (n={n})")
    return candidates


def select_victims(scores, candidates, how_many: int) -> np.ndarray:
    """The `how_many` lowest-scoring candidates; ties evict the older slot."""
    if how_many < 1:
        raise ValueError("how_many must be >= 1")
    cand = np.asarray(candidates)
    if cand.size < how_many:
        raise ConfigurationError(
            f"eviction scope has {cand.size} candidates, need {how_many}"
        )
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((cand, scores[cand]))  # score asc, then slot (age) asc
    return np.sort(cand[order[:how_many]])


def group_average(rows) -> np.ndarray:
    """Elementwise mean of the g query-head rows sharing one kv head."""
    rows = [np.asarray(r, dtype=np.float32) for r in rows]
    if not rows:
        raise ValueError("group_average: no rows")
    width = rows[0].shape
    if any(r.shape != width for r in rows):
        raise ValueError("group_average: ragged rows")
    stacked = np.stack(rows).astype(np.float64)
    return np.mean(stacked, axis=0).astype(np.float32)
