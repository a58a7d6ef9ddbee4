"""Fixed-budget per-(layer, kv-head) key-value store with streaming statistics.

Every head keeps a ragged set of retained token positions plus the key/value
rows and importance accumulators aligned slot-for-slot. Eviction removes
whole slots (compacting, ascending position order preserved), so attention
kernels always see dense matrices. The budget invariant n <= B holds after
every public operation: callers evict BEFORE appending, never after.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import policies
from .errors import CacheFullError, ConfigurationError

__all__ = [
    "ImportanceStats",
    "BudgetSpec",
    "ResolvedBudget",
    "resolve_budget",
    "HeadCache",
    "CacheSet",
    "EvictionEvent",
    "stats_overhead",
]


class ImportanceStats:
    """Per-slot streaming accumulators backing every importance method.

    acc / acc_sq feed the mean and std, count is how many attention rows
    touched the slot (>= 1 once the token's own step ran), quant_acc counts
    rows where the slot was above the uniform 1/n level, and last is the most
    recent probability received.
    """

    __slots__ = ("acc", "acc_sq", "count", "quant_acc", "last")

    def __init__(self, n: int = 0):
        self.acc = np.zeros(n, dtype=np.float64)
        self.acc_sq = np.zeros(n, dtype=np.float64)
        self.count = np.zeros(n, dtype=np.int64)
        self.quant_acc = np.zeros(n, dtype=np.int64)
        self.last = np.zeros(n, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.acc.shape[0]

    def append_slot(self):
        """New slot with all-zero accumulators (populated by the same step's update)."""
        self.acc = np.append(self.acc, 0.0)
        self.acc_sq = np.append(self.acc_sq, 0.0)
        self.count = np.append(self.count, 0)
        self.quant_acc = np.append(self.quant_acc, 0)
        self.last = np.append(self.last, 0.0)

    def update(self, probs, *, skip_last: bool = False):
        """Fold one attention row into the accumulators.

        `skip_last` leaves the just-appended slot untouched by its own
        self-attention entry (the exclusion variant); the quantization
        threshold stays 1/n with n the full row length either way.
        """
        p = np.asarray(probs, dtype=np.float64).ravel()
        if p.shape[0] != self.n:
            raise ValueError(f"attention row has {p.shape[0]} entries, cache has {self.n} slots")
        if self.n == 0:
            return
        k = self.n - 1 if skip_last else self.n
        p = p[:k]
        self.acc[:k] += p
        self.acc_sq[:k] += p * p
        self.count[:k] += 1
        self.quant_acc[:k] += p > 1.0 / self.n
        self.last[:k] = p

    def remove(self, slots: np.ndarray):
        keep = np.ones(self.n, dtype=bool)
        keep[slots] = False
        self.acc = self.acc[keep]
        self.acc_sq = self.acc_sq[keep]
        self.count = self.count[keep]
        self.quant_acc = self.quant_acc[keep]
        self.last = self.last[keep]

    def snapshot(self) -> dict:
        return {
            "acc": self.acc.copy(),
            "acc_sq": self.acc_sq.copy(),
            "count": self.count.copy(),
            "quant_acc": self.quant_acc.copy(),
            "last": self.last.copy(),
        }


@dataclass(frozen=True)
class BudgetSpec:
    """Cache budget: either a prefill compression rate or a fixed token count.

    rate >= 1.0 means unconstrained (nothing is ever evicted). scope_size is
    an optional override for the policy's protected-region size r; left None
    it defaults to B//2 for window/top-std scopes.
    """

    rate: float | None = None
    tokens: int | None = None
    block_size: int = 1
    scope_size: int | None = None

    def __post_init__(self):
        if (self.rate is None) == (self.tokens is None):
            raise ConfigurationError("specify exactly one of rate / tokens")
        if self.rate is not None and self.rate <= 0:
            raise ConfigurationError("budget rate must be > 0")
        if self.tokens is not None and self.tokens < 1:
            raise ConfigurationError("token budget must be >= 1")
        if self.block_size < 1:
            raise ConfigurationError("block size must be >= 1")
        if self.scope_size is not None and self.scope_size < 0:
            raise ConfigurationError("scope size must be >= 0")


@dataclass(frozen=True)
class ResolvedBudget:
    budget: int
    scope_r: int
    block: int


def resolve_budget(spec: BudgetSpec | None, policy, length: int) -> ResolvedBudget | None:
    """Resolve a budget spec against a sequence length and a policy's scope.

    Returns None when the run is unconstrained (no spec, or rate >= 1.0).
    Fixed token budgets must leave room to evict a block outside the
    protected region (B >= protected + b); rate budgets are bumped up to the
    smallest feasible B instead, per B = max(ceil(rate*T), r + b).
    """
    if spec is None:
        return None
    b = spec.block_size
    scope = policy.scope
    explicit_r = scope.r if scope.r is not None else spec.scope_size
    parameterized = scope.kind in ("window", "topstd")
    fixed_protect = policies.SINK_SLOTS if scope.kind == "sink" else 0

    if spec.tokens is not None:
        budget = spec.tokens
        r = (explicit_r if explicit_r is not None else budget // 2) if parameterized else 0
        protected = r if parameterized else fixed_protect
        if budget < protected + b:
            raise ConfigurationError(
                f"budget B={budget} cannot fit protected scope {protected} plus block {b}"
            )
        return ResolvedBudget(budget, r, b)

    if spec.rate >= 1.0:
        return None
    base = max(math.ceil(spec.rate * length), 1)
    if parameterized:
        if explicit_r is not None:
            budget = max(base, explicit_r + b)
            r = explicit_r
        else:
            budget = max(base, 2 * b)
            r = budget // 2
    else:
        budget = max(base, fixed_protect + b)
        r = 0
    return ResolvedBudget(budget, r, b)


@dataclass(frozen=True)
class EvictionEvent:
    step: int
    layer: int
    kv_head: int
    positions: tuple


class HeadCache:
    """Retained keys/values and statistics for one (layer, kv-head)."""

    def __init__(self, head_dim: int, budget: int | None = None):
        self.head_dim = head_dim
        self.budget = budget
        self.positions = np.zeros(0, dtype=np.int64)
        self.keys = np.zeros((0, head_dim), dtype=np.float32)
        self.values = np.zeros((0, head_dim), dtype=np.float32)
        self.stats = ImportanceStats(0)
        self.peak_n = 0

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def append(self, pos: int, k=None, v=None):
        """Append one token's slot; the cache must not be full."""
        if self.budget is not None and self.n >= self.budget:
            raise CacheFullError(
                f"append at budget: n={self.n} B={self.budget} (evict first)"
            )
        if self.n and pos <= self.positions[-1]:
            raise ValueError(f"positions must be strictly increasing, got {pos} after {self.positions[-1]}")
        self.positions = np.append(self.positions, pos)
        if self.head_dim:
            self.keys = np.vstack([self.keys, np.asarray(k, dtype=np.float32).reshape(1, -1)])
            self.values = np.vstack([self.values, np.asarray(v, dtype=np.float32).reshape(1, -1)])
        self.stats.append_slot()
        self.peak_n = max(self.peak_n, self.n)

    def update_stats(self, probs, *, skip_last: bool = False):
        self.stats.update(probs, skip_last=skip_last)

    def evict(self, policy, how_many: int, *, step: int = 0, layer: int = 0, head: int = 0) -> np.ndarray:
        """Remove the `how_many` least-important slots inside the scope.

        Returns the evicted positions (ascending) for analysis.
        """
        candidates = policies.eviction_scope(policy.scope, self.positions, self.stats)
        if candidates.size < how_many:
            raise ConfigurationError(
                f"scope leaves {candidates.size} candidates, cannot evict {how_many}"
            )
        rng = None
        if policy.importance.kind == "random":
            rng = policies.event_rng(policy.seed, layer, head, step)
        scores = policies.importance_scores(self.stats, self.positions, policy.importance, rng=rng)
        victims = policies.select_victims(scores, candidates, how_many)
        evicted = self.positions[victims].copy()
        keep = np.ones(self.n, dtype=bool)
        keep[victims] = False
        self.positions = self.positions[keep]
        if self.head_dim:
            self.keys = self.keys[keep]
            self.values = self.values[keep]
        self.stats.remove(victims)
        return evicted

    def dump_line(self, layer: int, head: int) -> str:
        cells = " ".join(
            f"{int(p)}:{float(a)!r}:{float(sq)!r}:{int(c)}"
            for p, a, sq, c in zip(self.positions, self.stats.acc, self.stats.acc_sq, self.stats.count)
        )
        return f"{layer} {head} {cells}".rstrip()


class CacheSet:
    """All head caches of one sequence, sharing one budget.

    Heads fill in lockstep (every step appends to every head) but evict
    independently, so retained position sets diverge across heads.
    """

    def __init__(
        self,
        layers: int,
        query_heads: int,
        kv_heads: int,
        head_dim: int,
        budget: BudgetSpec | None = None,
        *,
        include_self: bool = True,
    ):
        if query_heads % kv_heads != 0:
            raise ConfigurationError(f"kv_heads {kv_heads} must divide query_heads {query_heads}")
        self.layers = layers
        self.query_heads = query_heads
        self.kv_heads = kv_heads
        self.head_dim = head_dim
        self.group_size = query_heads // kv_heads
        self.budget = budget
        self.include_self = include_self
        self.resolved: ResolvedBudget | None = None
        self.policy = None
        self.heads = {
            (l, h): HeadCache(head_dim) for l in range(layers) for h in range(kv_heads)
        }

    def head(self, layer: int, kv_head: int) -> HeadCache:
        return self.heads[(layer, kv_head)]

    def configure(self, resolved: ResolvedBudget | None, policy):
        """Bind the resolved budget (None = unconstrained) and policy for a run."""
        self.resolved = resolved
        self.policy = policy
        cap = resolved.budget if resolved is not None else None
        for cache in self.heads.values():
            cache.budget = cap

    def ensure_room(self, step: int) -> list[EvictionEvent]:
        """Evict one block from every full head before the next append."""
        if self.resolved is None:
            return []
        events = []
        for (l, h), cache in self.heads.items():
            if cache.n >= self.resolved.budget:
                evicted = cache.evict(
                    self.policy, self.resolved.block, step=step, layer=l, head=h
                )
                events.append(EvictionEvent(step, l, h, tuple(int(p) for p in evicted)))
        return events

    def update_stats(self, attention_rows):
        """Fold one step's per-query-head rows into each kv head's statistics.

        Rows within a kv group are averaged elementwise first (GQA/MQA); with
        group size 1 this is the identity.
        """
        g = self.group_size
        for l in range(self.layers):
            for kvh in range(self.kv_heads):
                rows = [attention_rows[(l, kvh * g + j)] for j in range(g)]
                avg = policies.group_average(rows) if g > 1 else rows[0]
                self.heads[(l, kvh)].update_stats(avg, skip_last=not self.include_self)

    @property
    def peak_n(self) -> int:
        return max(cache.peak_n for cache in self.heads.values())

    def dump(self) -> str:
        """One deterministic text line per head: layer, head, pos:acc:acc_sq:count."""
        return "\n".join(
            self.heads[(l, h)].dump_line(l, h)
            for l in range(self.layers)
            for h in range(self.kv_heads)
        )


def stats_overhead(layers: int, query_heads: int, kv_heads: int, budget: int) -> dict:
    """Float count of the (acc, acc_sq, count) arrays backing the std policy.

    Statistics live per kv head, so the honest figure is layers*kv_heads*B*3;
    the MHA-equivalent layers*query_heads*B*3 is reported alongside for
    comparison with multi-head configurations.
    """
    return {
        "per_kv_head_floats": layers * kv_heads * budget * 3,
        "mha_equivalent_floats": layers * query_heads * budget * 3,
    }
