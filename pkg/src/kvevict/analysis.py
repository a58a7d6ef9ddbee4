"""Experiment harness: consistency, std trajectories, scope sweeps, perplexity.

The consistency protocol compares, at every token position, the top-B token
set implied by a scoring method's constrained (replayed) statistics against
the top-B set the same method derives from full-cache statistics, reporting
Jaccard similarity averaged over positions, heads, and layers. Text-quality
metrics are deliberately absent; at this scale the desk proxy for generation
quality is token-level agreement with the full-cache generation.
"""

import math
import os
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from . import policies
from .errors import ConfigurationError
from .kv_cache import BudgetSpec, CacheSet, resolve_budget
from .policies import Policy, policy_from_name
from .toy_model import forward_step
from .trace_io import AttentionTrace, replay

__all__ = [
    "jaccard",
    "ConsistencyCell",
    "ConsistencyReport",
    "consistency_experiment",
    "std_trajectory",
    "perplexity",
    "ScopeSweepReport",
    "scope_sweep",
    "generation_agreement",
    "CSV_COLUMNS",
    "write_csv",
]

CSV_COLUMNS = ("experiment", "method", "budget", "r", "b", "seed", "metric", "value")

# Salts so the random-importance control draws independent streams on the
# local and global sides instead of sharing the per-event stream replay uses.
_GLOBAL_RANDOM_SALT = 0x5EED
_LOCAL_RANDOM_SALT = 0x10CA1


def jaccard(a, b) -> float:
    """|a & b| / |a | b| over position sets; two empty sets count as 1.0."""
    a = np.unique(np.asarray(a, dtype=np.int64))
    b = np.unique(np.asarray(b, dtype=np.int64))
    union = a.size + b.size - np.intersect1d(a, b, assume_unique=True).size
    if union == 0:
        return 1.0
    return np.intersect1d(a, b, assume_unique=True).size / union


class _StatsView:
    """Array-slice adapter matching the ImportanceStats attribute surface."""

    __slots__ = ("acc", "acc_sq", "count", "quant_acc", "last")

    def __init__(self, acc, acc_sq, count, quant_acc, last):
        self.acc = acc
        self.acc_sq = acc_sq
        self.count = count
        self.quant_acc = quant_acc
        self.last = last

    @property
    def n(self):
        return self.acc.shape[0]


@dataclass
class ConsistencyCell:
    method: str
    budget: float
    mean: float
    curve: np.ndarray  # per-position mean over heads and layers


@dataclass
class ConsistencyReport:
    steps: int
    layers: int
    query_heads: int
    kv_heads: int
    cells: list


def _local_policy(method: str, seed: int) -> Policy:
    return policy_from_name(f"{method}+all", seed=seed)


def _ranking_budget(spec, t: int) -> int:
    """Top-k size at position t: rate budgets resolve against the tokens seen
    so far (ceil(rate * (t+1))), fixed budgets cap at the token count."""
    if spec is None:
        return t + 1
    if spec.rate is not None:
        return min(math.ceil(min(spec.rate, 1.0) * (t + 1)), t + 1)
    return min(spec.tokens, t + 1)


def _consistency_core(trace: AttentionTrace, jobs, *, seed: int, include_self: bool = True):
    """Shared engine: jobs are (label, local_policy, budget_spec, global_method).

    Local side: after each replay step, retained slots are ranked by the
    job's importance method on the constrained streaming statistics and the
    top-k taken. Global side: the same method ranks all positions on
    full-cache statistics. Returns {label: (mean, curve)} where curve is the
    per-position mean over layers x kv heads (identical to the per-query-head
    mean, since every query head in a group shares its kv head's statistics).
    """
    hdr = trace.header
    T, L, Hkv = hdr.steps, hdr.layers, hdr.kv_heads
    g = hdr.query_heads // hdr.kv_heads

    runs = {}
    for label, local_policy, spec, global_method in jobs:
        tops: list = []
        method = local_policy.importance

        def hook(t, caches, _tops=tops, _spec=spec, _method=method):
            k = _ranking_budget(_spec, t)
            entry = {}
            for (l, kvh), cache in caches.heads.items():
                rng = None
                if _method.kind == "random":
                    rng = policies.event_rng(seed + _LOCAL_RANDOM_SALT, l, kvh, t)
                scores = policies.importance_scores(cache.stats, cache.positions, _method, rng=rng)
                order = np.lexsort((-np.arange(cache.n), -scores))
                entry[(l, kvh)] = np.sort(cache.positions[order[: min(k, cache.n)]])
            _tops.append(entry)

        replay(trace, local_policy, spec, include_self=include_self, on_step=hook)
        runs[label] = (tops, spec, global_method)

    global_methods = sorted({job[3] for job in jobs})
    acc = np.zeros((L, Hkv, T))
    acc_sq = np.zeros((L, Hkv, T))
    count = np.zeros((L, Hkv, T), dtype=np.int64)
    quant = np.zeros((L, Hkv, T), dtype=np.int64)
    last = np.zeros((L, Hkv, T))
    sums = {label: np.zeros(T) for label in runs}

    for t in range(T):
        for l in range(L):
            for kvh in range(Hkv):
                rows = []
                for j in range(g):
                    positions, probs = trace.rows[t][l][kvh * g + j]
                    if positions.shape[0] != t + 1:
                        raise ValueError(
                            "consistency needs a full-cache trace; "
                            f"record (step={t}, layer={l}, head={kvh * g + j}) "
                            f"covers {positions.shape[0]} of {t + 1} positions"
                        )
                    rows.append(probs)
                row = policies.group_average(rows) if g > 1 else rows[0]
                p = row.astype(np.float64)
                upto = t if not include_self else t + 1
                acc[l, kvh, :upto] += p[:upto]
                acc_sq[l, kvh, :upto] += p[:upto] * p[:upto]
                count[l, kvh, :upto] += 1
                quant[l, kvh, :upto] += p[:upto] > 1.0 / (t + 1)
                last[l, kvh, :upto] = p[:upto]

                view = _StatsView(
                    acc[l, kvh, : t + 1],
                    acc_sq[l, kvh, : t + 1],
                    count[l, kvh, : t + 1],
                    quant[l, kvh, : t + 1],
                    last[l, kvh, : t + 1],
                )
                orders = {}
                for m in global_methods:
                    rng = None
                    if m == "random":
                        rng = policies.event_rng(seed + _GLOBAL_RANDOM_SALT, l, kvh, t)
                    scores = policies.importance_scores(
                        view, np.arange(t + 1), policies.ImportanceMethod(m), rng=rng
                    )
                    # score desc, ties keep the more recent position
                    orders[m] = np.lexsort((-np.arange(t + 1), -scores))
                for label, (tops, spec, m) in runs.items():
                    top = np.sort(orders[m][: _ranking_budget(spec, t)])
                    kept = tops[t][(l, kvh)]
                    inter = np.intersect1d(top, kept, assume_unique=True).size
                    union = top.size + kept.size - inter
                    sums[label][t] += inter / union if union else 1.0
    heads_total = L * Hkv
    return {label: (float(s.sum() / (T * heads_total)), s / heads_total) for label, s in sums.items()}


def consistency_experiment(
    trace: AttentionTrace,
    budgets,
    methods,
    *,
    seed: int = 0,
    include_self: bool = True,
) -> ConsistencyReport:
    """Per-(budget, method) Jaccard consistency, scope size r fixed at 0.

    Budgets are cache rates in (0, 1]; the per-position cache size is
    min(ceil(rate * steps), t + 1).
    """
    hdr = trace.header
    jobs = []
    for rate in budgets:
        budget_tokens = math.ceil(rate * hdr.steps)
        if budget_tokens < 1:
            warnings.warn(f"budget {rate} resolves below one token, skipped")
            continue
        for m in methods:
            jobs.append(((m, rate), _local_policy(m, seed), BudgetSpec(rate=rate), m))
    results = _consistency_core(trace, jobs, seed=seed, include_self=include_self)
    cells = [
        ConsistencyCell(method=m, budget=rate, mean=results[(m, rate)][0], curve=results[(m, rate)][1])
        for (m, rate) in results
    ]
    return ConsistencyReport(hdr.steps, hdr.layers, hdr.query_heads, hdr.kv_heads, cells)


def std_trajectory(trace: AttentionTrace, position: int, layer: int = 0, head: int = 0):
    """Running std of the attention a token receives, after each later step.

    Emitted per recorded step that still contains the position (the token's
    own step included), using the streaming formula over the prefix so far.
    """
    hdr = trace.header
    if not 0 <= position < hdr.steps:
        raise ValueError(f"position {position} outside trace of {hdr.steps} steps")
    acc = acc_sq = 0.0
    cnt = 0
    out = []
    for t in range(position, hdr.steps):
        positions, probs = trace.rows[t][layer][head]
        i = int(np.searchsorted(positions, position))
        if i >= len(positions) or positions[i] != position:
            continue
        p = float(probs[i])
        acc += p
        acc_sq += p * p
        cnt += 1
        mean = acc / cnt
        out.append((t, math.sqrt(max(acc_sq / cnt - mean * mean, 0.0))))
    return out


def _log_prob(logits: np.ndarray, target: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    return float(z[target] - (m + math.log(np.sum(np.exp(z - m)))))


def perplexity(
    model,
    corpus,
    policy: Policy | None = None,
    budget: BudgetSpec | None = None,
    *,
    include_self: bool = True,
) -> float:
    """exp(mean NLL) of next-token predictions under constrained caches.

    Teacher-forced: each sequence is fed token by token with eviction active,
    and the budget rate resolves against that sequence's length. Sequences
    without a next-token target (length < 2) are excluded from the mean.
    """
    sequences = [list(seq) for seq in corpus if len(seq) >= 2]
    if not sequences:
        raise ValueError("corpus has no sequence with a next-token target")
    if budget is not None and policy is None:
        raise ConfigurationError("a constrained run needs a policy")
    cfg = model.config
    nll = 0.0
    targets = 0
    for seq in sequences:
        resolved = resolve_budget(budget, policy, len(seq)) if budget is not None else None
        run_policy = policy
        if resolved is not None:
            run_policy = policies.with_resolved_scope(policy, resolved.scope_r)
        caches = CacheSet(
            cfg.layers, cfg.query_heads, cfg.kv_heads, cfg.head_dim, include_self=include_self
        )
        caches.configure(resolved, run_policy)
        for t in range(len(seq) - 1):
            caches.ensure_room(t)
            out = forward_step(model, seq[t], t, caches)
            caches.update_stats(out.attention)
            nll -= _log_prob(out.logits, seq[t + 1])
            targets += 1
    return math.exp(nll / targets)


@dataclass
class ScopeSweepReport:
    importance: str
    points: list  # (scope_kind, r, metric_name, value)
    sensitivity: dict  # scope_kind -> max-min across r
    skipped: list  # (scope_kind, r, reason)


def scope_sweep(
    *,
    trace: AttentionTrace | None = None,
    model=None,
    corpus=None,
    r_values,
    budget: BudgetSpec,
    scope_kinds=("window", "topstd"),
    importance: str = "mas",
    seed: int = 0,
    include_self: bool = True,
) -> ScopeSweepReport:
    """Sensitivity of one importance method to the protected-scope size.

    Replay mode (trace given) scores each (scope, r) by consistency Jaccard
    against the scope-free full-cache ranking; live mode (model + corpus)
    scores by perplexity. Infeasible r (no room to evict a block) is skipped
    with a warning, and per-scope sensitivity is max - min over the rest.
    """
    if (trace is None) == (model is None):
        raise ConfigurationError("scope_sweep needs exactly one of trace / model")
    scope_token = {"window": "window", "topstd": "std"}
    points = []
    skipped = []
    values = {kind: [] for kind in scope_kinds}
    jobs = []
    for kind in scope_kinds:
        for r in r_values:
            name = f"{importance}+{scope_token[kind]}({r})"
            policy = policy_from_name(name, seed=seed)
            try:
                if trace is not None:
                    resolve_budget(budget, policy, trace.header.steps)
                    jobs.append(((kind, r), policy, budget, importance))
                else:
                    value = perplexity(model, corpus, policy, budget, include_self=include_self)
                    points.append((kind, r, "perplexity", value))
                    values[kind].append(value)
            except ConfigurationError as exc:
                warnings.warn(f"scope {kind} r={r} skipped: {exc}")
                skipped.append((kind, r, str(exc)))
    if trace is not None and jobs:
        results = _consistency_core(trace, jobs, seed=seed, include_self=include_self)
        for (kind, r), (mean, _curve) in results.items():
            points.append((kind, r, "mean_jaccard", mean))
            values[kind].append(mean)
    sensitivity = {
        kind: (max(vals) - min(vals)) if vals else float("nan") for kind, vals in values.items()
    }
    return ScopeSweepReport(importance, points, sensitivity, skipped)


def generation_agreement(model, prompt, max_new: int, policy: Policy, budget: BudgetSpec) -> float:
    """Fraction of generated tokens identical to the full-cache generation."""
    from .toy_model import generate

    full = generate(model, prompt, max_new)
    constrained = generate(model, prompt, max_new, policy=policy, budget=budget)
    a = full.tokens[len(prompt):]
    b = constrained.tokens[len(prompt):]
    if not a and not b:
        return 1.0
    matches = sum(x == y for x, y in zip(a, b))
    return matches / max(len(a), len(b))


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))  # plain-float repr even for numpy scalars
    return str(value)


def write_csv(rows, path):
    """Write experiment rows with the fixed column schema, atomically."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for row in rows:
                fh.write(",".join(_format_cell(row.get(col)) for col in CSV_COLUMNS) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
