"""Binary attention-trace serialization and the trace replay engine.

A trace stores, for every step / layer / query head, the retained position
list and the attention row the model produced, which is everything the
importance statistics need; keys and values themselves are never stored.
Replay applies an eviction policy to a recorded trace: once slots are gone,
later rows are masked to the retained positions and renormalized to sum 1
before updating statistics. That is an explicit approximation of constrained
attention (the true constrained logits are not in the trace), and it is what
lets the local and global sides of the consistency experiment share one
attention source.

File layout (little-endian): magic "KVTR", u32 header length, header text of
key=value lines, then one record per (step, layer, head) in step-major
order: u32 step, u16 layer, u16 head, u32 n, n x u32 positions, n x f32
probs.
"""

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import TraceFormatError
from .kv_cache import BudgetSpec, CacheSet, resolve_budget
from .policies import Policy, with_resolved_scope

__all__ = [
    "TRACE_VERSION",
    "TraceHeader",
    "AttentionTrace",
    "ReplayResult",
    "write_trace",
    "read_trace",
    "replay",
    "mask_and_renormalize",
    "trace_from_generation",
]

TRACE_VERSION = 1
_MAGIC = b"KVTR"
_ROW_SUM_TOL = 1e-4
_HEADER_FIELDS = ("version", "layers", "query_heads", "kv_heads", "head_dim", "steps")


@dataclass(frozen=True)
class TraceHeader:
    layers: int
    query_heads: int
    kv_heads: int
    head_dim: int
    steps: int
    source: str = ""
    version: int = TRACE_VERSION


@dataclass
class AttentionTrace:
    header: TraceHeader
    # rows[t][l][h] = (positions ascending int64, probs float32)
    rows: list

    def row(self, step: int, layer: int, head: int):
        return self.rows[step][layer][head]

    def __eq__(self, other):
        if not isinstance(other, AttentionTrace) or self.header != other.header:
            return NotImplemented if not isinstance(other, AttentionTrace) else False
        for t in range(self.header.steps):
            for l in range(self.header.layers):
                for h in range(self.header.query_heads):
                    pa, qa = self.rows[t][l][h]
                    pb, qb = other.rows[t][l][h]
                    if not (np.array_equal(pa, pb) and np.array_equal(qa, qb)):
                        return False
        return True


def trace_from_generation(config, result, source: str = "toy") -> AttentionTrace:
    """Assemble a trace from a generation run made with collect_retained=True."""
    if result.retained is None:
        raise ValueError("generation was run without collect_retained=True")
    g = config.query_heads // config.kv_heads
    rows = []
    for step_out, retained in zip(result.steps, result.retained):
        layer_rows = []
        for l in range(config.layers):
            head_rows = []
            for h in range(config.query_heads):
                positions = np.asarray(retained[(l, h // g)], dtype=np.int64)
                head_rows.append((positions, np.asarray(step_out.attention[(l, h)], dtype=np.float32)))
            layer_rows.append(head_rows)
        rows.append(layer_rows)
    header = TraceHeader(
        layers=config.layers,
        query_heads=config.query_heads,
        kv_heads=config.kv_heads,
        head_dim=config.head_dim,
        steps=len(rows),
        source=source,
    )
    return AttentionTrace(header, rows)


def write_trace(trace: AttentionTrace, path):
    hdr = trace.header
    if "\n" in hdr.source:
        raise ValueError("trace source label must be a single line")
    text = (
        f"version={hdr.version}\nlayers={hdr.layers}\nquery_heads={hdr.query_heads}\n"
        f"kv_heads={hdr.kv_heads}\nhead_dim={hdr.head_dim}\nsteps={hdr.steps}\n"
        f"source={hdr.source}\n"
    ).encode()
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(text)))
            fh.write(text)
            for t in range(hdr.steps):
                for l in range(hdr.layers):
                    for h in range(hdr.query_heads):
                        positions, probs = trace.rows[t][l][h]
                        n = len(positions)
                        if len(probs) != n:
                            raise ValueError(f"record ({t},{l},{h}): {n} positions vs {len(probs)} probs")
                        fh.write(struct.pack("<IHHI", t, l, h, n))
                        fh.write(np.ascontiguousarray(positions, dtype="<u4").tobytes())
                        fh.write(np.ascontiguousarray(probs, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_trace(path) -> AttentionTrace:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise TraceFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise TraceFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + hlen:
        raise TraceFormatError(f"{path}: truncated header text")
    fields = {}
    for line in data[8 : 8 + hlen].decode(errors="replace").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            fields[key] = value
    try:
        ints = {k: int(fields[k]) for k in _HEADER_FIELDS}
    except (KeyError, ValueError) as exc:
        raise TraceFormatError(f"{path}: malformed header ({exc})") from None
    if ints["version"] != TRACE_VERSION:
        raise TraceFormatError(f"{path}: unsupported trace version {ints['version']}")
    header = TraceHeader(
        layers=ints["layers"],
        query_heads=ints["query_heads"],
        kv_heads=ints["kv_heads"],
        head_dim=ints["head_dim"],
        steps=ints["steps"],
        source=fields.get("source", ""),
    )
    offset = 8 + hlen
    rows = []
    for t in range(header.steps):
        layer_rows = []
        for l in range(header.layers):
            head_rows = []
            for h in range(header.query_heads):
                where = f"{path}: record (step={t}, layer={l}, head={h})"
                if offset + 12 > len(data):
                    raise TraceFormatError(f"{where}: truncated")
                rt, rl, rh, n = struct.unpack_from("<IHHI", data, offset)
                offset += 12
                if (rt, rl, rh) != (t, l, h):
                    raise TraceFormatError(f"{where}: found record ({rt},{rl},{rh}) out of order")
                if n < 1:
                    raise TraceFormatError(f"{where}: empty row")
                need = 8 * n
                if offset + need > len(data):
                    raise TraceFormatError(f"{where}: truncated")
                positions = np.frombuffer(data, dtype="<u4", count=n, offset=offset).astype(np.int64)
                offset += 4 * n
                probs = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float32)
                offset += 4 * n
                if np.any(np.diff(positions) <= 0):
                    raise TraceFormatError(f"{where}: positions not strictly ascending")
                if positions[-1] > t:
                    raise TraceFormatError(f"{where}: position {positions[-1]} beyond step {t}")
                if not np.all(np.isfinite(probs)) or probs.min() < 0.0 or probs.max() > 1.0:
                    raise TraceFormatError(f"{where}: probabilities outside [0, 1]")
                total = float(np.sum(probs, dtype=np.float64))
                if abs(total - 1.0) > _ROW_SUM_TOL:
                    raise TraceFormatError(f"{where}: row sums to {total:.6f}")
                head_rows.append((positions, probs))
            layer_rows.append(head_rows)
        rows.append(layer_rows)
    if offset != len(data):
        raise TraceFormatError(f"{path}: {len(data) - offset} trailing bytes after last record")
    return AttentionTrace(header, rows)


def mask_and_renormalize(row_positions, row_probs, retained_positions) -> np.ndarray:
    """Restrict a recorded row to the retained positions and rescale to sum 1.

    Positions missing from the record contribute zero; a fully-masked row
    falls back to uniform, keeping replay total-mass invariants intact.
    """
    row_positions = np.asarray(row_positions)
    retained = np.asarray(retained_positions)
    idx = np.searchsorted(row_positions, retained)
    idx_safe = np.minimum(idx, len(row_positions) - 1)
    hit = row_positions[idx_safe] == retained
    if retained.size == row_positions.size and hit.all():
        # nothing masked: the recorded row is returned exactly as-is
        return np.asarray(row_probs, dtype=np.float32)
    vals = np.where(hit, np.asarray(row_probs, dtype=np.float64)[idx_safe], 0.0)
    total = vals.sum()
    if total <= 0.0:
        return np.full(retained.shape[0], 1.0 / retained.shape[0], dtype=np.float32)
    return (vals / total).astype(np.float32)


@dataclass
class ReplayResult:
    policy_name: str
    budget: int | None
    block: int
    steps: int
    retained: list  # per step: {(layer, kv_head): tuple(positions)}
    events: list
    stats: dict  # (layer, kv_head) -> final accumulator snapshot
    peak_n: int = 0

    def __eq__(self, other):
        if not isinstance(other, ReplayResult):
            return False
        if (
            self.policy_name != other.policy_name
            or self.budget != other.budget
            or self.block != other.block
            or self.steps != other.steps
            or self.retained != other.retained
            or self.events != other.events
            or self.peak_n != other.peak_n
            or self.stats.keys() != other.stats.keys()
        ):
            return False
        for key, snap in self.stats.items():
            for name, arr in snap.items():
                if not np.array_equal(arr, other.stats[key][name]):
                    return False
        return True


def replay(
    trace: AttentionTrace,
    policy: Policy,
    budget: BudgetSpec | None,
    *,
    include_self: bool = True,
    on_step=None,
) -> ReplayResult:
    """Apply an eviction policy to a recorded trace, as in live inference.

    At each step every full head evicts one block, the new position is
    appended, and statistics are updated from the step's masked-renormalized
    (and, under GQA, group-averaged) rows. `on_step(t, caches)` is called
    after each step's update for read-only inspection of the streaming
    statistics; it must not mutate the caches.
    """
    hdr = trace.header
    resolved = resolve_budget(budget, policy, hdr.steps) if budget is not None else None
    if resolved is not None:
        policy = with_resolved_scope(policy, resolved.scope_r)
    caches = CacheSet(
        hdr.layers, hdr.query_heads, hdr.kv_heads, 0, include_self=include_self
    )
    caches.configure(resolved, policy)
    g = caches.group_size
    retained_log = []
    events = []
    for t in range(hdr.steps):
        events.extend(caches.ensure_room(t))
        for key in caches.heads:
            caches.heads[key].append(t)
        masked = {}
        for l in range(hdr.layers):
            for kvh in range(hdr.kv_heads):
                kept = caches.head(l, kvh).positions
                for j in range(g):
                    h = kvh * g + j
                    positions, probs = trace.rows[t][l][h]
                    masked[(l, h)] = mask_and_renormalize(positions, probs, kept)
        caches.update_stats(masked)
        retained_log.append(
            {key: tuple(int(p) for p in cache.positions) for key, cache in caches.heads.items()}
        )
        if on_step is not None:
            on_step(t, caches)
    stats = {key: cache.stats.snapshot() for key, cache in caches.heads.items()}
    return ReplayResult(
        policy_name=policy.name,
        budget=resolved.budget if resolved is not None else None,
        block=resolved.block if resolved is not None else 1,
        steps=hdr.steps,
        retained=retained_log,
        events=events,
        stats=stats,
        peak_n=caches.peak_n,
    )
