"""Seeded deterministic decoder-only transformer driving the cache end to end.

LLaMa-flavoured small model: pre-norm residual blocks with RMS normalization,
rotary position encoding applied once at each token's original absolute
position, grouped-query attention (kv_heads may divide query_heads), SiLU
feed-forward with 4x expansion, greedy decoding. Everything is derived from
the config seed, so two models built from equal configs are bit-identical,
and generation is a pure function of (seed, prompt, policy, budget, block).
"""

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .kv_cache import BudgetSpec, CacheSet, EvictionEvent, resolve_budget
from .policies import Policy, with_resolved_scope
from .tensor_core import attention_step, matmul

__all__ = [
    "EOS_TOKEN",
    "ModelConfig",
    "ToyModel",
    "StepOutput",
    "GenerationResult",
    "init_model",
    "forward_step",
    "generate",
    "save_model",
    "load_model",
    "rms_norm",
    "silu",
    "apply_rope",
]

EOS_TOKEN = 0

_MAGIC = b"KVTM"
_VERSION = 1
_RMS_EPS = 1e-6
_ROPE_BASE = 10000.0
_FF_EXPANSION = 4


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    query_heads: int
    kv_heads: int
    head_dim: int
    vocab: int
    max_position: int
    seed: int

    def __post_init__(self):
        if min(self.layers, self.query_heads, self.kv_heads, self.head_dim, self.vocab, self.max_position) < 1:
            raise ConfigurationError("all config dimensions must be >= 1")
        if self.query_heads % self.kv_heads != 0:
            raise ConfigurationError(
                f"kv_heads {self.kv_heads} must divide query_heads {self.query_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigurationError("head_dim must be even (rotary pairs)")

    @property
    def model_dim(self) -> int:
        return self.query_heads * self.head_dim

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.query_heads // self.kv_heads


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_ff1: np.ndarray
    w_ff2: np.ndarray


@dataclass
class ToyModel:
    config: ModelConfig
    embeddings: np.ndarray
    layers: list
    unembed: np.ndarray
    rope_cos: np.ndarray = field(repr=False, default=None)
    rope_sin: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.rope_cos is None:
            self.rope_cos, self.rope_sin = _rope_tables(self.config)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.config.head_dim)

    def param_count(self) -> int:
        per_layer = sum(w.size for w in (
            self.layers[0].wq, self.layers[0].wk, self.layers[0].wv,
            self.layers[0].wo, self.layers[0].w_ff1, self.layers[0].w_ff2,
        ))
        return self.embeddings.size + len(self.layers) * per_layer + self.unembed.size


@dataclass
class StepOutput:
    logits: np.ndarray
    attention: dict  # (layer, query_head) -> prob row over that head's retained positions


@dataclass
class GenerationResult:
    tokens: list
    steps: list
    events: list
    peak_n: int
    retained: list | None = None  # per step: {(layer, kv_head): tuple(positions)}


def _rope_tables(config: ModelConfig):
    half = config.head_dim // 2
    inv_freq = _ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / config.head_dim)
    angles = np.arange(config.max_position, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rms_norm(x: np.ndarray) -> np.ndarray:
    """RMS-normalize the last axis (float64 internally, gain fixed at 1)."""
    x64 = np.asarray(x, dtype=np.float64)
    ms = np.mean(x64 * x64, axis=-1, keepdims=True)
    return (x64 / np.sqrt(ms + _RMS_EPS)).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(np.float32)


def apply_rope(heads: np.ndarray, position: int, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate (n_heads, head_dim) vectors by the given absolute position.

    Interleaved pairs (2i, 2i+1); cached tokens keep the rotation of their
    original position, eviction never re-indexes.
    """
    v = np.asarray(heads, dtype=np.float64)
    c, s = cos[position], sin[position]
    even, odd = v[..., 0::2], v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out.astype(np.float32)


def init_model(config: ModelConfig) -> ToyModel:
    """Draw all weights from one seeded Gaussian stream with std 1/sqrt(d)."""
    rng = np.random.default_rng(config.seed & 0xFFFFFFFFFFFFFFFF)
    std = np.float32(1.0 / math.sqrt(config.model_dim))
    d, dkv, v = config.model_dim, config.kv_dim, config.vocab

    def draw(*shape):
        return rng.standard_normal(shape, dtype=np.float32) * std

    embeddings = draw(v, d)
    layers = [
        LayerWeights(
            wq=draw(d, d),
            wk=draw(d, dkv),
            wv=draw(d, dkv),
            wo=draw(d, d),
            w_ff1=draw(d, _FF_EXPANSION * d),
            w_ff2=draw(_FF_EXPANSION * d, d),
        )
        for _ in range(config.layers)
    ]
    unembed = draw(d, v)
    return ToyModel(config, embeddings, layers, unembed)


def forward_step(model: ToyModel, token: int, position: int, caches: CacheSet) -> StepOutput:
    """Run one token through the model against the retained caches.

    Appends the token's k/v to every (layer, kv-head) cache, so the caller
    must have made room first; statistics updates and eviction stay with the
    caller as well.
    """
    cfg = model.config
    if not 0 <= token < cfg.vocab:
        raise ValueError(f"token {token} outside vocab {cfg.vocab}")
    if not 0 <= position < cfg.max_position:
        raise ConfigurationError(f"position {position} >= max_position {cfg.max_position}")
    dh, g = cfg.head_dim, cfg.group_size
    x = model.embeddings[token]
    rows = {}
    for l, lw in enumerate(model.layers):
        h_in = rms_norm(x)[None, :]
        q = matmul(h_in, lw.wq)[0].reshape(cfg.query_heads, dh)
        k = matmul(h_in, lw.wk)[0].reshape(cfg.kv_heads, dh)
        v = matmul(h_in, lw.wv)[0].reshape(cfg.kv_heads, dh)
        q = apply_rope(q, position, model.rope_cos, model.rope_sin)
        k = apply_rope(k, position, model.rope_cos, model.rope_sin)
        for kvh in range(cfg.kv_heads):
            caches.head(l, kvh).append(position, k[kvh], v[kvh])
        outs = []
        for h in range(cfg.query_heads):
            cache = caches.head(l, h // g)
            out, probs = attention_step(q[h], cache.keys, cache.values, model.scale)
            outs.append(out)
            rows[(l, h)] = probs
        x = x + matmul(np.concatenate(outs)[None, :], lw.wo)[0]
        h_ff = rms_norm(x)[None, :]
        x = x + matmul(silu(matmul(h_ff, lw.w_ff1)), lw.w_ff2)[0]
    logits = matmul(rms_norm(x)[None, :], model.unembed)[0]
    return StepOutput(logits, rows)


def generate(
    model: ToyModel,
    prompt,
    max_new: int,
    caches: CacheSet | None = None,
    policy: Policy | None = None,
    budget: BudgetSpec | None = None,
    *,
    collect_retained: bool = False,
) -> GenerationResult:
    """Prefill the prompt then greedily decode up to max_new tokens.

    Eviction runs whenever a head is at budget before the next append, in
    both stages, honoring the block size. Greedy argmax ties resolve to the
    lowest token id; decoding stops early on EOS (token 0).
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    cfg = model.config
    if len(prompt) + max_new > cfg.max_position + 1:
        raise ConfigurationError(
            f"prompt {len(prompt)} + max_new {max_new} overflows max_position {cfg.max_position}"
        )
    resolved = None
    if budget is not None:
        if policy is None:
            raise ConfigurationError("a constrained run needs a policy")
        resolved = resolve_budget(budget, policy, len(prompt))
    if resolved is not None:
        policy = with_resolved_scope(policy, resolved.scope_r)
    if caches is None:
        caches = CacheSet(cfg.layers, cfg.query_heads, cfg.kv_heads, cfg.head_dim)
    caches.configure(resolved, policy)

    tokens = list(prompt)
    steps: list[StepOutput] = []
    events: list[EvictionEvent] = []
    retained: list | None = [] if collect_retained else None

    def feed(tok: int, pos: int):
        events.extend(caches.ensure_room(pos))
        out = forward_step(model, tok, pos, caches)
        caches.update_stats(out.attention)
        steps.append(out)
        if retained is not None:
            retained.append(
                {
                    key: tuple(int(p) for p in cache.positions)
                    for key, cache in caches.heads.items()
                }
            )

    for pos, tok in enumerate(prompt):
        feed(tok, pos)

    produced = 0
    position = len(prompt)
    while produced < max_new:
        nxt = int(np.argmax(steps[-1].logits))  # first max = lowest token id
        tokens.append(nxt)
        produced += 1
        if nxt == EOS_TOKEN or produced == max_new:
            break
        feed(nxt, position)
        position += 1

    return GenerationResult(tokens, steps, events, caches.peak_n, retained)


def save_model(model: ToyModel, path):
    """Write the KVTM binary (atomically): header ints then raw float32 blobs."""
    cfg = model.config
    header = struct.pack(
        "<4sIIIIIIIq",
        _MAGIC,
        _VERSION,
        cfg.layers,
        cfg.query_heads,
        cfg.kv_heads,
        cfg.head_dim,
        cfg.vocab,
        cfg.max_position,
        cfg.seed,
    )
    blobs = [model.embeddings]
    for lw in model.layers:
        blobs.extend([lw.wq, lw.wk, lw.wv, lw.wo, lw.w_ff1, lw.w_ff2])
    blobs.append(model.unembed)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            for blob in blobs:
                fh.write(np.ascontiguousarray(blob, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> ToyModel:
    with open(path, "rb") as fh:
        data = fh.read()
    head_size = struct.calcsize("<4sIIIIIIIq")
    if len(data) < head_size:
        raise ConfigurationError(f"{path}: truncated model file")
    magic, version, layers, qh, kvh, dh, vocab, maxp, seed = struct.unpack_from(
        "<4sIIIIIIIq", data
    )
    if magic != _MAGIC:
        raise ConfigurationError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ConfigurationError(f"{path}: unsupported version {version}")
    cfg = ModelConfig(layers, qh, kvh, dh, vocab, maxp, seed)
    d, dkv, v = cfg.model_dim, cfg.kv_dim, cfg.vocab
    shapes = [(v, d)]
    for _ in range(layers):
        shapes.extend([(d, d), (d, dkv), (d, dkv), (d, d), (d, _FF_EXPANSION * d), (_FF_EXPANSION * d, d)])
    shapes.append((d, v))
    expected = head_size + 4 * sum(r * c for r, c in shapes)
    if len(data) != expected:
        raise ConfigurationError(f"{path}: expected {expected} bytes, found {len(data)}")
    offset = head_size
    arrays = []
    for r, c in shapes:
        count = r * c
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(r, c).copy()
        arrays.append(arr)
        offset += 4 * count
    embeddings, rest = arrays[0], arrays[1:]
    lws = [LayerWeights(*rest[i * 6 : i * 6 + 6]) for i in range(layers)]
    return ToyModel(cfg, embeddings, lws, rest[-1])
