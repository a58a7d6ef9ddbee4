"""Walk through the core objects: attention kernels, a head cache, and the
streaming importance statistics every policy reads.

Run: python demos/01_cache_and_statistics.py
"""

import numpy as np

from kvevict import HeadCache, attention_step, policy_from_name, softmax_row, std_scores

rng = np.random.default_rng(0)

# --- the attention primitive -------------------------------------------------
# one query against four retained keys; the probability row comes back so the
# caller can feed the importance statistics
keys = rng.standard_normal((4, 8)).astype(np.float32)
values = rng.standard_normal((4, 8)).astype(np.float32)
query = rng.standard_normal(8).astype(np.float32)
out, probs = attention_step(query, keys, values, scale=1 / np.sqrt(8))
print("attention row:", np.round(probs, 3), "sums to", float(probs.sum()))

print("softmax is shift-invariant:", np.allclose(softmax_row([1, 2, 3]), softmax_row([101, 102, 103])))

# --- a head cache under budget ----------------------------------------------
# budget 6: once full, each append must be preceded by an eviction
cache = HeadCache(head_dim=8, budget=6)
policy = policy_from_name("roco", window=2)

for pos in range(12):
    if cache.n == cache.budget:
        evicted = cache.evict(policy, 1, step=pos)
        print(f"step {pos}: evicted position {evicted[0]}")
    cache.append(pos, rng.standard_normal(8), rng.standard_normal(8))
    row = rng.dirichlet(np.ones(cache.n)).astype(np.float32)
    cache.update_stats(row)

print("retained positions:", cache.positions.tolist())
print("accumulated attention:", np.round(cache.stats.acc, 3))
print("mean attention (acc/count):", np.round(cache.stats.acc / cache.stats.count, 3))
print("attention std per slot:", np.round(std_scores(cache.stats), 4))
print("debug dump line:", cache.dump_line(layer=0, head=0)[:80], "...")
