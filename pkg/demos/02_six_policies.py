"""The six canonical eviction policies choosing victims on one shared cache.

Each policy is an importance score (what matters) times an eviction scope
(who is even a candidate). The same statistics produce different victims.

Run: python demos/02_six_policies.py
"""

import copy

import numpy as np

from kvevict import (
    HeadCache,
    eviction_scope,
    importance_scores,
    policy_from_name,
    with_resolved_scope,
)

rng = np.random.default_rng(7)

base = HeadCache(head_dim=4)
for pos in range(10):
    base.append(pos, rng.standard_normal(4), rng.standard_normal(4))
    base.update_stats(rng.dirichlet(np.ones(base.n)).astype(np.float32))

print(f"cache holds positions {base.positions.tolist()}\n")
print(f"{'policy':>14} {'importance':>10} {'scope':>8} {'candidates':>22} {'victim':>6}")
for name in ("random", "streamllm", "scissorhands", "h2o", "tova", "roco"):
    cache = copy.deepcopy(base)
    policy = with_resolved_scope(policy_from_name(name, seed=1), 3)  # r = 3 where used
    candidates = eviction_scope(policy.scope, cache.positions, cache.stats)
    victim = cache.evict(policy, 1, step=10)[0]
    cand = ",".join(str(c) for c in candidates)
    print(f"{name:>14} {policy.importance.kind:>10} {policy.scope.kind:>8} {cand:>22} {victim:>6}")

# custom compositions accepted as "importance+scope(r)" strings
custom = policy_from_name("mas+window(4)")
cache = copy.deepcopy(base)
print("\ncustom mas+window(4) victim:", cache.evict(custom, 1, step=10)[0])

scores = importance_scores(base.stats, base.positions, custom.importance)
print("mas scores:", np.round(scores, 3))
