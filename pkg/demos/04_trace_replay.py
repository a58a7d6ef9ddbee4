"""Record an attention trace, round-trip it through the binary format, and
replay eviction policies against it without re-running the model.

Replay masks recorded rows to the retained positions and renormalizes; live
runs recompute attention over the retained keys instead, so below full
budget the two can drift. We measure that divergence here rather than
asserting it away.

Run: python demos/04_trace_replay.py
"""

import tempfile
from pathlib import Path

import numpy as np

from kvevict import (
    BudgetSpec,
    ModelConfig,
    generate,
    init_model,
    jaccard,
    policy_from_name,
    read_trace,
    replay,
    trace_from_generation,
    write_trace,
)

cfg = ModelConfig(layers=2, query_heads=4, kv_heads=2, head_dim=16, vocab=256, max_position=256, seed=3)
model = init_model(cfg)
rng = np.random.default_rng(3)
prompt = rng.integers(1, 256, size=96).tolist()

# full-cache run -> trace file -> back
full = generate(model, prompt, 0, collect_retained=True)
trace = trace_from_generation(cfg, full, source="demo")
path = Path(tempfile.gettempdir()) / "demo_trace.kvtr"
write_trace(trace, path)
back = read_trace(path)
print(f"trace: {back.header.steps} steps x {back.header.layers} layers x "
      f"{back.header.query_heads} heads ({path.stat().st_size} bytes), round-trip equal: {back == trace}")

# replay a policy against the recorded rows
policy = policy_from_name("roco", seed=0)
result = replay(back, policy, BudgetSpec(tokens=32))
print(f"replay roco@32: {len(result.events)} evictions, "
      f"final retained {len(result.retained[-1][(0, 0)])} per head")
rerun = replay(back, policy, BudgetSpec(tokens=32))
print("replay is bit-deterministic:", result == rerun)

# live vs replay divergence below full budget (same policy, same budget)
print("\nlive-vs-replay retained-set Jaccard by budget (mean over heads, final step):")
for tokens in (96, 48, 24):
    live = generate(model, prompt, 0, policy=policy, budget=BudgetSpec(tokens=tokens), collect_retained=True)
    rep = replay(back, policy, BudgetSpec(tokens=tokens))
    sims = [
        jaccard(live.retained[-1][key], rep.retained[-1][key])
        for key in live.retained[-1]
    ]
    print(f"  budget {tokens:>3}: {np.mean(sims):.3f}" + ("  (full cache: identical)" if tokens == 96 else ""))
