"""The two preliminary experiments: Jaccard consistency of importance methods
against their full-cache variants (budgets 0.3-0.6), and the rise-then-fall
shape of per-token attention-std trajectories.

Writes fig2.csv and fig3.csv next to the working directory.

Run: python demos/05_consistency_and_std.py
"""

import numpy as np

from kvevict import ModelConfig, consistency_experiment, generate, init_model, std_trajectory, trace_from_generation, write_csv

BUDGETS = [0.3, 0.4, 0.5, 0.6]
METHODS = ["aas", "aqas", "ltas", "mas", "random"]

means = {key: [] for key in ((b, m) for b in BUDGETS for m in METHODS)}
trace = None
for i in range(8):
    cfg = ModelConfig(4, 4, 4, 16, 256, 512, seed=200 + i)
    model = init_model(cfg)
    rng = np.random.default_rng([200 + i, 1])
    prompt = rng.integers(1, 256, size=128).tolist()
    result = generate(model, prompt, 0, collect_retained=True)
    trace = trace_from_generation(cfg, result, source=f"demo:{i}")
    report = consistency_experiment(trace, BUDGETS, METHODS, seed=200 + i)
    for cell in report.cells:
        means[(cell.budget, cell.method)].append(cell.mean)

print("mean Jaccard consistency vs full-cache statistics (8 traces):")
print(f"{'budget':>8}" + "".join(f"{m:>9}" for m in METHODS))
rows = []
for budget in BUDGETS:
    line = f"{budget:>8}"
    for method in METHODS:
        value = float(np.mean(means[(budget, method)]))
        line += f"{value:>9.3f}"
        rows.append({"experiment": "consistency", "method": method, "budget": budget,
                     "r": 0, "b": 1, "seed": 200, "metric": "mean_jaccard", "value": value})
    print(line)
write_csv(rows, "fig2.csv")
print("wrote fig2.csv")

# std trajectories: brief ascent, then a steady decline as attention settles
print("\nattention-std trajectories (layer 0, head 0, last trace):")
rows = []
for position in (8, 32, 64):
    traj = std_trajectory(trace, position, layer=0, head=0)
    peak_step = max(traj, key=lambda kv: kv[1])[0]
    print(f"  token {position}: first std {traj[0][1]:.4f}, "
          f"peak {max(v for _, v in traj):.4f} at step {peak_step}, final {traj[-1][1]:.4f}")
    for step, value in traj:
        rows.append({"experiment": "std_trajectory", "method": f"position={position}",
                     "budget": None, "r": None, "b": None, "seed": 200,
                     "metric": f"std@{step}", "value": value})
write_csv(rows, "fig3.csv")
print("wrote fig3.csv")
