"""Command-line surface: model creation, constrained generation, trace
export/replay, and the four experiment protocols (consistency, std
trajectories, scope sweeps, perplexity).

Exit codes: 0 success, 2 usage/configuration error, 1 runtime failure.
Every command is deterministic for fixed flags; the seed falls back to the
KVEVICT_SEED environment variable, then 0.
"""

import argparse
import os
import sys
import tempfile

import numpy as np

from . import analysis
from .errors import ConfigurationError, KvEvictError, TraceFormatError
from .kv_cache import BudgetSpec
from .policies import canonical_policy_names, policy_from_name
from .toy_model import ModelConfig, generate, init_model, load_model, save_model
from .trace_io import read_trace, replay, trace_from_generation, write_trace

_DEFAULTS = {"layers": 4, "query_heads": 4, "kv_heads": 4, "head_dim": 16, "vocab": 256, "max_position": 512}


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("KVEVICT_SEED", "0"))


def _read_tokens(path) -> list:
    with open(path) as fh:
        return [int(tok) for tok in fh.read().split()]


def _read_corpus(path) -> list:
    with open(path) as fh:
        lines = [line.split() for line in fh if line.strip()]
    return [[int(tok) for tok in line] for line in lines]


def _write_text(path, text: str):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.fspath(path)) or ".", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _budget_from_args(args) -> BudgetSpec | None:
    if getattr(args, "no_evict", False):
        return None
    rate, tokens = getattr(args, "budget_rate", None), getattr(args, "budget_tokens", None)
    if rate is None and tokens is None:
        return None
    if rate is not None and tokens is not None:
        raise ConfigurationError("give either --budget-rate or --budget-tokens, not both")
    return BudgetSpec(
        rate=rate,
        tokens=tokens,
        block_size=getattr(args, "block", 1),
        scope_size=getattr(args, "window", None),
    )


def _add_budget_flags(sub, *, with_no_evict: bool = False):
    sub.add_argument("--budget-rate", type=float, help="cache budget as a rate of prompt length")
    sub.add_argument("--budget-tokens", type=int, help="cache budget as a fixed token count")
    sub.add_argument("--window", type=int, help="protected scope size r (default B//2)")
    sub.add_argument("--block", type=int, default=1, help="evict-and-encode block size b")
    if with_no_evict:
        sub.add_argument("--no-evict", action="store_true", help="disable eviction entirely")


def _csv_floats(text: str) -> list:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _csv_ints(text: str) -> list:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _csv_names(text: str) -> list:
    return [tok.strip() for tok in text.split(",") if tok.strip()]


def _toy_config(args, seed: int, *, max_position: int | None = None) -> ModelConfig:
    return ModelConfig(
        layers=args.layers,
        query_heads=args.query_heads,
        kv_heads=args.kv_heads,
        head_dim=args.head_dim,
        vocab=args.vocab,
        max_position=max_position or args.max_position,
        seed=seed,
    )


def _add_config_flags(sub):
    for name, default in _DEFAULTS.items():
        sub.add_argument(f"--{name.replace('_', '-')}", type=int, default=default)


def _model_from_args(args, seed: int):
    if getattr(args, "model", None):
        return load_model(args.model)
    return init_model(_toy_config(args, seed))


def _toy_traces(args, seed: int) -> list:
    """Seeded full-cache prefill traces from fresh toy models."""
    traces = []
    for i in range(args.num_traces):
        cfg = _toy_config(args, seed + i, max_position=max(args.steps, _DEFAULTS["max_position"]))
        model = init_model(cfg)
        rng = np.random.default_rng([seed + i, 1])
        prompt = rng.integers(1, cfg.vocab, size=args.steps).tolist()
        result = generate(model, prompt, 0, collect_retained=True)
        traces.append(trace_from_generation(cfg, result, source=f"toy:{seed + i}"))
    return traces


def cmd_init_model(args) -> int:
    cfg = _toy_config(args, _seed(args))
    save_model(init_model(cfg), args.out)
    print(f"wrote {args.out} ({cfg.layers} layers, {cfg.query_heads} heads, vocab {cfg.vocab})")
    return 0


def cmd_generate(args) -> int:
    seed = _seed(args)
    model = load_model(args.model)
    if args.prompt_text:
        with open(args.prompt_text, "rb") as fh:
            prompt = list(fh.read())
        if model.config.vocab < 256:
            raise ConfigurationError("byte prompts need vocab >= 256")
    else:
        prompt = _read_tokens(args.prompt)
    budget = _budget_from_args(args)
    policy = policy_from_name(args.policy, seed=seed, window=args.window) if budget is not None else None
    result = generate(
        model,
        prompt,
        args.max_new,
        policy=policy,
        budget=budget,
        collect_retained=args.trace is not None,
    )
    line = " ".join(str(t) for t in result.tokens)
    print(line)
    if args.out:
        _write_text(args.out, line + "\n")
    if args.trace:
        write_trace(trace_from_generation(model.config, result, source=f"toy:{model.config.seed}"), args.trace)
    if args.report:
        evicted = sum(len(e.positions) for e in result.events)
        print(
            f"report: eviction_events={len(result.events)} evicted_tokens={evicted} "
            f"peak_head_n={result.peak_n}",
            file=sys.stderr,
        )
    return 0


def cmd_replay(args) -> int:
    seed = _seed(args)
    trace = read_trace(args.trace)
    policy = policy_from_name(args.policy, seed=seed, window=args.window)
    result = replay(trace, policy, _budget_from_args(args))
    sizes = [len(v) for v in result.retained[-1].values()]
    print(
        f"replay: policy={result.policy_name} budget={result.budget} block={result.block} "
        f"steps={result.steps} eviction_events={len(result.events)} peak_n={result.peak_n} "
        f"final_retained_min={min(sizes)} final_retained_max={max(sizes)}"
    )
    return 0


def cmd_consistency(args) -> int:
    seed = _seed(args)
    if args.trace:
        traces = [read_trace(p) for p in args.trace]
    else:
        traces = _toy_traces(args, seed)
    methods = _csv_names(args.methods)
    budgets = _csv_floats(args.budgets)
    means = {}
    curves = {}
    for trace in traces:
        report = analysis.consistency_experiment(trace, budgets, methods, seed=seed)
        for cell in report.cells:
            means.setdefault((cell.budget, cell.method), []).append(cell.mean)
            curves.setdefault((cell.budget, cell.method), []).append(cell.curve)
    rows = []
    print(f"{'budget':>8} {'method':>10} {'mean_jaccard':>14}")
    for budget in budgets:
        for method in methods:
            key = (budget, method)
            if key not in means:
                continue
            mean = float(np.mean(means[key]))
            rows.append(
                {
                    "experiment": "consistency",
                    "method": method,
                    "budget": budget,
                    "r": 0,
                    "b": 1,
                    "seed": seed,
                    "metric": "mean_jaccard",
                    "value": mean,
                }
            )
            print(f"{budget:>8} {method:>10} {mean:>14.4f}")
    for budget in budgets:
        for method in methods:
            key = (budget, method)
            if key not in curves:
                continue
            curve = np.mean(np.stack(curves[key]), axis=0)
            for t, value in enumerate(curve):
                rows.append(
                    {
                        "experiment": "consistency",
                        "method": method,
                        "budget": budget,
                        "r": 0,
                        "b": 1,
                        "seed": seed,
                        "metric": f"jaccard@{t}",
                        "value": float(value),
                    }
                )
    analysis.write_csv(rows, args.out)
    print(f"wrote {args.out}")
    return 0


def _corpus_from_args(args, model, seed: int) -> list:
    if args.corpus:
        return _read_corpus(args.corpus)
    rng = np.random.default_rng([seed, 2])
    corpus = []
    for _ in range(args.gen_corpus):
        prompt = rng.integers(1, model.config.vocab, size=8).tolist()
        result = generate(model, prompt, max_new=max(args.length - 8, 1))
        corpus.append(result.tokens)
    return corpus


def cmd_ppl(args) -> int:
    seed = _seed(args)
    model = _model_from_args(args, seed)
    corpus = _corpus_from_args(args, model, seed)
    policies_ = _csv_names(args.policies)
    budgets = _csv_floats(args.budgets)
    rows = []
    print(f"{'budget':>8} {'policy':>14} {'perplexity':>12}")
    for budget in budgets:
        for name in policies_:
            policy = policy_from_name(name, seed=seed, window=args.window)
            spec = BudgetSpec(rate=budget, block_size=args.block, scope_size=args.window)
            value = analysis.perplexity(model, corpus, policy, spec)
            rows.append(
                {
                    "experiment": "perplexity",
                    "method": name,
                    "budget": budget,
                    "r": args.window,
                    "b": args.block,
                    "seed": seed,
                    "metric": "perplexity",
                    "value": value,
                }
            )
            print(f"{budget:>8} {name:>14} {value:>12.4f}")
    analysis.write_csv(rows, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_scope_sweep(args) -> int:
    seed = _seed(args)
    budget = _budget_from_args(args)
    if budget is None:
        raise ConfigurationError("scope-sweep needs --budget-rate or --budget-tokens")
    kinds = tuple("topstd" if k in ("std", "topstd") else k for k in _csv_names(args.scopes))
    r_values = _csv_ints(args.r_values)
    if args.trace:
        report = analysis.scope_sweep(
            trace=read_trace(args.trace), r_values=r_values, budget=budget,
            scope_kinds=kinds, seed=seed,
        )
    else:
        model = _model_from_args(args, seed)
        corpus = _corpus_from_args(args, model, seed)
        report = analysis.scope_sweep(
            model=model, corpus=corpus, r_values=r_values, budget=budget,
            scope_kinds=kinds, seed=seed,
        )
    rows = []
    budget_cell = budget.rate if budget.rate is not None else budget.tokens
    print(f"{'scope':>8} {'r':>4} {'metric':>14} {'value':>12}")
    for kind, r, metric, value in report.points:
        rows.append(
            {
                "experiment": "scope_sweep",
                "method": f"{report.importance}+{kind}",
                "budget": budget_cell,
                "r": r,
                "b": budget.block_size,
                "seed": seed,
                "metric": metric,
                "value": value,
            }
        )
        print(f"{kind:>8} {r:>4} {metric:>14} {value:>12.4f}")
    for kind, value in sorted(report.sensitivity.items()):
        rows.append(
            {
                "experiment": "scope_sweep",
                "method": f"{report.importance}+{kind}",
                "budget": budget_cell,
                "r": None,
                "b": budget.block_size,
                "seed": seed,
                "metric": "sensitivity",
                "value": value,
            }
        )
        print(f"{kind:>8} {'-':>4} {'sensitivity':>14} {value:>12.4f}")
    analysis.write_csv(rows, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_std(args) -> int:
    seed = _seed(args)
    trace = read_trace(args.trace)
    hdr = trace.header
    per_step = {}
    for l in range(hdr.layers):
        for h in range(hdr.query_heads):
            for t, value in analysis.std_trajectory(trace, args.position, l, h):
                per_step.setdefault(t, []).append(value)
    rows = [
        {
            "experiment": "std_trajectory",
            "method": f"position={args.position}",
            "budget": None,
            "r": None,
            "b": None,
            "seed": seed,
            "metric": f"std@{t}",
            "value": float(np.mean(per_step[t])),
        }
        for t in sorted(per_step)
    ]
    analysis.write_csv(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} steps)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvevict", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="create and save a seeded toy model")
    _add_config_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("generate", help="constrained generation from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", help="file of whitespace-separated token ids")
    p.add_argument("--prompt-text", help="file treated as raw bytes (token id = byte value)")
    p.add_argument("--policy", default="roco")
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", help="write the attention trace here")
    p.add_argument("--out", help="also write the token line to this file")
    p.add_argument("--report", action="store_true")
    _add_budget_flags(p, with_no_evict=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("replay", help="apply a policy to a recorded trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--policy", default="roco")
    p.add_argument("--seed", type=int)
    _add_budget_flags(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("consistency", help="Jaccard consistency vs full-cache statistics")
    p.add_argument("--trace", nargs="+", help="existing trace files (default: generate toy traces)")
    p.add_argument("--num-traces", type=int, default=20)
    p.add_argument("--steps", type=int, default=128)
    _add_config_flags(p)
    p.add_argument("--budgets", default="0.3,0.4,0.5,0.6")
    p.add_argument("--methods", default="aas,aqas,ltas,mas,random")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="fig2.csv")
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("ppl", help="perplexity under budget across policies")
    p.add_argument("--model")
    _add_config_flags(p)
    p.add_argument("--corpus", help="file with one token-id sequence per line")
    p.add_argument("--gen-corpus", type=int, default=4)
    p.add_argument("--length", type=int, default=96)
    p.add_argument("--budgets", default="0.15,0.2,0.3,0.5")
    p.add_argument("--policies", default=",".join(canonical_policy_names()))
    p.add_argument("--window", type=int)
    p.add_argument("--block", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="fig5.csv")
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("scope-sweep", help="scope-size sensitivity for one importance method")
    p.add_argument("--trace", help="replay mode: consistency metric on this trace")
    p.add_argument("--model", help="live mode: perplexity on a corpus")
    _add_config_flags(p)
    p.add_argument("--corpus")
    p.add_argument("--gen-corpus", type=int, default=2)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--scopes", default="window,std")
    p.add_argument("--r-values", default="4,8,16")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="fig4.csv")
    _add_budget_flags(p)
    p.set_defaults(func=cmd_scope_sweep)

    p = sub.add_parser("std", help="running attention-std trajectory of one position")
    p.add_argument("--trace", required=True)
    p.add_argument("--position", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="fig3.csv")
    p.set_defaults(func=cmd_std)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, TraceFormatError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KvEvictError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
