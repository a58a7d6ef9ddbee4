"""Acceptance suite: one test per acceptance criterion, at stated tolerances.

Each test prints a `ACCEPTANCE <name>: PASS` line with its runtime so the
whole gate can be read off a `pytest -s tests/test_acceptance.py` run.
"""

import math
import time

import numpy as np
import pytest

from kvevict.analysis import perplexity, std_trajectory
from kvevict.cli import main
from kvevict.errors import ConfigurationError
from kvevict.kv_cache import BudgetSpec, CacheSet, HeadCache, ImportanceStats, resolve_budget
from kvevict.policies import (
    ImportanceMethod,
    canonical_policy_names,
    event_rng,
    group_average,
    policy_from_name,
    std_scores,
    with_resolved_scope,
)
from kvevict.toy_model import ModelConfig, forward_step, generate, init_model
from kvevict.trace_io import mask_and_renormalize, read_trace, replay, trace_from_generation, write_trace

from builders import pinned_position_trace, random_trace, toy_trace
from oracles import BruteQuantStats, dense_forward, exhaustive_victims

ALL_POLICIES = canonical_policy_names()


def report(name, t0):
    print(f"\nACCEPTANCE {name}: PASS ({time.perf_counter() - t0:.2f} s)")


def test_full_budget_exactness():
    """Budget rate 1.0 generation is bit-identical to the dense oracle."""
    t0 = time.perf_counter()
    for seed in range(5):
        for kv_heads in (1, 4):
            cfg = ModelConfig(4, 4, kv_heads, 16, 256, 512, seed=seed)
            model = init_model(cfg)
            rng = np.random.default_rng(seed + 100 * kv_heads)
            prompt = rng.integers(1, 256, size=24).tolist()
            result = generate(
                model, prompt, 24, policy=policy_from_name("roco"), budget=BudgetSpec(rate=1.0)
            )
            free = generate(model, prompt, 24)
            assert result.tokens == free.tokens
            fed = result.tokens[: len(result.steps)]
            dense_logits, _ = dense_forward(model, fed)
            for t, step in enumerate(result.steps):
                assert np.array_equal(step.logits, dense_logits[t])
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"took {elapsed:.1f} s, limit 10 s"
    report("full-budget exactness", t0)


def test_streaming_statistics_oracle():
    """1000 randomized update sequences match a full-history oracle, 1e-5 rel."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n_cap = int(rng.integers(2, 65))
        steps = int(rng.integers(8, 257))
        stats = ImportanceStats(0)
        histories = []  # per live slot
        quants = []
        for _step in range(steps):
            if stats.n < n_cap and (stats.n == 0 or rng.random() < 0.5):
                stats.append_slot()
                histories.append([])
                quants.append(0)
            elif stats.n > 1 and rng.random() < 0.15:
                victim = int(rng.integers(0, stats.n))
                stats.remove(np.array([victim]))
                del histories[victim]
                del quants[victim]
            n = stats.n
            row = rng.random(n).astype(np.float32)
            row /= row.sum()
            stats.update(row)
            thr = 1.0 / n
            for i in range(n):
                p = float(row[i])
                histories[i].append(p)
                if p > thr:
                    quants[i] += 1
        acc = np.array([sum(h) for h in histories])
        acc_sq = np.array([sum(p * p for p in h) for h in histories])
        count = np.array([len(h) for h in histories])
        last = np.array([h[-1] for h in histories])
        mas = acc / count
        std = np.sqrt(np.maximum(acc_sq / count - mas * mas, 0.0))
        np.testing.assert_allclose(stats.acc, acc, rtol=1e-5)
        np.testing.assert_allclose(stats.acc_sq, acc_sq, rtol=1e-5)
        assert np.array_equal(stats.count, count)
        assert np.array_equal(stats.quant_acc, np.array(quants))
        np.testing.assert_allclose(stats.last, last, rtol=1e-5)
        view_mas = stats.acc / np.maximum(stats.count, 1)
        np.testing.assert_allclose(view_mas, mas, rtol=1e-5)
        np.testing.assert_allclose(std_scores(stats), std, rtol=1e-5, atol=1e-9)
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"took {elapsed:.1f} s, limit 5 s"
    report("streaming-statistics oracle", t0)


def test_budget_safety():
    """No head ever exceeds its budget across policies, budgets, blocks, seeds."""
    t0 = time.perf_counter()
    cfg = ModelConfig(2, 2, 2, 8, 64, 128, seed=0)
    model = init_model(cfg)
    ran = rejected = 0
    for policy_name in ALL_POLICIES:
        for tokens in (8, 16, 32):
            for block in (1, 2, 4, 8, 16):
                for seed in range(5):
                    policy = policy_from_name(policy_name, seed=seed)
                    spec = BudgetSpec(tokens=tokens, block_size=block)
                    try:
                        resolve_budget(spec, policy, 40)
                    except ConfigurationError:
                        rejected += 1
                        continue
                    rng = np.random.default_rng([seed, tokens, block])
                    prompt = rng.integers(1, 64, size=40).tolist()
                    result = generate(
                        model, prompt, 8, policy=policy, budget=spec, collect_retained=True
                    )
                    ran += 1
                    for retained in result.retained:
                        assert all(len(v) <= tokens for v in retained.values())
    assert ran > 0 and rejected > 0  # the grid includes infeasible b > B - r combos
    _blockwise_reference_check()
    report(f"budget safety ({ran} runs, {rejected} infeasible rejected)", t0)


def _blockwise_reference_check():
    """b=1 replay equals an independent token-wise simulator, every policy."""
    trace = toy_trace(steps=48, seed=7, layers=1, query_heads=1, kv_heads=1)
    budget = 12
    for policy_name in ALL_POLICIES:
        policy = policy_from_name(policy_name, seed=3)
        resolved = resolve_budget(BudgetSpec(tokens=budget, block_size=1), policy, 48)
        r = resolved.scope_r
        result = replay(trace, policy, BudgetSpec(tokens=budget, block_size=1))

        # naive reference: full histories, scores recomputed per event
        positions = []
        brute = BruteQuantStats()
        for t in range(48):
            if len(positions) == budget:
                rng = event_rng(3, 0, 0, t) if policy.importance.kind == "random" else None
                victims = exhaustive_victims(
                    brute.histories, brute.quants, positions,
                    policy.importance.kind, policy.scope.kind, r, 1, rng=rng,
                )
                for v in victims:
                    del positions[v]
                brute.remove(victims)
            positions.append(t)
            brute.append_slot()
            row_positions, row_probs = trace.rows[t][0][0]
            masked = mask_and_renormalize(row_positions, row_probs, np.array(positions))
            brute.update(masked)
            assert result.retained[t][(0, 0)] == tuple(positions), (
                f"{policy_name} diverged from token-wise reference at step {t}"
            )


def test_policy_correctness_on_hand_built_caches():
    """Victim equals the exhaustive argmin-over-scope oracle, ties included."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    for policy_name in ALL_POLICIES:
        for fixture in range(20):
            n = int(rng.integers(6, 13))
            cache = HeadCache(0)
            brute = BruteQuantStats()
            if fixture < 10:
                # staggered arrivals: counts differ across slots
                for pos in range(n):
                    cache.append(pos)
                    brute.append_slot()
                    row = rng.dirichlet(np.ones(cache.n)).astype(np.float32)
                    cache.update_stats(row)
                    brute.update(row)
            else:
                for pos in range(n):
                    cache.append(pos)
                    brute.append_slot()
                for _ in range(int(rng.integers(1, 6))):
                    if fixture < 15:
                        row = rng.dirichlet(np.ones(n)).astype(np.float32)
                    else:
                        # tie fixture: identical values everywhere
                        row = np.full(n, 1.0 / n, dtype=np.float32)
                    cache.update_stats(row)
                    brute.update(row)
            r = int(rng.integers(0, n // 2)) if policy_name in ("scissorhands", "h2o", "roco") else 0
            policy = with_resolved_scope(policy_from_name(policy_name, seed=fixture), r)
            step = n + 5
            expect = exhaustive_victims(
                brute.histories, brute.quants, list(range(n)),
                policy.importance.kind, policy.scope.kind,
                r, 1,
                rng=event_rng(fixture, 0, 0, step) if policy_name == "random" else None,
            )
            evicted = cache.evict(policy, 1, step=step, layer=0, head=0)
            assert list(evicted) == expect, f"{policy_name} fixture {fixture}"
    report("policy correctness on hand-built caches", t0)


def test_gqa_degeneracy():
    """H_kv == H statistics equal a per-head path with no averaging, 1e-6."""
    t0 = time.perf_counter()
    row = np.random.default_rng(0).dirichlet(np.ones(5)).astype(np.float32)
    assert np.array_equal(group_average([row]), row)

    cfg = ModelConfig(2, 4, 4, 8, 64, 128, seed=5)
    model = init_model(cfg)
    prompt = np.random.default_rng(5).integers(1, 64, size=32).tolist()
    caches = CacheSet(2, 4, 4, 8)
    result = generate(model, prompt, 0, caches=caches)
    manual = {key: BruteQuantStats() for key in caches.heads}
    for step in result.steps:
        for (l, h), probs in step.attention.items():
            manual[(l, h)].append_slot()
            manual[(l, h)].update(probs)
    for key, cache in caches.heads.items():
        expected = manual[key].expected()
        np.testing.assert_allclose(cache.stats.acc, expected["acc"], atol=1e-6)
        np.testing.assert_allclose(cache.stats.acc_sq, expected["acc_sq"], atol=1e-6)
        np.testing.assert_allclose(cache.stats.last, expected["last"], atol=1e-6)
        assert np.array_equal(cache.stats.count, expected["count"])
        assert np.array_equal(cache.stats.quant_acc, np.array(manual[key].quants))

    # the grouped path on an MQA model equals manual group-averaged updates
    cfg_mqa = ModelConfig(2, 4, 1, 8, 64, 128, seed=6)
    model_mqa = init_model(cfg_mqa)
    caches_mqa = CacheSet(2, 4, 1, 8)
    result_mqa = generate(model_mqa, prompt, 0, caches=caches_mqa)
    for l in range(2):
        acc = np.zeros(32)
        for t, step in enumerate(result_mqa.steps):
            rows = [step.attention[(l, h)] for h in range(4)]
            acc[: t + 1] += group_average(rows).astype(np.float64)
        np.testing.assert_allclose(caches_mqa.head(l, 0).stats.acc, acc, atol=1e-6)
    report("gqa degeneracy", t0)


def test_consistency_protocol(tmp_path):
    """Budget 1.0 gives exactly 1.0; attention methods beat random by >= 0.1."""
    t0 = time.perf_counter()
    out = tmp_path / "fig2.csv"
    code = main(
        ["consistency", "--num-traces", "20", "--steps", "128",
         "--budgets", "0.5,1.0", "--methods", "aas,aqas,ltas,mas,random",
         "--seed", "0", "--out", str(out)]
    )
    assert code == 0
    means = {}
    for line in out.read_text().splitlines()[1:]:
        cells = line.split(",")
        if cells[6] == "mean_jaccard":
            means[(float(cells[2]), cells[1])] = cells[7]
    for method in ("aas", "aqas", "ltas", "mas", "random"):
        assert means[(1.0, method)] == "1.0", f"budget 1.0 not exact for {method}"
    control = float(means[(0.5, "random")])
    for method in ("aas", "aqas", "ltas", "mas"):
        margin = float(means[(0.5, method)]) - control
        assert margin >= 0.1, f"{method} margin {margin:.3f} < 0.1"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"took {elapsed:.1f} s, limit 60 s"
    report("consistency protocol", t0)


def test_std_trajectory_oracle():
    """Running std equals prefix brute force at every step, 1e-5."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    traces = [random_trace(rng, steps=int(rng.integers(10, 40))) for _ in range(8)]
    for _ in range(100):
        trace = traces[int(rng.integers(0, len(traces)))]
        position = int(rng.integers(0, trace.header.steps))
        layer = int(rng.integers(0, trace.header.layers))
        head = int(rng.integers(0, trace.header.query_heads))
        out = std_trajectory(trace, position, layer, head)
        history = []
        for t in range(position, trace.header.steps):
            history.append(float(trace.rows[t][layer][head][1][position]))
        assert len(out) == len(history)
        for i, (step, value) in enumerate(out):
            assert step == position + i
            assert value == pytest.approx(float(np.std(history[: i + 1])), abs=1e-5)
    pinned = pinned_position_trace(steps=24, position=2, p=0.25)
    assert all(v == 0.0 for _, v in std_trajectory(pinned, 2))
    report("std-trajectory oracle", t0)


def test_perplexity_sanity(tmp_path):
    """Rate-1.0 perplexity equals the dense oracle bit-for-bit; grid finite."""
    t0 = time.perf_counter()
    cfg = ModelConfig(4, 4, 4, 16, 256, 512, seed=1)
    model = init_model(cfg)
    rng = np.random.default_rng(1)
    corpus = [rng.integers(1, 256, size=48).tolist() for _ in range(2)]
    value = perplexity(model, corpus, policy_from_name("roco"), BudgetSpec(rate=1.0))

    nll = 0.0
    targets = 0
    for seq in corpus:
        dense_logits, _ = dense_forward(model, seq[:-1])
        for t in range(len(seq) - 1):
            z = dense_logits[t].astype(np.float64)
            m = z.max()
            nll -= float(z[seq[t + 1]] - (m + math.log(np.sum(np.exp(z - m)))))
            targets += 1
    assert value == math.exp(nll / targets)

    out = tmp_path / "fig5.csv"
    code = main(
        ["ppl", "--gen-corpus", "3", "--length", "96",
         "--budgets", "0.15,0.2,0.3,0.5", "--policies", ",".join(ALL_POLICIES),
         "--seed", "1", "--out", str(out)]
    )
    assert code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 4 * 6
    for line in lines[1:]:
        v = float(line.split(",")[7])
        assert math.isfinite(v) and v >= 1.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"took {elapsed:.1f} s, limit 120 s"
    report("perplexity sanity", t0)


def test_replay_determinism(tmp_path):
    """Replay twice is bit-identical; 50 randomized traces round-trip."""
    t0 = time.perf_counter()
    trace = toy_trace(steps=48, seed=21, layers=2, query_heads=4, kv_heads=2)
    for name in ("roco", "random", "streamllm"):
        policy = policy_from_name(name, seed=2)
        a = replay(trace, policy, BudgetSpec(tokens=14, block_size=2))
        b = replay(trace, policy, BudgetSpec(tokens=14, block_size=2))
        assert a == b
    rng = np.random.default_rng(50)
    for i in range(50):
        t = random_trace(rng)
        path = tmp_path / f"t{i}.kvtr"
        write_trace(t, path)
        assert read_trace(path) == t
    report("replay determinism + trace round-trip", t0)
