import numpy as np
import pytest

from kvtrace_exporter import ExportError, ExportJob, export
from kvtrace_exporter.cli import main
from kvtrace_exporter.trace_writer import TraceWriteError, write_trace_file

# validation side: the primary package's reader and harness are the contract
from kvevict import BudgetSpec, consistency_experiment, policy_from_name, read_trace, replay


class TestExport:
    def test_record_count_and_primary_validation(self, gpt2_dir, prompt_ids, tmp_path):
        out = tmp_path / "trace.kvtr"
        summary = export(ExportJob(gpt2_dir, str(out), prompt_ids=prompt_ids, max_new=4))
        assert summary["records"] == 12 * 2 * 2  # (8 prompt + 4 new) x layers x heads
        trace = read_trace(out)  # full structural validation happens here
        assert trace.header.steps == 12
        assert trace.header.layers == 2
        assert trace.header.query_heads == 2
        assert trace.header.source == gpt2_dir
        for t in range(12):
            for l in range(2):
                for h in range(2):
                    positions, probs = trace.row(t, l, h)
                    assert positions.shape[0] == t + 1
                    assert abs(float(probs.sum(dtype=np.float64)) - 1.0) <= 1e-4

    def test_zero_new_tokens_is_prefill_only(self, gpt2_dir, prompt_ids, tmp_path):
        out = tmp_path / "trace.kvtr"
        summary = export(ExportJob(gpt2_dir, str(out), prompt_ids=prompt_ids, max_new=0))
        assert summary["steps"] == len(prompt_ids)
        assert read_trace(out).header.steps == len(prompt_ids)

    def test_gqa_metadata_and_group_average_path(self, llama_gqa_dir, prompt_ids, tmp_path):
        out = tmp_path / "trace.kvtr"
        summary = export(ExportJob(llama_gqa_dir, str(out), prompt_ids=prompt_ids, max_new=4))
        assert summary["kv_heads"] == 2 < summary["query_heads"] == 4
        trace = read_trace(out)
        assert trace.header.kv_heads == 2
        result = replay(trace, policy_from_name("roco"), BudgetSpec(tokens=6))
        assert set(result.stats) == {(l, k) for l in range(2) for k in range(2)}

    def test_consistency_harness_runs_end_to_end(self, gpt2_dir, tmp_path):
        out = tmp_path / "trace.kvtr"
        prompt = np.random.default_rng(5).integers(1, 64, size=24).tolist()
        export(ExportJob(gpt2_dir, str(out), prompt_ids=prompt, max_new=8))
        trace = read_trace(out)
        report = consistency_experiment(trace, [0.5, 1.0], ["aas", "mas", "random"], seed=0)
        means = {(c.budget, c.method): c.mean for c in report.cells}
        assert all(means[(1.0, m)] == 1.0 for m in ("aas", "mas", "random"))
        assert all(0.0 <= v <= 1.0 for v in means.values())

    def test_text_prompt_uses_model_tokenizer(self, word_tokenizer_dir, tmp_path):
        out = tmp_path / "trace.kvtr"
        summary = export(
            ExportJob(word_tokenizer_dir, str(out), prompt_text="the cache holds keys", max_new=2)
        )
        assert summary["steps"] == 4 + 2

    def test_layer_subset_remaps(self, gpt2_dir, prompt_ids, tmp_path):
        out = tmp_path / "trace.kvtr"
        summary = export(ExportJob(gpt2_dir, str(out), prompt_ids=prompt_ids, max_new=0, layer_subset=[1]))
        assert summary["layers"] == 1
        assert read_trace(out).header.layers == 1

    def test_partial_kv_group_rejected(self, llama_gqa_dir, prompt_ids, tmp_path):
        with pytest.raises(ExportError, match="whole kv-head groups"):
            export(
                ExportJob(llama_gqa_dir, str(tmp_path / "t.kvtr"), prompt_ids=prompt_ids, head_subset=[0])
            )

    def test_whole_kv_group_subset_accepted(self, llama_gqa_dir, prompt_ids, tmp_path):
        out = tmp_path / "trace.kvtr"
        summary = export(
            ExportJob(llama_gqa_dir, str(out), prompt_ids=prompt_ids, head_subset=[2, 3])
        )
        assert summary["query_heads"] == 2
        assert summary["kv_heads"] == 1

    def test_missing_model_fails_clearly(self, tmp_path):
        with pytest.raises(ExportError, match="cannot load model"):
            export(ExportJob(str(tmp_path / "no-model"), str(tmp_path / "t.kvtr"), prompt_ids=[1, 2]))

    def test_job_needs_exactly_one_prompt_source(self, gpt2_dir, tmp_path):
        with pytest.raises(ExportError):
            ExportJob(gpt2_dir, str(tmp_path / "t.kvtr"))
        with pytest.raises(ExportError):
            ExportJob(gpt2_dir, str(tmp_path / "t.kvtr"), prompt_text="x", prompt_ids=[1])


class TestWriter:
    def test_row_sum_violation_rejected(self, tmp_path):
        rows = [(0, 0, 0, np.arange(1), np.array([0.6], np.float32))]
        with pytest.raises(TraceWriteError, match="sums to"):
            write_trace_file(
                tmp_path / "t.kvtr", layers=1, query_heads=1, kv_heads=1, head_dim=4,
                source="x", records=rows,
            )

    def test_incomplete_coverage_rejected(self, tmp_path):
        rows = [(0, 0, 0, np.arange(1), np.array([1.0], np.float32))]
        with pytest.raises(TraceWriteError, match="cover"):
            write_trace_file(
                tmp_path / "t.kvtr", layers=1, query_heads=2, kv_heads=2, head_dim=4,
                source="x", records=rows,
            )


class TestCli:
    def test_end_to_end(self, gpt2_dir, prompt_ids, tmp_path, capsys):
        ids_file = tmp_path / "prompt.txt"
        ids_file.write_text(" ".join(str(t) for t in prompt_ids))
        out = tmp_path / "trace.kvtr"
        code = main(
            ["--model", gpt2_dir, "--prompt-ids", str(ids_file), "--max-new", "4", "--out", str(out)]
        )
        assert code == 0
        assert "48 records" in capsys.readouterr().out
        assert read_trace(out).header.steps == 12

    def test_text_prompt_flag(self, word_tokenizer_dir, tmp_path, capsys):
        text = tmp_path / "prompt.txt"
        text.write_text("keys and values under budget")
        out = tmp_path / "trace.kvtr"
        code = main(["--model", word_tokenizer_dir, "--prompts", str(text), "--max-new", "0", "--out", str(out)])
        assert code == 0
        assert read_trace(out).header.steps == 5

    def test_bad_model_exit_2(self, tmp_path, capsys):
        ids_file = tmp_path / "prompt.txt"
        ids_file.write_text("1 2 3")
        code = main(["--model", str(tmp_path / "nope"), "--prompt-ids", str(ids_file), "--out", str(tmp_path / "t.kvtr")])
        assert code == 2
        assert "error" in capsys.readouterr().err
