"""Capture per-layer, per-head attention from a causal LM during greedy
generation and emit it as a binary attention trace.

Export is always full-cache: nothing is evicted here, constrained behavior
is computed downstream by the replay engine, which keeps a single source of
truth for eviction logic. Probabilities are downcast to float32 at write
time.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .trace_writer import write_trace_file


class ExportError(Exception):
    """Model loading or attention capture failed in a reportable way."""


@dataclass
class ExportJob:
    model_id: str  # hub name or local path
    out_path: str
    prompt_text: str | None = None
    prompt_ids: list | None = None
    max_new: int = 0
    layer_subset: list | None = None  # original layer indices, remapped to 0..k-1
    head_subset: list | None = None  # must cover whole kv groups
    stop_on_eos: bool = False
    device: str = "cpu"
    source: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.prompt_text is None) == (self.prompt_ids is None):
            raise ExportError("provide exactly one of prompt_text / prompt_ids")
        if self.max_new < 0:
            raise ExportError("max_new must be >= 0")


def _load(job: ExportJob):
    from transformers import AutoModelForCausalLM

    try:
        model = AutoModelForCausalLM.from_pretrained(
            job.model_id, attn_implementation="eager", **job.extra
        )
    except (OSError, ValueError) as exc:
        raise ExportError(f"cannot load model {job.model_id!r}: {exc}") from exc
    model.eval()
    return model.to(job.device)


def _tokenize(job: ExportJob):
    if job.prompt_ids is not None:
        return [int(t) for t in job.prompt_ids]
    from transformers import AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(job.model_id)
    except (OSError, ValueError) as exc:
        raise ExportError(f"cannot load tokenizer for {job.model_id!r}: {exc}") from exc
    ids = tokenizer(job.prompt_text, return_tensors=None)["input_ids"]
    if not ids:
        raise ExportError("prompt tokenized to an empty sequence")
    return [int(t) for t in ids]


def _geometry(model, job: ExportJob):
    cfg = model.config
    query_heads = cfg.num_attention_heads
    kv_heads = getattr(cfg, "num_key_value_heads", None) or query_heads
    head_dim = getattr(cfg, "head_dim", None) or cfg.hidden_size // query_heads
    total_layers = cfg.num_hidden_layers
    layers = list(job.layer_subset) if job.layer_subset else list(range(total_layers))
    if any(not 0 <= l < total_layers for l in layers):
        raise ExportError(f"layer subset {layers} outside 0..{total_layers - 1}")
    heads = list(job.head_subset) if job.head_subset else list(range(query_heads))
    if any(not 0 <= h < query_heads for h in heads):
        raise ExportError(f"head subset {heads} outside 0..{query_heads - 1}")
    group = query_heads // kv_heads
    if job.head_subset:
        touched = sorted({h // group for h in heads})
        if len(heads) != len(touched) * group:
            raise ExportError("head subset must cover whole kv-head groups")
        kv_heads_out = len(touched)
    else:
        kv_heads_out = kv_heads
    return layers, heads, kv_heads_out, head_dim


def _rows_from_attentions(attentions, layers, heads, step, query_offset):
    """Slice one query position's causal rows out of a forward's attentions."""
    rows = []
    for out_l, l in enumerate(layers):
        layer_attn = attentions[l]
        if layer_attn is None:
            raise ExportError("model did not expose attention probabilities (layer output is None)")
        for out_h, h in enumerate(heads):
            row = layer_attn[0, h, query_offset, : step + 1]
            rows.append((step, out_l, out_h, np.arange(step + 1, dtype=np.int64), row.numpy()))
    return rows


@torch.inference_mode()
def export(job: ExportJob) -> dict:
    """Run greedy generation with attention capture and write the trace.

    Returns a summary dict (steps, layers, heads, path). Fails with a clear
    message when the model cannot expose attention or memory runs out.
    """
    model = _load(job)
    prompt = _tokenize(job)
    layers, heads, kv_heads_out, head_dim = _geometry(model, job)
    eos = getattr(model.config, "eos_token_id", None)

    records = []
    try:
        input_ids = torch.tensor([prompt], dtype=torch.long, device=job.device)
        out = model(input_ids=input_ids, use_cache=True, output_attentions=True)
        if not getattr(out, "attentions", None):
            raise ExportError("model did not expose attention probabilities (try an eager-attention model)")
        for t in range(len(prompt)):
            records.extend(_rows_from_attentions(out.attentions, layers, heads, t, t))
        past = out.past_key_values
        logits = out.logits[:, -1, :]
        step = len(prompt)
        for _ in range(job.max_new):
            nxt = int(torch.argmax(logits[0]))
            if job.stop_on_eos and eos is not None and nxt == eos:
                break
            out = model(
                input_ids=torch.tensor([[nxt]], dtype=torch.long, device=job.device),
                past_key_values=past,
                use_cache=True,
                output_attentions=True,
            )
            if not getattr(out, "attentions", None):
                raise ExportError("model stopped exposing attention during decoding")
            records.extend(_rows_from_attentions(out.attentions, layers, heads, step, 0))
            past = out.past_key_values
            logits = out.logits[:, -1, :]
            step += 1
    except torch.cuda.OutOfMemoryError as exc:
        raise ExportError(f"out of memory while capturing attention: {exc}") from exc

    write_trace_file(
        job.out_path,
        layers=len(layers),
        query_heads=len(heads),
        kv_heads=kv_heads_out,
        head_dim=head_dim,
        source=job.source or job.model_id,
        records=records,
    )
    return {
        "path": job.out_path,
        "steps": step,
        "layers": len(layers),
        "query_heads": len(heads),
        "kv_heads": kv_heads_out,
        "records": len(records),
    }
