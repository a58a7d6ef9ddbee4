"""exporter: dump a causal LM's attention stream into a kvevict trace file.

    exporter --model <hub-id-or-path> --prompts <text file> --max-new <n> --out <trace>
"""

import argparse
import sys

from .export import ExportError, ExportJob, export


def _csv_ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="exporter", description=__doc__)
    parser.add_argument("--model", required=True, help="hub model id or local path")
    parser.add_argument("--prompts", help="prompt text file (tokenized with the model's tokenizer)")
    parser.add_argument("--prompt-ids", help="file of whitespace-separated token ids (tokenizer-free)")
    parser.add_argument("--max-new", type=int, default=0)
    parser.add_argument("--out", required=True)
    parser.add_argument("--layers", help="comma-separated layer subset, e.g. 0,1")
    parser.add_argument("--heads", help="comma-separated query-head subset (whole kv groups)")
    parser.add_argument("--stop-on-eos", action="store_true")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--source", help="source label for the trace header (default: model id)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        prompt_text = prompt_ids = None
        if args.prompt_ids:
            with open(args.prompt_ids) as fh:
                prompt_ids = [int(t) for t in fh.read().split()]
        elif args.prompts:
            with open(args.prompts) as fh:
                prompt_text = fh.read()
        else:
            raise ExportError("one of --prompts / --prompt-ids is required")
        job = ExportJob(
            model_id=args.model,
            out_path=args.out,
            prompt_text=prompt_text,
            prompt_ids=prompt_ids,
            max_new=args.max_new,
            layer_subset=_csv_ints(args.layers) if args.layers else None,
            head_subset=_csv_ints(args.heads) if args.heads else None,
            stop_on_eos=args.stop_on_eos,
            device=args.device,
            source=args.source,
        )
        summary = export(job)
    except (ExportError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(
        f"wrote {summary['path']}: {summary['records']} records "
        f"({summary['steps']} steps x {summary['layers']} layers x {summary['query_heads']} heads, "
        f"kv_heads={summary['kv_heads']})"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
