"""Writer for the kvevict binary attention-trace format (version 1).

The file format is the whole contract with the replay/analysis side:
little-endian, magic "KVTR", u32 header length, key=value text header, then
one record per (step, layer, query head) in step-major order: u32 step,
u16 layer, u16 head, u32 n, n x u32 ascending positions, n x f32
probabilities summing to 1 within 1e-4.
"""

import os
import struct
import tempfile

import numpy as np

TRACE_VERSION = 1
_MAGIC = b"KVTR"
ROW_SUM_TOL = 1e-4


class TraceWriteError(Exception):
    """A row or header that the trace format cannot represent."""


def write_trace_file(path, *, layers, query_heads, kv_heads, head_dim, source, records):
    """Write records [(step, layer, head, positions, probs), ...] atomically.

    Records must arrive step-major in (step, layer, head) order and cover
    every head at every step; probabilities are downcast to float32 and
    validated against the row-sum tolerance after the downcast.
    """
    if "\n" in source:
        raise TraceWriteError("source label must be a single line")
    steps = records[-1][0] + 1 if records else 0
    if len(records) != steps * layers * query_heads:
        raise TraceWriteError(
            f"{len(records)} records do not cover {steps} steps x {layers} layers x {query_heads} heads"
        )
    text = (
        f"version={TRACE_VERSION}\nlayers={layers}\nquery_heads={query_heads}\n"
        f"kv_heads={kv_heads}\nhead_dim={head_dim}\nsteps={steps}\nsource={source}\n"
    ).encode()
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(text)))
            fh.write(text)
            expected = ((t, l, h) for t in range(steps) for l in range(layers) for h in range(query_heads))
            for (step, layer, head, positions, probs), want in zip(records, expected):
                if (step, layer, head) != want:
                    raise TraceWriteError(f"record {(step, layer, head)} out of order, expected {want}")
                positions = np.ascontiguousarray(positions, dtype="<u4")
                probs = np.ascontiguousarray(probs, dtype="<f4")
                if positions.shape != probs.shape or positions.ndim != 1 or positions.size < 1:
                    raise TraceWriteError(f"record {(step, layer, head)}: malformed row")
                total = float(np.sum(probs, dtype=np.float64))
                if not np.all(np.isfinite(probs)) or abs(total - 1.0) > ROW_SUM_TOL:
                    raise TraceWriteError(
                        f"record {(step, layer, head)}: row sums to {total:.6f}, outside {ROW_SUM_TOL}"
                    )
                fh.write(struct.pack("<IHHI", step, layer, head, positions.size))
                fh.write(positions.tobytes())
                fh.write(probs.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
