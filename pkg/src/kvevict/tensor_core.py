"""Dense numeric kernels used by the toy transformer.

Matrices are plain 2-D float32 ndarrays (row-major). All kernels store
float32 but accumulate in float64, and every reduction runs in a
shape-independent order (einsum, per-row numpy reductions), so computing a
row in isolation is bit-identical to computing it inside a batch. The
full-cache oracle comparisons rely on this.
"""

import numpy as np

__all__ = ["matmul", "softmax_row", "attention_step"]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded back to float32."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    # einsum (unoptimized) contracts k sequentially, never via BLAS, so the
    # accumulation order does not depend on the number of rows.
    out = np.einsum("ik,kj->ij", a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def softmax_row(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of one row of logits.

    Subtracts the max before exponentiating; exp and the normalizing sum run
    in float64. Returns float32 probabilities summing to 1 within 1e-5.
    """
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("softmax_row: empty input")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax_row: non-finite logits")
    e = np.exp(z - z.max())
    return (e / e.sum()).astype(np.float32)


def attention_step(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention of one query over the retained keys.

    Returns (output, probs); probs is handed back to the caller so importance
    statistics can be updated from the same row the output was computed with.
    """
    keys = np.asarray(keys, dtype=np.float32)
    values = np.asarray(values, dtype=np.float32)
    q = np.asarray(q, dtype=np.float32).ravel()
    if keys.ndim != 2 or values.ndim != 2 or keys.shape != values.shape:
        raise ValueError(f"attention_step: keys {keys.shape} / values {values.shape} mismatch")
    if keys.shape[0] < 1:
        raise ValueError("attention_step: empty key set")
    if keys.shape[1] != q.shape[0]:
        raise ValueError(f"attention_step: query dim {q.shape[0]} != key dim {keys.shape[1]}")
    scores = matmul(q[None, :], keys.T)[0] * scale
    probs = softmax_row(scores)
    out = matmul(probs[None, :], values)[0]
    return out, probs
