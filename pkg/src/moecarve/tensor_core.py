"""Dense float32 matrix kernels.

Matrices are plain 2-D ``numpy.float32`` arrays in C (row-major) order.
Every kernel here checks shapes explicitly and never broadcasts; reductions
run in float64 and the result is stored back as float32.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

STORE = np.float32
ACCUM = np.float64


class ShapeError(ValueError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a contiguous 2-D float32 array.

    Values are converted without copying when ``a`` is already in the
    canonical layout.
    """
    m = np.ascontiguousarray(a, dtype=STORE)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=STORE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.astype(ACCUM) @ b.astype(ACCUM)
    return out.astype(STORE)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(m: np.ndarray) -> np.ndarray:
    """Elementwise ``x * sigmoid(x)``, evaluated in float64."""
    x = np.asarray(m, dtype=ACCUM)
    return (x * _sigmoid(x)).astype(STORE)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=STORE)
    b = np.asarray(b, dtype=STORE)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return (a.astype(ACCUM) * b.astype(ACCUM)).astype(STORE)


def _check_indices(indices: Sequence[int], bound: int, axis: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise IndexError(f"{axis} index out of range [0, {bound}): {idx.tolist()}")
    if np.unique(idx).size != idx.size:
        raise IndexError(f"duplicate {axis} index in {idx.tolist()}")
    return idx


def column_select(m: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    m = as_matrix(m)
    idx = _check_indices(indices, m.shape[1], "column")
    return np.ascontiguousarray(m[:, idx])


def row_select(m: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    m = as_matrix(m)
    idx = _check_indices(indices, m.shape[0], "row")
    return np.ascontiguousarray(m[idx, :])


def softmax(v) -> np.ndarray:
    x = np.asarray(v, dtype=ACCUM).reshape(-1)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(x - x.max())
    return e / e.sum()


def swiglu(x: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray) -> np.ndarray:
    """``swish(x @ w_gate) * (x @ w_up)``; the hidden state of a SwiGLU block."""
    return hadamard(swish(matmul(x, w_gate)), matmul(x, w_up))
