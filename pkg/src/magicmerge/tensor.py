"""Dense float32 tensor helpers.

Tensors are plain ``numpy.ndarray`` objects stored as float32 in row-major
order.  Reductions (norms, inner products) accumulate in float64 so long sums
over large layers do not drift; elementwise results are cast back to float32.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, ZeroAxis

DTYPE = np.float32

# Reductions are one numpy call per tensor (no chunked parallelism), so they
# are deterministic for a given input.

Tensor = np.ndarray


def as_tensor(values, shape=None) -> Tensor:
    """Coerce ``values`` to a C-contiguous float32 array, optionally reshaped."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise ShapeMismatch(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    return arr


def _flat64(t) -> np.ndarray:
    return np.asarray(t, dtype=np.float64).ravel()


def _same_shape(a, b, op: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{op}: shapes {np.shape(a)} and {np.shape(b)} differ")


def lp_norm(t, p: int = 2) -> float:
    """``(sum |x_i|^p)^(1/p)`` over every element of ``t``."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    x = np.abs(_flat64(t))
    if x.size == 0:
        return 0.0
    if p == 1:
        return float(x.sum())
    if p == 2:
        return float(np.sqrt(np.dot(x, x)))
    # scale by the max entry so x**p cannot overflow for large p
    m = x.max()
    if m == 0.0:
        return 0.0
    return float(m * np.sum((x / m) ** p) ** (1.0 / p))


def dot(a, b) -> float:
    """Inner product of two equally-shaped tensors, treated as flat vectors."""
    _same_shape(a, b, "dot")
    return float(np.dot(_flat64(a), _flat64(b)))


def project_onto(v, axis) -> Tensor:
    """Orthogonal projection of ``v`` onto the line spanned by ``axis``."""
    _same_shape(v, axis, "project_onto")
    a = _flat64(axis)
    aa = float(np.dot(a, a))
    if aa == 0.0:
        raise ZeroAxis("cannot project onto a zero axis")
    coef = float(np.dot(_flat64(v), a)) / aa
    return (coef * a).reshape(np.shape(axis)).astype(DTYPE)


def axpy(alpha: float, x, y) -> Tensor:
    """``alpha * x + y`` elementwise."""
    _same_shape(x, y, "axpy")
    out = alpha * np.asarray(x, dtype=np.float64) + np.asarray(y, dtype=np.float64)
    return out.astype(DTYPE)


def matmul(a, b) -> Tensor:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions {a.shape} x {b.shape} differ")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(DTYPE)
