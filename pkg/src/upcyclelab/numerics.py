"""Deterministic 2-D kernels, the counter-based RNG, and gradient checking.

Every reduction in this module accumulates strictly left to right over the
contracted index, so results are bit-reproducible for a given element width
and agree exactly with a naive scalar loop.  Tensors are plain 2-D numpy
arrays of ``float32`` (production) or ``float64`` (gradient checking);
higher-rank data is handled as stacks of 2-D matrices.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from .errors import NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


def as_tensor2d(x, dtype=None) -> np.ndarray:
    """Validate (and optionally cast) ``x`` as a C-contiguous 2-D float array."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {arr.shape}")
    if dtype is None:
        dtype = arr.dtype if arr.dtype in FLOAT_DTYPES else np.float64
    return np.ascontiguousarray(arr, dtype=dtype)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# Matrix products
# ---------------------------------------------------------------------------


@njit(cache=True)
def _matmul_kernel(a, b, out):
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[i, j] += aip * b[p, j]


@njit(cache=True)
def _bmm_kernel(a, b, out):
    nb, n, k = a.shape
    m = b.shape[2]
    for s in range(nb):
        for i in range(n):
            for j in range(m):
                out[s, i, j] = 0.0
            for p in range(k):
                aip = a[s, i, p]
                for j in range(m):
                    out[s, i, j] += aip * b[s, p, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b``.

    ``out[i, j]`` is accumulated as ``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``
    with no fused multiply-add, so it matches a scalar triple loop bit for bit.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    if dtype not in FLOAT_DTYPES:
        dtype = np.dtype(np.float64)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    out = np.empty((a.shape[0], b.shape[1]), dtype=dtype)
    _matmul_kernel(a, b, out)
    return out


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``a[s] @ b[s]`` over a leading stack axis, same order as :func:`matmul`."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm dimension mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=dtype)
    _bmm_kernel(a, b, out)
    return out


# ---------------------------------------------------------------------------
# Row reductions
# ---------------------------------------------------------------------------


@njit(cache=True)
def _row_sum_kernel(x, out):
    n, m = x.shape
    for i in range(n):
        acc = x[i, 0]
        for j in range(1, m):
            acc += x[i, j]
        out[i] = acc


def row_sum(x: np.ndarray) -> np.ndarray:
    """Left-to-right sum of every row; returns shape ``(rows,)``."""
    x = np.ascontiguousarray(x)
    out = np.empty(x.shape[0], dtype=x.dtype)
    if x.shape[1] == 0:
        out[:] = 0
        return out
    _row_sum_kernel(x, out)
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    x = as_tensor2d(x)
    check_finite(x, "softmax input")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / row_sum(e)[:, None]


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    x = as_tensor2d(x)
    check_finite(x, "log_softmax input")
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(row_sum(np.exp(shifted)))[:, None]


def cross_entropy(logits: np.ndarray, targets) -> float:
    """Mean negative log-likelihood (nats) of ``targets`` under row-wise ``logits``."""
    loss, _ = cross_entropy_with_grad(logits, targets)
    return loss


def cross_entropy_with_grad(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean CE and its gradient with respect to ``logits``."""
    logits = as_tensor2d(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} logit rows")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    logp = log_softmax_rows(logits)
    picked = logp[np.arange(n), targets]
    loss = -float(row_sum(picked[None, :].astype(np.float64))[0]) / n
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# Counter-based random streams
# ---------------------------------------------------------------------------


def _derive_seed(seed: int, counter: int, key) -> int:
    digest = hashlib.sha256(f"{seed}/{counter}/{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """A Philox stream addressed by ``(seed, counter)``.

    Draws are a pure function of the pair.  :meth:`split` hashes a key into a
    new 64-bit Philox key, so sibling streams are disjoint keyspaces rather
    than offsets into one sequence.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) % 2**64)
        object.__setattr__(self, "counter", int(self.counter) % 2**64)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))

    def split(self, key) -> "RngStream":
        return RngStream(_derive_seed(self.seed, self.counter, key), 0)

    def advance(self, n: int = 1) -> "RngStream":
        return RngStream(self.seed, self.counter + n)

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.generator().standard_normal(shape) * std).astype(dtype)

    def truncated_normal(self, shape, std: float, dtype=np.float32, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) resampled until every draw lies within ``bound`` stds."""
        gen = self.generator()
        out = gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-5,
    indices=None,
    floor: float = 0.0,
) -> float:
    """Max relative error between central differences and ``analytic_grad``.

    The error for element i is ``|numeric - analytic| / (|analytic| + floor + 1e-8)``.
    A positive ``floor`` (typically a small fraction of the tensor's largest
    gradient) keeps elements whose true gradient is far below the tensor's
    scale from measuring finite-difference round-off instead of the backward
    pass.  ``indices`` restricts the check to a subset of flat positions.
    ``x`` is perturbed in place and restored.
    """
    if x.dtype != np.float64:
        raise NumericError("grad_check requires 64-bit tensors")
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ShapeError("grad_check needs a contiguous tensor")
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    if analytic.shape != flat.shape:
        raise ShapeError("analytic gradient shape does not match x")
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite loss while perturbing element {i}")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(numeric - analytic[i]) / (abs(analytic[i]) + floor + 1e-8)
        worst = max(worst, err)
    return worst
