"""Dense float32 linear algebra with an exact FLOP ledger.

Tensors are 2-D, C-contiguous float32 numpy arrays throughout the engine.
Matrix products are the only operations charged to the ledger, at 2 FLOPs
per multiply-accumulate (``2 * m * k * n`` for an ``m x k`` by ``k x n``
product), independent of how the product is evaluated internally.  Softmax,
layer norm and elementwise work are charged zero by convention so that
closed-form cost models counting only projection matmuls can be reconciled
against measured counts with exact integer equality.

Two precision policies are supported:

* ``"strict"`` (default): products accumulate in float64 and the result is
  rounded back to float32.  This makes incremental decoding numerically
  indistinguishable from monolithic recomputation, which the cache-reuse
  correctness tests rely on.
* ``"fast"``: plain float32 BLAS, used by the wall-clock benchmark harness.

Inputs that are already float64 are multiplied in float64 and returned as
float64 regardless of policy; the fine-tuning path uses this for gradient
checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A Tensor2 is a 2-D float32 (or, on the training path, float64) ndarray.
Tensor2 = np.ndarray

KV_PROJECTION = "kv_projection"
LORA = "lora"
OTHER = "other"
CATEGORIES = (KV_PROJECTION, LORA, OTHER)

STRICT = "strict"
FAST = "fast"


@dataclass
class FlopsLedger:
    """Monotone counters of floating-point work, split by what it paid for.

    ``kv_projection`` holds the key/value projection matmuls,
    ``lora`` the low-rank adapter matmuls, and ``other`` everything else
    (query/output projections, attention products, MLP, logits).
    """

    kv_projection: int = 0
    lora: int = 0
    other: int = 0

    @property
    def total(self) -> int:
        return self.kv_projection + self.lora + self.other

    def add(self, category: str, flops: int) -> None:
        if flops < 0:
            raise ValueError(f"flops must be non-negative, got {flops}")
        if category == KV_PROJECTION:
            self.kv_projection += flops
        elif category == LORA:
            self.lora += flops
        elif category == OTHER:
            self.other += flops
        else:
            raise ValueError(f"unknown flop category {category!r}")

    def snapshot(self) -> tuple[int, int, int]:
        return (self.kv_projection, self.lora, self.other)

    def delta_since(self, snap: tuple[int, int, int]) -> tuple[int, int, int]:
        return (
            self.kv_projection - snap[0],
            self.lora - snap[1],
            self.other - snap[2],
        )


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the one PRNG used for every random tensor.

    Fixing the bit generator (and documenting it here) keeps runs
    reproducible across platforms and numpy versions that ship PCG64.
    """
    return np.random.Generator(np.random.PCG64(seed))


def random_tensor(rows: int, cols: int, rng: np.random.Generator, scale: float = 1.0) -> Tensor2:
    return (rng.standard_normal((rows, cols)) * scale).astype(np.float32)


def _check_2d(name: str, a: np.ndarray) -> None:
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D ndarray, got {getattr(a, 'shape', type(a))}")


def matmul(
    a: Tensor2,
    b: Tensor2,
    ledger: FlopsLedger | None = None,
    category: str = OTHER,
    precision: str = STRICT,
) -> Tensor2:
    """Matrix product with exact FLOP booking.

    Books ``2 * a.rows * a.cols * b.cols`` into ``ledger[category]``; the
    count reflects the mathematical operation, never the evaluation order.
    """
    _check_2d("a", a)
    _check_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: [{a.shape[0]}x{a.shape[1]}] @ [{b.shape[0]}x{b.shape[1]}]"
        )
    if ledger is not None:
        ledger.add(category, 2 * a.shape[0] * a.shape[1] * b.shape[1])
    if a.dtype == np.float64 or b.dtype == np.float64:
        return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    if precision == FAST:
        return np.matmul(a, b)
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def softmax_rows(a: Tensor2) -> Tensor2:
    """Row-wise softmax with max subtraction; each row sums to 1."""
    _check_2d("a", a)
    x = a.astype(np.float64, copy=False)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=1, keepdims=True)
    return out.astype(a.dtype)


def layer_norm(a: Tensor2, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> Tensor2:
    """Per-row normalization to zero mean / unit variance, then affine."""
    _check_2d("a", a)
    if gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise ValueError(
            f"gain/bias must have shape ({a.shape[1]},), got {gain.shape} and {bias.shape}"
        )
    x = a.astype(np.float64, copy=False)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    norm = (x - mu) / np.sqrt(var + eps)
    out = norm * gain.astype(np.float64, copy=False) + bias.astype(np.float64, copy=False)
    return out.astype(a.dtype)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation (pure numpy, smooth everywhere)."""
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d gelu / dx for the tanh approximation."""
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
