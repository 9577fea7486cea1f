"""Per-layer key/value store with logical length, truncation, and append.

One cache instance belongs to one generation session.  Buffers are
preallocated to ``capacity`` rows per layer so that appends are row writes
and never reallocate, keeping allocation noise out of wall-clock
benchmarks.  ``truncate`` only moves the logical length; retained rows are
bit-identical to what was stored.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class CapacityError(ValueError):
    """Raised when an append would exceed the preallocated capacity."""


class KvCache:
    def __init__(self, layers: int, hidden: int, capacity: int, dtype=np.float32):
        if layers < 1 or hidden < 1 or capacity < 1:
            raise ValueError(
                f"layers, hidden, capacity must be positive, got {layers}, {hidden}, {capacity}"
            )
        self.layers = layers
        self.hidden = hidden
        self.capacity = capacity
        self.logical_len = 0
        self._k = [np.zeros((capacity, hidden), dtype=dtype) for _ in range(layers)]
        self._v = [np.zeros((capacity, hidden), dtype=dtype) for _ in range(layers)]

    def keys(self, layer: int, upto: int | None = None) -> np.ndarray:
        """View of the first ``upto`` (default logical_len) key rows of a layer."""
        end = self.logical_len if upto is None else upto
        return self._k[layer][:end]

    def values(self, layer: int, upto: int | None = None) -> np.ndarray:
        end = self.logical_len if upto is None else upto
        return self._v[layer][:end]

    def truncate(self, keep: int) -> "KvCache":
        if keep < 0 or keep > self.logical_len:
            raise ValueError(
                f"truncate keep={keep} outside [0, logical_len={self.logical_len}]"
            )
        self.logical_len = keep
        return self

    def append(
        self,
        new_keys: Sequence[np.ndarray],
        new_values: Sequence[np.ndarray],
    ) -> "KvCache":
        """Append the same number of rows to every layer."""
        if len(new_keys) != self.layers or len(new_values) != self.layers:
            raise ValueError(
                f"expected {self.layers} per-layer tensors, got {len(new_keys)} keys "
                f"and {len(new_values)} values"
            )
        rows = new_keys[0].shape[0]
        for layer in range(self.layers):
            if new_keys[layer].shape[0] != rows or new_values[layer].shape[0] != rows:
                raise ValueError("all layers must append the same number of rows")
        if self.logical_len + rows > self.capacity:
            raise CapacityError(
                f"append of {rows} rows at {self.logical_len} exceeds capacity {self.capacity}"
            )
        for layer in range(self.layers):
            self.write_rows(layer, self.logical_len, new_keys[layer], new_values[layer])
        self.advance(rows)
        return self

    # The incremental forward pass writes each layer's rows as it computes
    # them, then bumps the logical length once; append() is built on these.

    def write_rows(self, layer: int, start: int, keys: np.ndarray, values: np.ndarray) -> None:
        if keys.shape != values.shape or keys.ndim != 2 or keys.shape[1] != self.hidden:
            raise ValueError(
                f"per-layer rows must be [n x {self.hidden}], got keys {keys.shape} "
                f"values {values.shape}"
            )
        if start != self.logical_len:
            raise ValueError(
                f"rows must be written at the logical end ({self.logical_len}), got start={start}"
            )
        end = start + keys.shape[0]
        if end > self.capacity:
            raise CapacityError(
                f"append of {keys.shape[0]} rows at {start} exceeds capacity {self.capacity}"
            )
        self._k[layer][start:end] = keys
        self._v[layer][start:end] = values

    def advance(self, rows: int) -> None:
        if self.logical_len + rows > self.capacity:
            raise CapacityError(
                f"advance by {rows} from {self.logical_len} exceeds capacity {self.capacity}"
            )
        self.logical_len += rows
