"""Exact integer lookup tables for the EGG model.

All entries are produced with Python integer arithmetic (integer roots and
powers), so the tables carry no floating-point rounding:

* ``EXP2[i] = round(16 * 2**(i/16))`` for ``i`` in 0..255.
* ``LOG2(i) = round(16 * log2(i/16))`` for ``i >= 1``, evaluated on demand
  by a binary search over exact rounding boundaries (a 2**28 entry table
  would need 1 GiB).
* ``DIVIDE[a, b] = sat8(trunc(a / b))`` for 16-bit ``a`` and ``b`` in 0..255,
  with ``b = 0`` mapping to 0.

Rounding never meets an exact tie for EXP2 or LOG2: the only exact values
are integers.
"""

from __future__ import annotations

import functools
import math

import numpy as np

__all__ = [
    "LOG2_MAX_INPUT",
    "exp2_table",
    "log2_boundaries",
    "log2_lookup",
    "divide_table",
    "divide_rows",
    "Tables",
    "get_tables",
]

# sum of 256 EXP2 entries stays below 2**28
LOG2_MAX_INPUT = (1 << 28) - 1


def _iroot(n: int, k: int) -> int:
    """floor(n ** (1/k)) for non-negative integers."""
    if n < 2:
        return n
    x = 1 << -(-n.bit_length() // k)  # upper bound
    while True:
        y = ((k - 1) * x + n // x ** (k - 1)) // k
        if y >= x:
            break
        x = y
    while x**k > n:
        x -= 1
    while (x + 1) ** k <= n:
        x += 1
    return x


@functools.lru_cache(maxsize=None)
def _exp2_values() -> tuple[int, ...]:
    # 2 * 16 * 2**(i/16) = (2**(80+i)) ** (1/16); round(v) = floor((floor(2v) + 1) / 2)
    return tuple((_iroot(1 << (80 + i), 16) + 1) // 2 for i in range(256))


def exp2_table() -> np.ndarray:
    """EXP2 as an int64 array of 256 entries."""
    return np.array(_exp2_values(), dtype=np.int64)


@functools.lru_cache(maxsize=None)
def _log2_bounds() -> tuple[int, ...]:
    # round(16 log2 i) >= k  <=>  i**32 >= 2**(2k-1); b_k is the smallest such i
    bounds = []
    k = 1
    while True:
        target = 1 << (2 * k - 1)
        b = _iroot(target, 32)
        if b**32 < target:
            b += 1
        if b > LOG2_MAX_INPUT:
            break
        bounds.append(b)
        k += 1
    return tuple(bounds)


def log2_boundaries() -> np.ndarray:
    return np.array(_log2_bounds(), dtype=np.int64)


def log2_lookup(i):
    """round(16 * log2(i / 16)) for integer ``1 <= i < 2**28`` (scalar or array)."""
    arr = np.asarray(i)
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError("LOG2 takes integer inputs")
    if np.any(arr < 1) or np.any(arr > LOG2_MAX_INPUT):
        raise ValueError("LOG2 input outside [1, 2**28)")
    out = np.searchsorted(log2_boundaries(), arr.astype(np.int64), side="right") - 64
    return out.astype(np.int64) if arr.ndim else int(out)


@functools.lru_cache(maxsize=None)
def divide_rows() -> np.ndarray:
    """DIVIDE stored divisor-major: ``rows[b, a + 32768]``, shape (256, 65536), int8."""
    a = np.arange(-32768, 32768, dtype=np.int64)
    rows = np.zeros((256, a.size), dtype=np.int8)
    for b in range(1, 256):
        q = np.abs(a) // b * np.sign(a)  # truncation toward zero
        rows[b] = np.clip(q, -127, 127)
    rows.setflags(write=False)
    return rows


def divide_table() -> np.ndarray:
    """DIVIDE indexed ``[a + 32768, b]``: shape (65536, 256), int8 (a read-only view)."""
    return divide_rows().T


class Tables:
    """Bundle of the three lookup tables used by the forward pass and the loss."""

    def __init__(self) -> None:
        self.exp2 = exp2_table()
        self.log2_bounds = log2_boundaries()
        self.divide_rows = divide_rows()

    def divide(self, a, b):
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        return self.divide_rows[b, a + 32768]

    def log2(self, i):
        return log2_lookup(i)


@functools.lru_cache(maxsize=None)
def get_tables() -> Tables:
    return Tables()
