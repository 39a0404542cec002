"""Counter-based random streams.

Every perturbation in the optimizer is addressed by a :class:`StreamKey`
(master seed, timestep, worker, layer, tag).  Values are produced by the
Philox4x64-10 block function, so draw ``k`` of any stream can be computed
without generating draws ``0..k-1`` and without any mutable generator state.

Key/counter layout of one Philox block::

    key     = (master_seed, timestep)
    counter = (block_index, layer << 8 | tag, worker, 0)

Each block yields four 64-bit words; draw ``k`` is word ``k % 4`` of block
``k // 4``.  The bit generation path is pure integer arithmetic.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "Tag",
    "StreamKey",
    "derive_stream",
    "philox4x64",
    "random_raw",
    "random_raw_batch",
    "uniform",
    "fill_gaussian",
    "fill_gaussian_batch",
    "fill_ggd",
]

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_M32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_PHILOX_M0 = np.uint64(0xD2E7470EE14C6C93)
_PHILOX_M1 = np.uint64(0xCA5A826395121157)
_PHILOX_W0 = np.uint64(0x9E3779B97F4A7C15)
_PHILOX_W1 = np.uint64(0xBB67AE8584CAA73B)
_ROUNDS = 10
_TWO_M53 = 2.0**-53


class Tag(enum.IntEnum):
    """What a stream is used for; part of the stream address."""

    FACTOR_A = 0
    FACTOR_B = 1
    DATA = 2
    INIT = 3


def _check_range(name: str, value: int, bits: int) -> int:
    value = int(value)
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{name}={value} does not fit in an unsigned {bits}-bit field")
    return value


@dataclass(frozen=True)
class StreamKey:
    master_seed: int
    timestep: int
    worker: int
    layer: int
    tag: Tag

    def __post_init__(self) -> None:
        _check_range("master_seed", self.master_seed, 64)
        _check_range("timestep", self.timestep, 64)
        _check_range("worker", self.worker, 32)
        _check_range("layer", self.layer, 32)
        object.__setattr__(self, "tag", Tag(self.tag))

    @property
    def key_words(self) -> tuple[int, int]:
        return self.master_seed, self.timestep

    @property
    def counter_words(self) -> tuple[int, int, int]:
        """Fixed counter words (c1, c2, c3); c0 is the block index."""
        return (self.layer << 8) | int(self.tag), self.worker, 0


def derive_stream(master_seed: int, timestep: int, worker: int, layer: int, tag: Tag) -> StreamKey:
    return StreamKey(master_seed, timestep, worker, layer, Tag(tag))


def _mulhilo(a: np.ndarray, b: np.uint64) -> tuple[np.ndarray, np.ndarray]:
    """Full 64x64 -> 128 bit product, returned as (hi, lo) words."""
    a_lo = a & _M32
    a_hi = a >> _S32
    b_lo = b & _M32
    b_hi = b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _M32) + (hl & _M32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    lo = a * b
    return hi, lo


def philox4x64(counter, key) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Philox4x64-10 block function on broadcastable uint64 arrays.

    ``counter`` is a 4-sequence of arrays/ints, ``key`` a 2-sequence.
    Returns the four output words.
    """
    with np.errstate(over="ignore"):
        c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in counter)
        k0, k1 = (np.asarray(k, dtype=np.uint64) for k in key)
        c0, c1, c2, c3, k0, k1 = np.broadcast_arrays(c0, c1, c2, c3, k0, k1)
        k0 = k0.copy()
        k1 = k1.copy()
        for rnd in range(_ROUNDS):
            hi0, lo0 = _mulhilo(c0, _PHILOX_M0)
            hi1, lo1 = _mulhilo(c2, _PHILOX_M1)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            if rnd != _ROUNDS - 1:
                k0 += _PHILOX_W0
                k1 += _PHILOX_W1
    return c0, c1, c2, c3


def random_raw_batch(
    master_seed: int,
    timestep: int,
    workers,
    layer: int,
    tag: Tag,
    count: int,
    start: int = 0,
) -> np.ndarray:
    """Raw 64-bit draws ``start .. start+count`` for many workers at once.

    Returns a ``(len(workers), count)`` uint64 array; row ``w`` equals
    ``random_raw(derive_stream(master_seed, timestep, workers[w], layer, tag), count, start)``.
    """
    workers = np.atleast_1d(np.asarray(workers, dtype=np.uint64))
    if count < 0 or start < 0:
        raise ValueError("count and start must be non-negative")
    if count == 0:
        return np.zeros((workers.size, 0), dtype=np.uint64)
    first = start // 4
    last = (start + count - 1) // 4
    blocks = np.arange(first, last + 1, dtype=np.uint64)
    key = StreamKey(master_seed, timestep, 0, layer, tag)
    c1, _, c3 = key.counter_words
    words = philox4x64(
        (blocks[None, :], np.uint64(c1), workers[:, None], np.uint64(c3)),
        (np.uint64(master_seed), np.uint64(timestep)),
    )
    out = np.stack(words, axis=-1).reshape(workers.size, -1)
    offset = start - 4 * first
    return out[:, offset : offset + count]


def random_raw(key: StreamKey, count: int, start: int = 0) -> np.ndarray:
    """Raw 64-bit draws ``start .. start+count`` of one stream."""
    return random_raw_batch(
        key.master_seed, key.timestep, [key.worker], key.layer, key.tag, count, start
    )[0]


def _to_open_unit(raw: np.ndarray) -> np.ndarray:
    # top 53 bits, centred in their bucket: strictly inside (0, 1)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


def uniform(key: StreamKey, count: int, start: int = 0) -> np.ndarray:
    """Uniform draws on the open interval (0, 1)."""
    return _to_open_unit(random_raw(key, count, start))


def fill_gaussian(key: StreamKey, count: int, sigma0: float = 1.0, start: int = 0) -> np.ndarray:
    """``count`` i.i.d. N(0, sigma0^2) draws by inverse CDF of the counter stream."""
    if not sigma0 > 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    if count < 0:
        raise ValueError("count must be non-negative")
    return sigma0 * special.ndtri(uniform(key, count, start))


def fill_gaussian_batch(
    master_seed: int,
    timestep: int,
    workers,
    layer: int,
    tag: Tag,
    count: int,
    sigma0: float = 1.0,
    start: int = 0,
) -> np.ndarray:
    """Vectorised :func:`fill_gaussian` over workers, shape ``(len(workers), count)``."""
    if not sigma0 > 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    raw = random_raw_batch(master_seed, timestep, workers, layer, tag, count, start)
    return sigma0 * special.ndtri(_to_open_unit(raw))


def ggd_from_raw(raw: np.ndarray, s: float, p: float) -> np.ndarray:
    """Map raw words to GG(s, p) draws: |x| = s * G**(1/p) with G ~ Gamma(1/p, 1).

    The gamma variate is the inverse CDF of the top 53 bits; the sign comes
    from the lowest bit, which is disjoint from those.
    """
    u = _to_open_unit(raw)
    g = special.gammaincinv(1.0 / p, u)
    sign = np.where((raw & np.uint64(1)) == 1, -1.0, 1.0)
    return sign * s * g ** (1.0 / p)


def fill_ggd(key: StreamKey, count: int, s: float, p: float, start: int = 0) -> np.ndarray:
    """``count`` i.i.d. draws from the zero-mean generalised Gaussian GG(s, p)."""
    if not (s > 0 and p > 0):
        raise ValueError(f"GGD needs s > 0 and p > 0, got s={s}, p={p}")
    if count < 0:
        raise ValueError("count must be non-negative")
    return ggd_from_raw(random_raw(key, count, start), s, p)
