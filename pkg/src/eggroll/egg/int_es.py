"""Integer-only low-rank ES training of the EGG model.

Each step draws one rank-1 int8 perturbation per antithetic pair and per
weight matrix, runs every member over a segment of bytes with its carried
hidden state, turns each pair's fitness difference into a sign, and moves
each weight by at most one bin where the sign-weighted sum of outer products
clears a threshold.

Perturbation factors are contiguous slices of a pre-generated pool of int8
values; slice offsets come from the counter-based streams, so a training
step involves no floating-point arithmetic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from ..prng import Tag, derive_stream, fill_gaussian, random_raw_batch
from .kernels import PackedModel, factor_offsets, run_lanes, slot_dims
from .model import EggDims, EggParams, matrix_slots, perturbed_scaled_matmul, sat8
from .tables import Tables, get_tables

__all__ = [
    "IntPerturbation",
    "IntTrainConfig",
    "TrainState",
    "NoisePool",
    "int_perturbed_matmul",
    "int_aggregate",
    "int_update",
    "default_threshold",
    "init_train_state",
    "int_train_step",
    "evaluate_bits_per_byte",
    "TAU_FROZEN",
    "DEFAULT_THRESHOLD_Z",
]

log = logging.getLogger(__name__)

# larger than any attainable |E|: parameters never move
TAU_FROZEN = 2**31 - 1
# threshold in units of the null standard deviation of E (256 sqrt(pairs));
# chosen with `eggroll tune-threshold` at desk scale and frozen here
DEFAULT_THRESHOLD_Z = 0.25


@dataclass(frozen=True)
class IntPerturbation:
    a: np.ndarray  # int8, length m (outputs)
    b: np.ndarray  # int8, length n (inputs)
    sigma_shift: int = 0

    def __post_init__(self) -> None:
        if self.sigma_shift < 0:
            raise ValueError("sigma_shift must be non-negative")
        for v in (self.a, self.b):
            if v.dtype != np.int8 or np.any(v == -128):
                raise ValueError("perturbation factors must be int8 in [-127, 127]")

    def negated(self) -> "IntPerturbation":
        return IntPerturbation(-self.a, self.b, self.sigma_shift)


@dataclass
class IntTrainConfig:
    pop_size: int = 512
    sigma_shift: int = 3
    # None derives the threshold from DEFAULT_THRESHOLD_Z and the pair count
    threshold: int | None = None
    segment_len: int = 100
    # members sharing one training sequence (Appendix-style data reuse); 2 = one per pair
    reuse_factor: int = 2
    evals_per_member: int = 1
    master_seed: int = 0
    pool_size: int = 1 << 20

    def __post_init__(self) -> None:
        if self.pop_size < 2 or self.pop_size % 2:
            raise ValueError("pop_size must be even (antithetic pairs)")
        if self.sigma_shift < 0:
            raise ValueError("sigma_shift must be non-negative")
        if self.threshold is not None and not 0 < self.threshold <= TAU_FROZEN:
            raise ValueError("threshold must be a positive 32-bit integer")
        if self.segment_len < 1 or self.evals_per_member < 1:
            raise ValueError("segment_len and evals_per_member must be positive")
        if self.reuse_factor < 2 or self.reuse_factor % 2:
            raise ValueError("reuse_factor must be an even number >= 2")

    @property
    def pairs(self) -> int:
        return self.pop_size // 2

    @property
    def tau(self) -> int:
        return self.threshold if self.threshold is not None else default_threshold(self.pairs)

    @property
    def n_slots(self) -> int:
        per_slot = self.reuse_factor // 2
        return -(-self.pairs * self.evals_per_member // per_slot)


def default_threshold(pairs: int, z: float = DEFAULT_THRESHOLD_Z) -> int:
    """z times the spread of E under random signs: 256 sqrt(pairs)."""
    return max(1, int(round(z * 256 * math.sqrt(pairs))))


# -- primitive operations ------------------------------------------------------


def int_perturbed_matmul(x: np.ndarray, theta: np.ndarray, pert: IntPerturbation | None) -> np.ndarray:
    """sat8((x theta^T + (((x . b) a) >> (4 + sigma_shift))) >> (4 + log4 n))."""
    if pert is None:
        return perturbed_scaled_matmul(x, theta, None, None, 0)
    return perturbed_scaled_matmul(x, theta, pert.a, pert.b, pert.sigma_shift)


@numba.njit(cache=True)
def _aggregate(A, B, F, out):
    N, m = A.shape
    n = B.shape[1]
    for i in range(N):
        fi = np.int32(F[i])
        if fi == 0:
            continue
        for a in range(m):
            w = fi * np.int32(A[i, a])
            if w == 0:
                continue
            for b in range(n):
                out[a, b] += w * np.int32(B[i, b])


def int_aggregate(A: np.ndarray, B: np.ndarray, F: np.ndarray) -> np.ndarray:
    """E = (F * A)^T B as an exact int32 matrix (m x n)."""
    A = np.ascontiguousarray(A)
    B = np.ascontiguousarray(B)
    F = np.ascontiguousarray(F)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0] or F.shape != (A.shape[0],):
        raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} F{F.shape}")
    for arr in (A, B, F):
        if not np.issubdtype(arr.dtype, np.integer):
            raise TypeError("int_aggregate takes integer arrays")
    if A.shape[0] * 127 * 127 >= 2**31:
        raise ValueError("population too large for an int32 accumulator")
    out = np.zeros((A.shape[1], B.shape[1]), dtype=np.int32)
    _aggregate(A.astype(np.int8), B.astype(np.int8), F.astype(np.int8), out)
    return out


def int_update(theta: np.ndarray, E: np.ndarray, tau: int) -> np.ndarray:
    """Move each entry one bin toward sign(E) where |E| > tau, clamped to [-127, 127]."""
    if tau <= 0:
        raise ValueError("threshold must be positive")
    E = np.asarray(E)
    step = np.sign(E).astype(np.int32) * (np.abs(E.astype(np.int64)) > tau)
    return sat8(theta.astype(np.int32) + step)


# -- noise pool ----------------------------------------------------------------


class NoisePool:
    """Pre-generated int8 values round(16 N(0,1)), clamped, indexed by integer offsets."""

    def __init__(self, master_seed: int, size: int = 1 << 20):
        key = derive_stream(master_seed, 0, 1, 0, Tag.INIT)
        self.values = sat8(np.rint(16.0 * fill_gaussian(key, size)))
        self.values.setflags(write=False)

    def __len__(self) -> int:
        return self.values.size

    def offsets(self, master_seed: int, t: int, pairs: np.ndarray, slot: int, tag: Tag, length: int) -> np.ndarray:
        """Offsets of each pair's factor for one matrix slot at step ``t``."""
        span = np.uint64(len(self) - length + 1)
        raw = random_raw_batch(master_seed, t, pairs, slot, tag, 1)[:, 0]
        return (raw % span).astype(np.int64)

    def gather(self, offsets: np.ndarray, length: int) -> np.ndarray:
        return self.values[offsets[:, None] + np.arange(length)]


def _pair_factors(pool: NoisePool, cfg: IntTrainConfig, dims: EggDims, t: int):
    """Per slot: (A, B) with shapes (pairs, m) and (pairs, n), int8."""
    pairs = np.arange(cfg.pairs)
    out = []
    for k, (m, n) in enumerate(slot_dims(dims)):
        A = pool.gather(pool.offsets(cfg.master_seed, t, pairs, k, Tag.FACTOR_A, m), m)
        B = pool.gather(pool.offsets(cfg.master_seed, t, pairs, k, Tag.FACTOR_B, n), n)
        out.append((A, B))
    return out


# -- training ------------------------------------------------------------------


@dataclass
class TrainState:
    params: EggParams
    lane_states: np.ndarray  # (lanes, l, D) int8
    cursors: np.ndarray  # (n_slots,) int64 positions in the corpus
    t: int = 0
    wraps: int = 0
    history: list = field(default_factory=list)


def init_train_state(params: EggParams, cfg: IntTrainConfig, corpus_len: int) -> TrainState:
    dims = params.dims
    lanes = cfg.pop_size * cfg.evals_per_member
    stride = max(1, corpus_len // cfg.n_slots)
    cursors = (np.arange(cfg.n_slots, dtype=np.int64) * stride) % corpus_len
    return TrainState(params.copy(), np.zeros((lanes, dims.layers, dims.D), np.int8), cursors)


def _lane_layout(cfg: IntTrainConfig):
    """Lane k = member * evals + e; member 2p is +, 2p+1 is -."""
    member = np.repeat(np.arange(cfg.pop_size), cfg.evals_per_member)
    e = np.tile(np.arange(cfg.evals_per_member), cfg.pop_size)
    pair = member // 2
    slot = (pair * cfg.evals_per_member + e) // (cfg.reuse_factor // 2)
    sign = np.where(member % 2 == 0, 1, -1).astype(np.int8)
    return pair, slot, sign


def _segment_tokens(corpus: np.ndarray, cursors: np.ndarray, seg: int) -> np.ndarray:
    idx = (cursors[:, None] + np.arange(seg + 1)) % corpus.size
    return corpus[idx]


def int_train_step(state: TrainState, corpus: np.ndarray, cfg: IntTrainConfig, pool: NoisePool,
                   tables: Tables | None = None) -> tuple[TrainState, dict]:
    """One update over a segment of ``cfg.segment_len`` bytes per lane."""
    tables = tables or get_tables()
    params = state.params
    dims = params.dims
    t = state.t
    pair, slot, sign = _lane_layout(cfg)
    factors = _pair_factors(pool, cfg, dims, t)
    pa = np.concatenate([A[pair] * sign[:, None] for A, _ in factors], axis=1)
    pb = np.concatenate([B[pair] for _, B in factors], axis=1)

    tokens = _segment_tokens(corpus, state.cursors, cfg.segment_len)[slot]
    lane_states = state.lane_states.copy()
    fit = run_lanes(PackedModel.from_params(params), tokens, lane_states, pa, pb, cfg.sigma_shift, tables)

    member_fit = fit.reshape(cfg.pop_size, cfg.evals_per_member).sum(axis=1)
    F = np.sign(member_fit[0::2] - member_fit[1::2]).astype(np.int8)

    new = params.copy()
    tau = cfg.tau
    for (name, layer), (A, B) in zip(matrix_slots(dims), factors):
        E = int_aggregate(A, B, F)
        if name == "emb":
            new.emb[...] = int_update(params.emb.T, E, tau).T
        elif layer is None:
            setattr(new, name, int_update(getattr(params, name), E, tau))
        else:
            getattr(new, name)[layer] = int_update(getattr(params, name)[layer], E, tau)

    cursors = state.cursors + cfg.segment_len
    wrapped = cursors >= corpus.size
    n_wrap = int(wrapped.sum())
    if n_wrap:
        log.info("step %d: %d data cursors wrapped around the corpus", t, n_wrap)
    cursors %= corpus.size

    tokens_seen = fit.size * cfg.segment_len
    loss16 = -int(fit.sum())  # total loss in 1/16-bit units
    metrics = {
        "step": t,
        "mean_loss": loss16 / tokens_seen,
        "bits_per_byte": loss16 / tokens_seen / 16.0,
        "moved": int(sum(np.count_nonzero(a != b) for a, b in zip(new.arrays().values(), params.arrays().values()))),
        "ties": int(np.count_nonzero(F == 0)),
    }
    nxt = TrainState(new, lane_states, cursors, t + 1, state.wraps + n_wrap, state.history)
    return nxt, metrics


def evaluate_bits_per_byte(params: EggParams, data: np.ndarray, lanes: int = 64, tables: Tables | None = None) -> float:
    """Held-out loss of the unperturbed model in bits per byte.

    ``data`` is cut into ``lanes`` equal chunks run in parallel from a zero
    state (the state also resets at every 0x00).
    """
    data = np.asarray(data, dtype=np.uint8)
    chunk = data.size // lanes
    if chunk < 2:
        raise ValueError("held-out slice too short for the lane count")
    tokens = data[: lanes * chunk].reshape(lanes, chunk)
    dims = params.dims
    st = np.zeros((lanes, dims.layers, dims.D), np.int8)
    fit = run_lanes(PackedModel.from_params(params), tokens, st, tables=tables)
    return -fit.sum() / (lanes * (chunk - 1)) / 16.0
