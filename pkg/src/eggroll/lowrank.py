"""Low-rank perturbations E = (1/sqrt(r)) A B^T that are never materialised on the hot path."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .prng import StreamKey, Tag, fill_gaussian, fill_gaussian_batch, ggd_from_raw, random_raw, random_raw_batch

__all__ = [
    "Gaussian",
    "GGD",
    "LowRankFactors",
    "MatrixParam",
    "sample_factors",
    "sample_factor_batch",
    "materialize",
    "perturbed_forward",
    "aggregate_update",
    "numerical_rank",
]


@dataclass(frozen=True)
class Gaussian:
    sigma0: float = 1.0


@dataclass(frozen=True)
class GGD:
    s: float
    p: float


@dataclass
class LowRankFactors:
    A: np.ndarray  # m x r
    B: np.ndarray  # n x r
    rank: int = field(init=False)
    scale: float = field(init=False)

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A)
        self.B = np.asarray(self.B)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[1]:
            raise ValueError(f"factor shapes {self.A.shape} and {self.B.shape} are incompatible")
        self.rank = self.A.shape[1]
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        self.scale = 1.0 / math.sqrt(self.rank)

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[0]

    def negated(self) -> "LowRankFactors":
        """Factors of -E (the antithetic partner): A is negated, B shared."""
        return LowRankFactors(-self.A, self.B)


@dataclass
class MatrixParam:
    """Mean parameter of one matrix of the search distribution."""

    mu: np.ndarray

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu)
        if self.mu.ndim != 2:
            raise ValueError("MatrixParam.mu must be a matrix")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("MatrixParam.mu has non-finite entries")

    @property
    def dims(self) -> tuple[int, int]:
        return self.mu.shape


def _draws(key: StreamKey, count: int, dist) -> np.ndarray:
    if isinstance(dist, Gaussian):
        return fill_gaussian(key, count, dist.sigma0)
    if isinstance(dist, GGD):
        if not (dist.s > 0 and dist.p > 0):
            raise ValueError("GGD needs s > 0 and p > 0")
        return ggd_from_raw(random_raw(key, count), dist.s, dist.p)
    raise TypeError(f"unknown factor distribution {dist!r}")


def _check_dims(m: int, n: int, r: int) -> None:
    if min(m, n, r) < 1:
        raise ValueError(f"m, n, r must be >= 1, got {(m, n, r)}")
    if r > min(m, n):
        warnings.warn(
            f"rank {r} exceeds min(m, n)={min(m, n)}; the perturbation is effectively full rank",
            stacklevel=3,
        )


def sample_factors(key_A: StreamKey, key_B: StreamKey, m: int, n: int, r: int, dist=Gaussian()) -> LowRankFactors:
    """Draw A (m x r) and B (n x r) from their streams.

    Entries are laid out column by column, so the first ``k`` columns of a
    rank-r draw equal a rank-k draw from the same keys.
    """
    _check_dims(m, n, r)
    A = _draws(key_A, m * r, dist).reshape(r, m).T
    B = _draws(key_B, n * r, dist).reshape(r, n).T
    return LowRankFactors(np.ascontiguousarray(A), np.ascontiguousarray(B))


def sample_factor_batch(
    master_seed: int,
    timestep: int,
    workers,
    layer: int,
    m: int,
    n: int,
    r: int,
    dist=Gaussian(),
) -> tuple[np.ndarray, np.ndarray]:
    """Factors for many workers at once: arrays of shape (W, m, r) and (W, n, r).

    Row ``w`` is identical to ``sample_factors`` with the keys of worker ``workers[w]``.
    """
    _check_dims(m, n, r)
    workers = np.atleast_1d(workers)

    def draw(tag: Tag, count: int) -> np.ndarray:
        if isinstance(dist, Gaussian):
            return fill_gaussian_batch(master_seed, timestep, workers, layer, tag, count, dist.sigma0)
        if isinstance(dist, GGD):
            raw = random_raw_batch(master_seed, timestep, workers, layer, tag, count)
            return ggd_from_raw(raw, dist.s, dist.p)
        raise TypeError(f"unknown factor distribution {dist!r}")

    A = draw(Tag.FACTOR_A, m * r).reshape(-1, r, m).transpose(0, 2, 1)
    B = draw(Tag.FACTOR_B, n * r).reshape(-1, r, n).transpose(0, 2, 1)
    return np.ascontiguousarray(A), np.ascontiguousarray(B)


def materialize(factors: LowRankFactors) -> np.ndarray:
    """Dense (1/sqrt(r)) A B^T.  Reference path for tests and small analytic fitnesses."""
    return (factors.A @ factors.B.T) * factors.scale


def _accum_dtype(dtype) -> np.dtype:
    return np.dtype(np.float64) if np.dtype(dtype).itemsize <= 8 else np.dtype(dtype)


def perturbed_forward(x, mu, factors, sigma: float) -> np.ndarray:
    """Compute x (mu + sigma E)^T without forming E.

    ``x`` is a vector of length n or a batch (k, n).  ``factors`` is either a
    single :class:`LowRankFactors` (shared by the batch) or a pair of arrays
    ``(A, B)`` of shapes (k, m, r), (k, n, r) giving one perturbation per row.
    The dense product ``x mu^T`` is a single matmul over the whole batch; the
    correction costs O(r (m + n)) per row.  Products accumulate in float64 and
    the result is returned in the input dtype.
    """
    mu_arr = mu.mu if isinstance(mu, MatrixParam) else np.asarray(mu)
    x = np.asarray(x)
    out_dtype = np.result_type(x.dtype, mu_arr.dtype)
    if not np.issubdtype(out_dtype, np.floating):
        out_dtype = np.dtype(np.float64)
    acc = _accum_dtype(out_dtype)
    m, n = mu_arr.shape
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[-1] != n:
        raise ValueError(f"input length {X.shape[-1]} does not match mu with {n} columns")
    Xa = X.astype(acc, copy=False)
    base = Xa @ mu_arr.astype(acc, copy=False).T
    if sigma != 0:
        if isinstance(factors, LowRankFactors):
            if factors.shape != (m, n):
                raise ValueError(f"factors shape {factors.shape} does not match mu {mu_arr.shape}")
            proj = Xa @ factors.B.astype(acc, copy=False)  # (k, r)
            base = base + (sigma * factors.scale) * (proj @ factors.A.astype(acc, copy=False).T)
        else:
            A, B = (np.asarray(f) for f in factors)
            if A.shape[0] != X.shape[0] or A.shape[1] != m or B.shape[1] != n or A.shape[2] != B.shape[2]:
                raise ValueError(f"batched factors {A.shape}, {B.shape} do not match input {X.shape} and mu {mu_arr.shape}")
            r = A.shape[2]
            proj = np.einsum("kn,knr->kr", Xa, B.astype(acc, copy=False))
            base = base + (sigma / math.sqrt(r)) * np.einsum("kr,kmr->km", proj, A.astype(acc, copy=False))
    out = base.astype(out_dtype, copy=False)
    return out[0] if single else out


@numba.njit(cache=True)
def _aggregate_kernel(A, B, f, out):
    # sequential worker-ascending reduction: bit-stable regardless of threading
    N, m, r = A.shape
    n = B.shape[1]
    for i in range(N):
        fi = f[i]
        if fi == 0.0:
            continue
        for a in range(m):
            for l in range(r):
                w = fi * A[i, a, l]
                for b in range(n):
                    out[a, b] += w * B[i, b, l]
    return out


def aggregate_update(A, B, f, r: int | None = None) -> np.ndarray:
    """(1/(N sqrt(r))) sum_i f_i A_i B_i^T, the fitness-weighted mean perturbation.

    ``A`` is (N, m, r) and ``B`` (N, n, r); 2-D inputs (N, m) / (N, n) are the
    rank-1 case, where the result is the ``(A * f)^T B`` product.  No per-member
    perturbation is formed and the reduction runs in worker order.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64).ravel()
    if A.ndim == 2:
        A = A[:, :, None]
    if B.ndim == 2:
        B = B[:, :, None]
    N = A.shape[0]
    if N == 0:
        raise ValueError("empty population")
    if B.shape[0] != N or f.shape[0] != N or A.shape[2] != B.shape[2]:
        raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} f{f.shape}")
    r = A.shape[2] if r is None else r
    out = np.zeros((A.shape[1], B.shape[1]), dtype=np.float64)
    _aggregate_kernel(np.ascontiguousarray(A), np.ascontiguousarray(B), f, out)
    return out / (N * math.sqrt(r))


def numerical_rank(M: np.ndarray, rtol: float = 1e-8) -> int:
    """Number of singular values above ``rtol * sigma_max``."""
    s = np.linalg.svd(np.asarray(M, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))
