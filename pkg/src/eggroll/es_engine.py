"""Evolution-strategies optimisation loop over matrix parameters.

``eggroll_step`` samples a rank-r perturbation per worker from counter-based
streams, evaluates every member, shapes the fitnesses and moves each mean
matrix by the fitness-weighted average of the perturbations.  ``openes_step``
is the same loop with dense Gaussian perturbations.  Both steps are pure
functions of ``(mu, cfg, t)``; the mean is held in float32 so that
checkpoints (float32 on disk) resume bit-exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numba
import numpy as np

from .lowrank import GGD, Gaussian, LowRankFactors, MatrixParam, aggregate_update, perturbed_forward, sample_factor_batch
from .prng import StreamKey, Tag, derive_stream, fill_gaussian_batch
from .scorefn import GaussianLimit, ScoreModel, apply_score
from .shaping import ShapingMode, antithetic_signs, centered_rank, group_z_score

__all__ = [
    "EsConfig",
    "FitnessFn",
    "MemberView",
    "StepLog",
    "RunAborted",
    "eggroll_step",
    "eggroll_update",
    "openes_step",
    "run",
    "estimate_gradient",
    "save_checkpoint",
    "load_checkpoint",
    "write_trajectory_csv",
    "TRAJECTORY_COLUMNS",
]

log = logging.getLogger(__name__)

THREADS_ENV = "EGGROLL_THREADS"
TRAJECTORY_COLUMNS = ("t", "mean_fitness", "best_fitness", "sigma", "alpha")


@dataclass
class EsConfig:
    pop_size: int = 64
    rank: int = 1
    sigma: float = 0.1
    alpha: float = 0.05
    lr_decay: float = 1.0
    sigma_decay: float = 1.0
    shaping: ShapingMode = ShapingMode.CENTERED_RANK
    antithetic: bool = True
    evals_per_member: int = 1
    # members sharing one data key; None means the whole population
    reuse_factor: int | None = None
    master_seed: int = 0
    t_max: int = 100
    method: str = "eggroll"
    factor_dist: Gaussian | GGD = field(default_factory=Gaussian)

    def __post_init__(self) -> None:
        self.shaping = ShapingMode(self.shaping)
        if self.pop_size < 1:
            raise ValueError("pop_size must be positive")
        if self.antithetic and self.pop_size % 2:
            raise ValueError("antithetic sampling needs an even pop_size")
        if self.shaping is ShapingMode.ANTITHETIC_SIGN and not self.antithetic:
            raise ValueError("sign shaping needs antithetic pairs")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not (self.sigma > 0 and self.alpha > 0):
            raise ValueError("sigma and alpha must be positive")
        for name in ("lr_decay", "sigma_decay"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.evals_per_member < 1:
            raise ValueError("evals_per_member must be positive")
        if self.reuse_factor is not None:
            if self.reuse_factor < 1:
                raise ValueError("reuse_factor must be positive")
            if self.antithetic and self.reuse_factor % 2:
                raise ValueError("with antithetic pairs reuse_factor must be even")
            if self.shaping is ShapingMode.GROUP_ZSCORE and self.reuse_factor < self.pop_size:
                raise ValueError("group z-score needs every member to see the same questions")
        if self.method not in ("eggroll", "openes"):
            raise ValueError(f"unknown method {self.method!r}")

    def sigma_at(self, t: int) -> float:
        return self.sigma * self.sigma_decay**t

    def alpha_at(self, t: int) -> float:
        return self.alpha * self.lr_decay**t


class FitnessFn(Protocol):
    def __call__(self, view: "MemberView", data_key: StreamKey) -> float: ...


class MemberView:
    """Parameters of one population member: the means plus its perturbations.

    ``perturbations[k]`` is a :class:`LowRankFactors` (EGGROLL) or a dense
    matrix (OpenES).  Fitness functions either push inputs through
    :meth:`forward` (the decomposed path) or ask for :meth:`matrix`.
    """

    def __init__(self, mu: Sequence[np.ndarray], perturbations: Sequence, sigma: float):
        self.mu = mu
        self.perturbations = perturbations
        self.sigma = sigma

    def __len__(self) -> int:
        return len(self.mu)

    def forward(self, k: int, x) -> np.ndarray:
        pert = self.perturbations[k]
        if isinstance(pert, LowRankFactors):
            return perturbed_forward(x, self.mu[k], pert, self.sigma)
        x = np.asarray(x, dtype=np.float64)
        return x @ (self.mu[k].astype(np.float64) + self.sigma * pert).T

    def matrix(self, k: int) -> np.ndarray:
        pert = self.perturbations[k]
        mu = self.mu[k].astype(np.float64)
        if isinstance(pert, LowRankFactors):
            return mu + self.sigma * (pert.A @ pert.B.T) * pert.scale
        return mu + self.sigma * pert

    def matrices(self) -> list[np.ndarray]:
        return [self.matrix(k) for k in range(len(self.mu))]


@dataclass
class StepLog:
    t: int
    mean_fitness: float
    best_fitness: float
    sigma: float
    alpha: float
    nonfinite: int = 0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in TRAJECTORY_COLUMNS}


class RunAborted(RuntimeError):
    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"callback failed at step {step}: {cause!r}")
        self.step = step


def _thread_count(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    return max(1, threads)


def _as_mu_list(mu) -> list[np.ndarray]:
    if isinstance(mu, (np.ndarray, MatrixParam)):
        mu = [mu]
    out = []
    for m in mu:
        arr = m.mu if isinstance(m, MatrixParam) else np.asarray(m)
        if arr.ndim != 2:
            raise ValueError("every parameter must be a matrix")
        out.append(np.ascontiguousarray(arr, dtype=np.float32))
    return out


def _noise_workers(cfg: EsConfig) -> tuple[np.ndarray, np.ndarray]:
    """Stream index and sign for every member."""
    idx = np.arange(cfg.pop_size)
    if cfg.antithetic:
        return idx // 2, np.where(idx % 2 == 0, 1.0, -1.0)
    return idx, np.ones(cfg.pop_size)


def _data_keys(cfg: EsConfig, t: int, member: int) -> list[StreamKey]:
    reuse = cfg.reuse_factor or cfg.pop_size
    group = member // reuse
    return [
        derive_stream(cfg.master_seed, t, group * cfg.evals_per_member + j, 0, Tag.DATA)
        for j in range(cfg.evals_per_member)
    ]


def _evaluate(cfg: EsConfig, t: int, views: list[MemberView], fitness: FitnessFn, threads: int) -> np.ndarray:
    """Fitness matrix of shape (evals_per_member, pop_size)."""

    def one(i: int) -> list[float]:
        return [float(fitness(views[i], key)) for key in _data_keys(cfg, t, i)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(one, range(len(views))))
    else:
        cols = [one(i) for i in range(len(views))]
    return np.asarray(cols, dtype=np.float64).T


def _shape(cfg: EsConfig, S: np.ndarray, t: int) -> tuple[np.ndarray, int]:
    bad = ~np.isfinite(S)
    n_bad = int(bad.sum())
    if n_bad:
        finite = S[~bad]
        fill = finite.min() if finite.size else 0.0
        S = np.where(bad, fill, S)
        log.warning("step %d: %d non-finite fitness values replaced by the population minimum", t, n_bad)
    mode = cfg.shaping
    if mode is ShapingMode.GROUP_ZSCORE:
        return group_z_score(S), n_bad
    f = S.mean(axis=0)
    if mode is ShapingMode.RAW:
        return f, n_bad
    if mode is ShapingMode.CENTERED_RANK:
        return centered_rank(f), n_bad
    return antithetic_signs(f), n_bad


def _finish(cfg: EsConfig, t: int, mu: list[np.ndarray], updates: list[np.ndarray], S: np.ndarray, n_bad: int):
    alpha = cfg.alpha_at(t)
    new_mu = [(m.astype(np.float64) + alpha * u).astype(np.float32) for m, u in zip(mu, updates)]
    raw = S.mean(axis=0)
    raw = raw[np.isfinite(raw)]
    step = StepLog(
        t=t,
        mean_fitness=float(raw.mean()) if raw.size else math.nan,
        best_fitness=float(raw.max()) if raw.size else math.nan,
        sigma=cfg.sigma_at(t),
        alpha=alpha,
        nonfinite=n_bad,
    )
    return new_mu, step


def _eggroll_updates(mu: list[np.ndarray], cfg: EsConfig, t: int, fitness: FitnessFn, threads: int | None):
    sigma = cfg.sigma_at(t)
    workers, signs = _noise_workers(cfg)
    uniq = np.unique(workers)
    factors = []
    for k, m in enumerate(mu):
        A, B = sample_factor_batch(cfg.master_seed, t, uniq, k, m.shape[0], m.shape[1], cfg.rank, cfg.factor_dist)
        A = A[workers] * signs[:, None, None]
        factors.append((A, B[workers]))
    views = [
        MemberView(mu, [LowRankFactors(A[i], B[i]) for A, B in factors], sigma) for i in range(cfg.pop_size)
    ]
    S = _evaluate(cfg, t, views, fitness, _thread_count(threads))
    f, n_bad = _shape(cfg, S, t)
    updates = [aggregate_update(A, B, f, cfg.rank) for A, B in factors]
    return updates, S, n_bad


def eggroll_update(mu, cfg: EsConfig, t: int, fitness: FitnessFn, threads: int | None = None) -> list[np.ndarray]:
    """The float64 update direction of each matrix at step ``t`` (before scaling by alpha)."""
    return _eggroll_updates(_as_mu_list(mu), cfg, t, fitness, threads)[0]


def eggroll_step(mu, cfg: EsConfig, t: int, fitness: FitnessFn, threads: int | None = None):
    """One low-rank ES update.  Returns ``(new_mu, StepLog)``."""
    mu = _as_mu_list(mu)
    updates, S, n_bad = _eggroll_updates(mu, cfg, t, fitness, threads)
    return _finish(cfg, t, mu, updates, S, n_bad)


@numba.njit(cache=True)
def _dense_aggregate(E, f, out):
    N = E.shape[0]
    for i in range(N):
        fi = f[i]
        if fi == 0.0:
            continue
        out += fi * E[i]
    return out


def openes_step(mu, cfg: EsConfig, t: int, fitness: FitnessFn, threads: int | None = None):
    """One full-rank (OpenES) update with dense Gaussian perturbations."""
    mu = _as_mu_list(mu)
    sigma = cfg.sigma_at(t)
    workers, signs = _noise_workers(cfg)
    uniq = np.unique(workers)
    sigma0 = cfg.factor_dist.sigma0 if isinstance(cfg.factor_dist, Gaussian) else 1.0
    dense = []
    for k, m in enumerate(mu):
        E = fill_gaussian_batch(cfg.master_seed, t, uniq, k, Tag.FACTOR_A, m.size, sigma0)
        dense.append(E.reshape(-1, *m.shape)[workers] * signs[:, None, None])
    views = [MemberView(mu, [E[i] for E in dense], sigma) for i in range(cfg.pop_size)]
    S = _evaluate(cfg, t, views, fitness, _thread_count(threads))
    f, n_bad = _shape(cfg, S, t)
    updates = []
    for E in dense:
        out = np.zeros(E.shape[1:], dtype=np.float64)
        updates.append(_dense_aggregate(np.ascontiguousarray(E), f, out) / cfg.pop_size)
    return _finish(cfg, t, mu, updates, S, n_bad)


# -- checkpoints ------------------------------------------------------------------

_CKPT_MAGIC = b"ESMU"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHHIQddQ")


def save_checkpoint(path, mu, t: int, sigma_t: float, alpha_t: float, master_seed: int) -> None:
    """Versioned header, per-matrix dims, then row-major little-endian float32 data."""
    mu = _as_mu_list(mu)
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, 0, len(mu), t, sigma_t, alpha_t, master_seed))
        for m in mu:
            fh.write(struct.pack("<II", *m.shape))
        for m in mu:
            fh.write(m.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    magic, version, _, count, t, sigma_t, alpha_t, seed = _CKPT_HEADER.unpack_from(data, 0)
    if magic != _CKPT_MAGIC:
        raise ValueError(f"{path}: not an ES checkpoint")
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    dims = []
    for _ in range(count):
        dims.append(struct.unpack_from("<II", data, off))
        off += 8
    mu = []
    for m, n in dims:
        arr = np.frombuffer(data, dtype="<f4", count=m * n, offset=off).reshape(m, n)
        mu.append(arr.astype(np.float32))
        off += 4 * m * n
    return {"mu": mu, "t": t, "sigma": sigma_t, "alpha": alpha_t, "master_seed": seed}


# -- outer loop ------------------------------------------------------------------


def run(
    cfg: EsConfig,
    fitness: FitnessFn,
    mu0,
    callbacks: Iterable[Callable] = (),
    start: int = 0,
    threads: int | None = None,
    timings: list | None = None,
):
    """Iterate the configured step from ``start`` up to ``cfg.t_max``.

    Returns ``(mu, logs)``.  Each callback is called as ``cb(t, mu, step_log)``
    after the update; an exception aborts the run with :class:`RunAborted`.
    Wall-clock seconds per step are appended to ``timings`` when given, so
    that the trajectory itself stays reproducible.
    """
    step_fn = eggroll_step if cfg.method == "eggroll" else openes_step
    mu = _as_mu_list(mu0)
    logs: list[StepLog] = []
    callbacks = list(callbacks)
    for t in range(start, cfg.t_max):
        t0 = time.perf_counter()
        mu, step = step_fn(mu, cfg, t, fitness, threads)
        if timings is not None:
            timings.append(time.perf_counter() - t0)
        logs.append(step)
        for cb in callbacks:
            try:
                cb(t, mu, step)
            except Exception as exc:
                raise RunAborted(t, exc) from exc
    return mu, logs


def write_trajectory_csv(path, logs: Sequence[StepLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for s in logs:
            w.writerow([s.t, repr(s.mean_fitness), repr(s.best_fitness), repr(s.sigma), repr(s.alpha)])


# -- gradient estimation (analysis harness) ---------------------------------------


def _score_moment(score: ScoreModel, dist) -> float:
    """E[S(z) z] for one perturbation entry; the control-variate correction."""
    if isinstance(score, GaussianLimit):
        var_entry = (dist.sigma0**2) ** 2 if isinstance(dist, Gaussian) else None
        if var_entry is None:
            raise ValueError("Gaussian-limit control variate needs Gaussian factors")
        return -var_entry / score.sigma0**4
    # exact marginal scores satisfy E[S(z) z] = -1 (integration by parts)
    return -1.0


def _perturbations(mu_shape, rank, n, first, master_seed, timestep, dist) -> np.ndarray:
    m, k = mu_shape
    workers = np.arange(first, first + n)
    if rank is None:
        sigma0 = dist.sigma0 if isinstance(dist, Gaussian) else 1.0
        Z = fill_gaussian_batch(master_seed, timestep, workers, 1, Tag.FACTOR_A, m * k, sigma0)
        return Z.reshape(n, m, k)
    A, B = sample_factor_batch(master_seed, timestep, workers, 0, m, k, rank, dist)
    return np.einsum("wir,wjr->wij", A, B) / math.sqrt(rank)


def estimate_gradient(
    mu,
    rank: int | None,
    sigma: float,
    n_samples: int,
    score: ScoreModel = GaussianLimit(1.0),
    fitness: Callable[[np.ndarray], np.ndarray] | None = None,
    *,
    master_seed: int = 0,
    dist=Gaussian(1.0),
    antithetic: bool = True,
    control_variate: bool = True,
    pilot_samples: int = 20000,
    chunk: int = 20000,
) -> np.ndarray:
    """Monte Carlo estimate of -(1/sigma) E[S(Z) f(mu + sigma Z)].

    ``rank=None`` samples dense Gaussian Z; otherwise Z = A B^T / sqrt(rank).
    ``fitness`` maps a stack of matrices (k, m, n) to k values.  Sample ``i``
    always comes from worker stream ``i``, so estimates for different ranks
    share random numbers (rank-r factors are prefixes of rank-r' factors).

    With ``antithetic`` each Z is paired with -Z.  With ``control_variate``
    the linear term <H, Z> is subtracted from the fitness and its known
    expectation added back; H is a least-squares fit on an independent pilot
    batch (timestep stream 1), so the estimator stays unbiased.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if fitness is None:
        raise ValueError("a vectorised fitness is required")
    mu = np.asarray(mu, dtype=np.float64)
    m, n = mu.shape

    def fit_values(Z: np.ndarray) -> np.ndarray:
        plus = np.asarray(fitness(mu + sigma * Z), dtype=np.float64)
        if antithetic:
            return 0.5 * (plus - np.asarray(fitness(mu - sigma * Z), dtype=np.float64))
        return plus

    H = np.zeros((m, n))
    c0 = 0.0
    if control_variate:
        Zp = _perturbations(mu.shape, None, pilot_samples, 0, master_seed, 1, dist)
        fp = fit_values(Zp)
        X = Zp.reshape(pilot_samples, -1)
        if not antithetic:
            X = np.hstack([X, np.ones((pilot_samples, 1))])
        coef = np.linalg.lstsq(X, fp, rcond=None)[0]
        H = coef[: m * n].reshape(m, n)
        c0 = 0.0 if antithetic else float(coef[-1])

    total = np.zeros((m, n))
    for first in range(0, n_samples, chunk):
        k = min(chunk, n_samples - first)
        Z = _perturbations(mu.shape, rank, k, first, master_seed, 0, dist)
        f = fit_values(Z)
        if control_variate:
            f = f - np.einsum("kij,ij->k", Z, H) - c0
        S = apply_score(Z, score)
        total += np.einsum("kij,k->ij", S, f)
    mean = total / n_samples
    if control_variate:
        mean = mean + _score_moment(score, dist) * H
    return -mean / sigma
