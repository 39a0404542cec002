"""Experiment drivers.  Each takes resolved settings and writes CSV output.

Every driver is a pure function of its settings and seed, except the
microbenchmark (wall-clock throughput) and the ``.timing.csv`` sidecars,
which hold the only non-reproducible numbers.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .. import es_engine
from ..es_engine import EsConfig, estimate_gradient
from ..lowrank import Gaussian, numerical_rank
from ..prng import Tag, derive_stream, fill_gaussian, fill_gaussian_batch
from ..scorefn import GaussianLimit, mf_density_gauss
from ..shaping import ShapingMode
from ..egg import int_es
from ..egg.model import EggDims, init_params, save_egg
from . import corpus as corpus_mod
from .fitness import FITNESSES, bounded_gauss_gradient, fitness_bounded_gauss, matrix_fitness

__all__ = [
    "SCHEMAS",
    "EXPERIMENTS",
    "write_csv",
    "run_rank_decay",
    "run_score_plot",
    "run_rank_law",
    "run_es_bench",
    "run_microbench",
    "run_egg_train",
    "run_tune_threshold",
]

log = logging.getLogger(__name__)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        if isinstance(v, np.integer):
            return str(int(v))
        return str(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def _gaussian_matrix(seed: int, shape: tuple[int, int], worker: int = 0) -> np.ndarray:
    return fill_gaussian(derive_stream(seed, 0, worker, 0, Tag.INIT), shape[0] * shape[1]).reshape(shape)


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


# -- rank decay ------------------------------------------------------------------


def run_rank_decay(s: dict, out) -> dict:
    """Error of the low-rank gradient estimate against the exact full-rank gradient, per rank."""
    m, n = s["m"], s["n"]
    target = s["target_scale"] * _gaussian_matrix(s["seed"], (m, n))
    mu = np.zeros((m, n))
    ref = bounded_gauss_gradient(mu, target, s["sigma"])

    def fitness(M):
        return fitness_bounded_gauss(M, target)

    errors = []
    for r in s["ranks"]:
        g = estimate_gradient(
            mu, r, s["sigma"], s["n_samples"], GaussianLimit(1.0), fitness,
            master_seed=s["seed"], control_variate=s["control_variate"], pilot_samples=s["pilot_samples"],
        )
        errors.append(float(np.linalg.norm(g - ref)))
        log.info("rank %d: error %.3e", r, errors[-1])
    slope = loglog_slope(s["ranks"], errors)
    rows = [(r, e) for r, e in zip(s["ranks"], errors)] + [("fit_slope", slope)]
    write_csv(out, ("r", "frobenius_error"), rows)
    return {"ranks": list(s["ranks"]), "errors": errors, "slope": slope}


# -- score plot ------------------------------------------------------------------


def _std_normal_pdf(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def run_score_plot(s: dict, out) -> dict:
    """z * p_r(z) of the Gaussian-factor marginal for several ranks, with the limit z * phi(z)."""
    z = np.linspace(-s["zmax"], s["zmax"], s["points"])
    # the limit density has variance s**4 / 4 when factor entries are GG(s, 2)
    sd = s["s"] ** 2 / 2.0
    limit = z * _std_normal_pdf(z / sd) / sd
    rows = []
    sup = {}
    for r in s["ranks"]:
        dens = np.array([mf_density_gauss(v, s["s"], r) for v in z])
        zd = np.where(z == 0, 0.0, z * np.where(np.isinf(dens), 0.0, dens))
        sup[r] = float(np.max(np.abs(zd - limit)))
        rows.extend((r, zi, di, zdi, li) for zi, di, zdi, li in zip(z, dens, zd, limit))
    write_csv(out, ("r", "z", "density", "density_z", "gaussian_limit"), rows)
    write_csv(_sidecar(Path(out), ".sup.csv"), ("r", "sup_distance"), sup.items())
    return {"sup_distance": sup}


# -- rank law --------------------------------------------------------------------


def run_rank_law(s: dict, out) -> dict:
    """Numerical rank of one step's update for each (N, r, m, n) case."""
    rows = []
    for case in s["cases"]:
        N, r, m, n = case
        target = _gaussian_matrix(s["seed"], (m, n))
        cfg = EsConfig(
            pop_size=N, rank=r, sigma=0.1, alpha=1.0, shaping=ShapingMode.RAW, antithetic=False,
            master_seed=s["seed"], t_max=1,
        )
        upd = es_engine.eggroll_update(np.zeros((m, n)), cfg, 0, matrix_fitness(FITNESSES["sphere"], target))[0]
        rows.append((N, r, m, n, numerical_rank(upd), min(N * r, m, n)))
    write_csv(out, ("N", "r", "m", "n", "numerical_rank", "expected"), rows)
    return {"rows": rows}


def _cases(text: str) -> tuple:
    out = []
    for part in text.split(";"):
        vals = tuple(int(v) for v in part.replace(",", " ").split())
        if len(vals) != 4:
            raise ValueError(part)
        out.append(vals)
    return tuple(out)


# -- ES benchmark ----------------------------------------------------------------


def es_bench_config(s: dict, method: str, seed: int) -> EsConfig:
    return EsConfig(
        pop_size=s["pop_size"], rank=s["rank"], sigma=s["sigma"], alpha=s["alpha"],
        lr_decay=s["lr_decay"], sigma_decay=s["sigma_decay"], shaping=ShapingMode(s["shaping"]),
        antithetic=s["antithetic"], master_seed=seed, t_max=s["steps"], method=method,
    )


def run_es_bench(s: dict, out) -> dict:
    """EGGROLL and OpenES on an analytic matrix fitness, one run per (method, seed)."""
    out = Path(out)
    shape = (s["m"], s["n"])
    fn = FITNESSES[s["fitness"]]
    rows, timing, summary = [], [], {}
    for seed in range(s["seed"], s["seed"] + s["seeds"]):
        target = _gaussian_matrix(seed, shape, worker=1)
        mu0 = np.zeros(shape, dtype=np.float32)
        for method in ("eggroll", "openes"):
            cfg = es_bench_config(s, method, seed)
            errors = []

            def record(t, mu, step, errors=errors, target=target):
                errors.append(float(np.linalg.norm(mu[0].astype(np.float64) - target)))

            times: list[float] = []
            mu, logs = es_engine.run(cfg, matrix_fitness(fn, target), [mu0], [record], timings=times)
            err0 = float(np.linalg.norm(target))
            for step, e in zip(logs, errors):
                rows.append((method, seed, step.t, step.mean_fitness, step.best_fitness, e))
            timing.extend((method, seed, i, dt) for i, dt in enumerate(times))
            summary[(method, seed)] = {"initial_error": err0, "final_error": errors[-1] if errors else err0}
            es_engine.save_checkpoint(
                _sidecar(out, f".{method}.{seed}.ckpt"), mu, cfg.t_max, cfg.sigma_at(cfg.t_max),
                cfg.alpha_at(cfg.t_max), seed,
            )
    write_csv(out, ("method", "seed", "t", "mean_fitness", "best_fitness", "error"), rows)
    write_csv(_sidecar(out, ".timing.csv"), ("method", "seed", "t", "seconds"), timing)
    return summary


# -- microbenchmark --------------------------------------------------------------


def _best_time(fn, repeats: int) -> float:
    fn()
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_microbench(s: dict, out) -> dict:
    """Rows per second of a population forward through one d x d layer, three ways.

    * ``inference``: the unperturbed batch ``X mu^T``.
    * ``decomposed``: ``X mu^T + (sigma/sqrt r) ((X B) A^T)`` per row.
    * ``naive``: each member forms ``mu + sigma E_i`` densely, then multiplies.
    """
    d, N, r = s["d"], s["pop"], s["rank"]
    sigma = 0.01
    rng_seed = s["seed"]
    mu = _gaussian_matrix(rng_seed, (d, d)).astype(np.float32)
    X = fill_gaussian_batch(rng_seed, 1, np.arange(N), 0, Tag.DATA, d).astype(np.float32)
    A = fill_gaussian_batch(rng_seed, 2, np.arange(N), 0, Tag.FACTOR_A, d * r).reshape(N, d, r).astype(np.float32)
    B = fill_gaussian_batch(rng_seed, 2, np.arange(N), 0, Tag.FACTOR_B, d * r).reshape(N, d, r).astype(np.float32)
    scale = np.float32(sigma / math.sqrt(r))
    muT = np.ascontiguousarray(mu.T)

    def inference():
        return X @ muT

    def decomposed():
        proj = np.einsum("kn,knr->kr", X, B)
        return X @ muT + scale * np.einsum("kr,kmr->km", proj, A)

    def naive():
        out = np.empty((N, d), dtype=np.float32)
        for i in range(N):
            M = mu + scale * (A[i] @ B[i].T)
            out[i] = M @ X[i]
        return out

    rates = {}
    for name, fn in (("inference", inference), ("decomposed", decomposed), ("naive", naive)):
        rates[name] = N / _best_time(fn, s["repeats"])
    write_csv(out, ("method", "pop", "dims", "rows_per_second"), [(k, N, f"{d}x{d}", v) for k, v in rates.items()])
    return rates


# -- EGG training ----------------------------------------------------------------


def _egg_corpus(s: dict) -> np.ndarray:
    if s["corpus"]:
        return np.asarray(corpus_mod.load_corpus(s["corpus"]))
    return corpus_mod.synthetic_corpus(s["corpus_bytes"], s["seed"])


def egg_train_config(s: dict) -> int_es.IntTrainConfig:
    pairs = s["pop_size"] // 2
    tau = s["threshold"] or int_es.default_threshold(pairs, s["threshold_z"])
    return int_es.IntTrainConfig(
        pop_size=s["pop_size"], sigma_shift=s["sigma_shift"], threshold=tau, segment_len=s["segment_len"],
        reuse_factor=s["reuse_factor"], evals_per_member=s["evals_per_member"], master_seed=s["seed"],
    )


def train_egg(s: dict, callback=None) -> dict:
    """Train and return losses; ``callback(step, state, metrics)`` runs after each step."""
    data = _egg_corpus(s)
    train, held = corpus_mod.split_heldout(data, s["heldout_bytes"])
    dims = EggDims(s["layers"], s["d"])
    params = init_params(dims, derive_stream(s["seed"], 0, 0, 0, Tag.INIT))
    cfg = egg_train_config(s)
    pool = int_es.NoisePool(s["seed"])
    state = int_es.init_train_state(params, cfg, train.size)
    lanes = s["eval_lanes"]
    heldout = [(0, int_es.evaluate_bits_per_byte(params, held, lanes))]
    metrics, timing = [], []
    for step in range(s["steps"]):
        t0 = time.perf_counter()
        state, m = int_es.int_train_step(state, train, cfg, pool)
        timing.append((step, time.perf_counter() - t0))
        metrics.append(m)
        if s["eval_every"] and (step + 1) % s["eval_every"] == 0 and step + 1 < s["steps"]:
            heldout.append((step + 1, int_es.evaluate_bits_per_byte(state.params, held, lanes)))
        if callback is not None:
            callback(step, state, m)
    if s["steps"]:
        heldout.append((s["steps"], int_es.evaluate_bits_per_byte(state.params, held, lanes)))
    return {"state": state, "metrics": metrics, "heldout": heldout, "timing": timing, "config": cfg}


def run_egg_train(s: dict, out) -> dict:
    """Metrics CSV at ``out``; held-out losses, wall times and the checkpoint alongside."""
    out = Path(out)
    res = train_egg(s)
    write_csv(
        out, ("step", "mean_loss", "bits_per_byte", "moved"),
        [(m["step"], m["mean_loss"], m["bits_per_byte"], m["moved"]) for m in res["metrics"]],
    )
    write_csv(_sidecar(out, ".heldout.csv"), ("step", "heldout_bits_per_byte"), res["heldout"])
    write_csv(_sidecar(out, ".timing.csv"), ("step", "seconds"), res["timing"])
    save_egg(_sidecar(out, ".egg"), res["state"].params, s["seed"], res["state"].t)
    return res


def run_tune_threshold(s: dict, out) -> dict:
    """Short training runs over a grid of threshold multiples; lower held-out loss wins."""
    rows = []
    for z in s["z_values"]:
        cfg = dict(s, threshold=0, threshold_z=z, eval_every=0)
        res = train_egg(cfg)
        tau = res["config"].tau
        rows.append((z, tau, res["heldout"][-1][1]))
        log.info("z=%s tau=%d held-out %.4f", z, tau, rows[-1][2])
    write_csv(out, ("z", "tau", "heldout_bits_per_byte"), rows)
    best = min(rows, key=lambda r: r[2])
    return {"rows": rows, "best_z": best[0]}


# -- schemas ---------------------------------------------------------------------

_EGG_COMMON = {
    "layers": (int, 6),
    "d": (int, 3),
    "pop_size": (int, 512),
    "sigma_shift": (int, 3),
    "threshold": (int, 0),
    "threshold_z": (float, int_es.DEFAULT_THRESHOLD_Z),
    "segment_len": (int, 100),
    "reuse_factor": (int, 2),
    "evals_per_member": (int, 1),
    "steps": (int, 300),
    "corpus": (str, ""),
    "corpus_bytes": (int, 1 << 20),
    "heldout_bytes": (int, 65536),
    "eval_every": (int, 25),
    "eval_lanes": (int, 64),
    "seed": (int, 0),
}


def floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


SCHEMAS: dict[str, dict[str, tuple[type, Any]]] = {
    "rank-decay": {
        "m": (int, 4),
        "n": (int, 4),
        "ranks": (tuple, (1, 2, 4, 8, 16, 32)),
        "n_samples": (int, 200_000),
        "sigma": (float, 0.25),
        "target_scale": (float, 0.3),
        "pilot_samples": (int, 20_000),
        "control_variate": (bool, True),
        "seed": (int, 0),
    },
    "score-plot": {
        "ranks": (tuple, (1, 5, 10, 50)),
        "s": (float, math.sqrt(2.0)),
        "zmax": (float, 4.0),
        "points": (int, 801),
        "seed": (int, 0),
    },
    "rank-law": {
        "cases": (_cases, ((3, 2, 16, 16), (20, 1, 8, 32))),
        "seed": (int, 0),
    },
    "es-bench": {
        "m": (int, 2),
        "n": (int, 2),
        "fitness": (str, "sphere"),
        "pop_size": (int, 512),
        "rank": (int, 1),
        "sigma": (float, 0.1),
        "alpha": (float, 0.05),
        "lr_decay": (float, 1.0),
        "sigma_decay": (float, 1.0),
        "shaping": (str, "rank"),
        "antithetic": (bool, True),
        "steps": (int, 200),
        "seeds": (int, 1),
        "seed": (int, 0),
    },
    "microbench": {
        "d": (int, 1024),
        "pop": (int, 256),
        "rank": (int, 1),
        "repeats": (int, 3),
        "seed": (int, 0),
    },
    "egg-train": dict(_EGG_COMMON),
    "tune-threshold": dict(
        _EGG_COMMON,
        layers=(int, 2),
        d=(int, 2),
        pop_size=(int, 128),
        steps=(int, 60),
        segment_len=(int, 50),
        z_values=(floats, (0.1, 0.25, 0.5, 1.0, 2.0)),
    ),
}

EXPERIMENTS = {
    "rank-decay": run_rank_decay,
    "score-plot": run_score_plot,
    "rank-law": run_rank_law,
    "es-bench": run_es_bench,
    "microbench": run_microbench,
    "egg-train": run_egg_train,
    "tune-threshold": run_tune_threshold,
}
