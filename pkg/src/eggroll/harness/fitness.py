"""Analytic fitness functions over matrices (larger is better).

Each function accepts a single matrix or a stack ``(k, m, n)`` and returns a
float or an array of ``k`` values.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "fitness_sphere",
    "fitness_rastrigin",
    "fitness_bounded_gauss",
    "FITNESSES",
    "matrix_fitness",
    "bounded_gauss_gradient",
]


def _diff(M, target) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if M.shape[-2:] != target.shape:
        raise ValueError(f"shape {M.shape} does not match target {target.shape}")
    return M - target


def _out(v: np.ndarray):
    return float(v) if v.ndim == 0 else v


def fitness_sphere(M, target):
    """-||M - M*||_F^2; maximum 0 at the target."""
    d = _diff(M, target)
    return _out(-np.sum(d * d, axis=(-2, -1)))


def fitness_rastrigin(M, target, A: float = 10.0):
    """Negated Rastrigin function of M - M*; maximum 0 at the target."""
    d = _diff(M, target)
    n = d.shape[-1] * d.shape[-2]
    return _out(-(A * n + np.sum(d * d - A * np.cos(2.0 * np.pi * d), axis=(-2, -1))))


def fitness_bounded_gauss(M, target):
    """exp(-||M - M*||_F^2), bounded in (0, 1]."""
    d = _diff(M, target)
    return _out(np.exp(-np.sum(d * d, axis=(-2, -1))))


FITNESSES: dict[str, Callable] = {
    "sphere": fitness_sphere,
    "rastrigin": fitness_rastrigin,
    "bounded_gauss": fitness_bounded_gauss,
}


def matrix_fitness(fn: Callable, targets) -> Callable:
    """Adapt an analytic fitness to the engine's ``(view, data_key)`` contract.

    With several parameter matrices the fitness is the sum over matrices.
    """
    if isinstance(targets, np.ndarray) and targets.ndim == 2:
        targets = [targets]
    targets = [np.asarray(t, dtype=np.float64) for t in targets]

    def fitness(view, data_key) -> float:
        return float(sum(fn(view.matrix(k), t) for k, t in enumerate(targets)))

    return fitness


def bounded_gauss_gradient(mu, target, sigma: float) -> np.ndarray:
    """Exact gradient of E[exp(-||mu + sigma Z - M*||^2)] over Z ~ N(0, I)."""
    d = np.asarray(mu, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    c = 1.0 + 2.0 * sigma**2
    J = np.prod(np.exp(-d * d / c) / np.sqrt(c))
    return J * (-2.0 * d / c)
