"""Fitness shaping applied to raw population fitnesses before aggregation."""

from __future__ import annotations

import enum

import numpy as np
from scipy import stats

__all__ = ["ShapingMode", "centered_rank", "antithetic_sign", "antithetic_signs", "group_z_score"]


class ShapingMode(str, enum.Enum):
    RAW = "raw"
    CENTERED_RANK = "rank"
    ANTITHETIC_SIGN = "sign"
    GROUP_ZSCORE = "zscore"


def centered_rank(f) -> np.ndarray:
    """Average ranks mapped linearly onto [-0.5, 0.5]; ties share a rank."""
    f = np.asarray(f, dtype=np.float64).ravel()
    if f.size == 0:
        raise ValueError("centered_rank needs at least one fitness")
    if f.size == 1:
        return np.zeros(1)
    ranks = stats.rankdata(f, method="average")
    return (ranks - 1.0) / (f.size - 1) - 0.5


def antithetic_sign(s_plus: float, s_minus: float) -> int:
    return int(np.sign(s_plus - s_minus))


def antithetic_signs(f) -> np.ndarray:
    """Per-member shaped fitness for a population stored as pairs (2k, 2k+1).

    Member 2k receives sign(f[2k] - f[2k+1]) and member 2k+1 its negation, so
    that weighting the pair's perturbations (+E, -E) gives 2 * sign * E.
    """
    f = np.asarray(f, dtype=np.float64).ravel()
    if f.size % 2:
        raise ValueError("antithetic shaping needs an even population")
    s = np.sign(f[0::2] - f[1::2])
    out = np.empty_like(f)
    out[0::2] = s
    out[1::2] = -s
    return out


def group_z_score(S, eps: float = 1e-8) -> np.ndarray:
    """Group-relative score of each member over a batch of questions.

    ``S`` has one row per question and one column per member.  Each entry is
    centred by its question (row) mean and divided by the standard deviation
    of all entries (population form); the result is averaged over questions.
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    # remove a reference entry first so that a constant shift cancels before
    # any rounding happens (exact whenever the differences are representable)
    S = S - S.flat[0]
    centred = S - S.mean(axis=1, keepdims=True)
    sd = S.std()
    if sd < eps:
        sd = eps
    return centred.mean(axis=0) / sd
