"""Compiled integer kernels for running many EGG lanes over token segments.

A lane is one sequence of tokens processed by one (possibly perturbed)
copy of the model with its own hidden state.  The kernels here reproduce
:mod:`eggroll.egg.model` bit for bit but loop in compiled code, with weights
stored transposed (input-major) so the inner loop runs over contiguous
output columns.  Only integer types appear in these functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .model import LAYER_MATS, EggParams, matrix_slots
from .tables import Tables, get_tables

__all__ = ["PackedModel", "slot_dims", "factor_offsets", "run_lanes", "KERNELS"]


@dataclass
class PackedModel:
    emb: np.ndarray
    headT: np.ndarray
    lnout: np.ndarray
    ln1: np.ndarray
    ln2: np.ndarray
    mlp1T: np.ndarray
    mlp2T: np.ndarray
    WfT: np.ndarray
    UfT: np.ndarray
    WhT: np.ndarray
    UhT: np.ndarray
    bf: np.ndarray
    bh: np.ndarray
    d: int

    @classmethod
    def from_params(cls, p: EggParams) -> "PackedModel":
        def t3(a):
            return np.ascontiguousarray(a.transpose(0, 2, 1))

        return cls(
            emb=np.ascontiguousarray(p.emb),
            headT=np.ascontiguousarray(p.head.T),
            lnout=p.lnout,
            ln1=p.ln1,
            ln2=p.ln2,
            mlp1T=t3(p.mlp1),
            mlp2T=t3(p.mlp2),
            WfT=t3(p.Wf),
            UfT=t3(p.Uf),
            WhT=t3(p.Wh),
            UhT=t3(p.Uh),
            bf=p.bf,
            bh=p.bh,
            d=p.dims.d,
        )


def slot_dims(params_or_dims) -> list[tuple[int, int]]:
    """(len a, len b) = (outputs, inputs) for every perturbed matrix, in slot order.

    The embedding is treated as a map from one-hot tokens (256 inputs) to D
    outputs, so its ``b`` factor is indexed by token.
    """
    dims = params_or_dims.dims if isinstance(params_or_dims, EggParams) else params_or_dims
    D = dims.D
    out = []
    for name, _ in matrix_slots(dims):
        out.append({"emb": (D, 256), "head": (256, D), "mlp1": (4 * D, D), "mlp2": (D, 4 * D)}.get(name, (D, D)))
    return out


def factor_offsets(params_or_dims) -> tuple[np.ndarray, np.ndarray]:
    sd = slot_dims(params_or_dims)
    a_off = np.concatenate([[0], np.cumsum([a for a, _ in sd])]).astype(np.int64)
    b_off = np.concatenate([[0], np.cumsum([b for _, b in sd])]).astype(np.int64)
    return a_off, b_off


@numba.njit(cache=True)
def _sat(v):
    if v > 127:
        return 127
    if v < -127:
        return -127
    return v


@numba.njit(cache=True)
def _pmv(x, Wt, pa, pb, lane, ao, bo, csh, osh, perturbed, out):
    """out[j] = sat8((x . Wt[:, j] + ((x . b) a_j >> csh)) >> osh)."""
    n, m = Wt.shape
    for j in range(m):
        out[j] = 0
    for k in range(n):
        xk = np.int32(x[k])
        if xk != 0:
            for j in range(m):
                out[j] += xk * np.int32(Wt[k, j])
    if perturbed:
        xb = np.int64(0)
        for k in range(n):
            xb += np.int64(x[k]) * np.int64(pb[lane, bo + k])
        for j in range(m):
            v = np.int64(out[j]) + ((xb * np.int64(pa[lane, ao + j])) >> csh)
            out[j] = _sat(v >> osh)
    else:
        for j in range(m):
            out[j] = _sat(out[j] >> osh)


@numba.njit(cache=True)
def _ln(y, w, two_d, div_rows, out):
    D = y.shape[0]
    total = np.int32(0)
    for j in range(D):
        v = np.int32(y[j])
        total += v if v >= 0 else -v
    mav = total >> two_d
    if mav > 127:
        mav = 127
    for j in range(D):
        out[j] = div_rows[mav, np.int32(y[j]) * np.int32(w[j]) + 32768]


@numba.njit(cache=True)
def _run_lanes(
    tokens, state, emb, headT, lnout, ln1, ln2, mlp1T, mlp2T, WfT, UfT, WhT, UhT, bf, bh,
    d, pa, pb, a_off, b_off, sigma_shift, perturbed, div_rows, exp2, log2b, fitness,
):
    L, T1 = tokens.shape
    nl, D = ln1.shape
    two_d = 2 * d
    csh = 4 + sigma_shift
    osh = 4 + d  # inputs of width D
    osh4 = 5 + d  # inputs of width 4D
    y = np.zeros(D, np.int32)
    xn = np.zeros(D, np.int32)
    t1 = np.zeros(D, np.int32)
    t2 = np.zeros(D, np.int32)
    fh = np.zeros(D, np.int32)
    hid = np.zeros(4 * D, np.int32)
    logits = np.zeros(256, np.int32)
    for lane in range(L):
        s = state[lane]
        total = np.int64(0)
        for t in range(T1 - 1):
            tok = np.int32(tokens[lane, t])
            nxt = np.int32(tokens[lane, t + 1])
            if tok == 0:
                for i in range(nl):
                    for j in range(D):
                        s[i, j] = 0
            # embedding
            if perturbed:
                bt = np.int64(pb[lane, b_off[0] + tok])
                for j in range(D):
                    corr = (bt * np.int64(pa[lane, a_off[0] + j])) >> csh
                    y[j] = _sat(np.int64(emb[tok, j]) + corr)
            else:
                for j in range(D):
                    y[j] = emb[tok, j]
            for i in range(nl):
                base = 2 + 6 * i
                # GRU block
                _ln(y, ln1[i], two_d, div_rows, xn)
                _pmv(xn, WfT[i], pa, pb, lane, a_off[base + 2], b_off[base + 2], csh, osh, perturbed, t1)
                _pmv(s[i], UfT[i], pa, pb, lane, a_off[base + 3], b_off[base + 3], csh, osh, perturbed, t2)
                for j in range(D):
                    f = _sat(t1[j] + t2[j] + np.int32(bf[i, j]))
                    t1[j] = f + 127  # gate in [0, 254]
                    fh[j] = _sat((t1[j] * np.int32(s[i, j])) >> 8)
                _pmv(xn, WhT[i], pa, pb, lane, a_off[base + 4], b_off[base + 4], csh, osh, perturbed, t2)
                _pmv(fh, UhT[i], pa, pb, lane, a_off[base + 5], b_off[base + 5], csh, osh, perturbed, xn)
                for j in range(D):
                    hh = _sat(t2[j] + xn[j] + np.int32(bh[i, j]))
                    sj = np.int32(s[i, j])
                    h = _sat(sj + _sat((t1[j] * (hh - sj)) >> 8))
                    s[i, j] = h
                    y[j] = _sat(y[j] + h)
                # MLP block
                _ln(y, ln2[i], two_d, div_rows, xn)
                _pmv(xn, mlp1T[i], pa, pb, lane, a_off[base], b_off[base], csh, osh, perturbed, hid)
                _pmv(hid, mlp2T[i], pa, pb, lane, a_off[base + 1], b_off[base + 1], csh, osh4, perturbed, t2)
                for j in range(D):
                    y[j] = _sat(y[j] + t2[j])
            _ln(y, lnout, two_d, div_rows, xn)
            _pmv(xn, headT, pa, pb, lane, a_off[1], b_off[1], csh, osh, perturbed, logits)
            # loss: y'[t'] - LOG2(sum EXP2[y'])
            acc = np.int64(0)
            for v in range(256):
                acc += exp2[logits[v] + 128]
            lg = np.searchsorted(log2b, acc, side="right") - 64
            total += np.int64(logits[nxt] + 128) - lg
        fitness[lane] = total


KERNELS = (_run_lanes, _pmv, _ln, _sat)


def run_lanes(
    model: PackedModel,
    tokens: np.ndarray,
    state: np.ndarray,
    pa: np.ndarray | None = None,
    pb: np.ndarray | None = None,
    sigma_shift: int = 0,
    tables: Tables | None = None,
) -> np.ndarray:
    """Run every lane over its token row; returns summed token log-likelihoods.

    ``tokens`` has shape (L, T+1): lane ``k`` reads ``tokens[k, :-1]`` and
    predicts ``tokens[k, 1:]``.  ``state`` (L, l, D) int8 is updated in place
    and zeroed whenever the input token is 0x00.  ``pa``/``pb`` hold each
    lane's rank-1 factors packed in slot order (see :func:`factor_offsets`).
    """
    tables = tables or get_tables()
    tokens = np.ascontiguousarray(tokens, dtype=np.uint8)
    L = tokens.shape[0]
    if state.shape[0] != L or state.dtype != np.int8:
        raise ValueError("state must be int8 with one row per lane")
    nl = model.ln1.shape[0]
    a_off, b_off = factor_offsets(_Dims(nl, model.d))
    perturbed = pa is not None
    if not perturbed:
        pa = np.zeros((1, 1), np.int8)
        pb = np.zeros((1, 1), np.int8)
    elif pa.shape != (L, a_off[-1]) or pb.shape != (L, b_off[-1]):
        raise ValueError("packed factor arrays have the wrong shape")
    fitness = np.zeros(L, np.int64)
    _run_lanes(
        tokens, state, model.emb, model.headT, model.lnout, model.ln1, model.ln2, model.mlp1T, model.mlp2T,
        model.WfT, model.UfT, model.WhT, model.UhT, model.bf, model.bh,
        np.int64(model.d), pa, pb, a_off, b_off, np.int64(sigma_shift), perturbed,
        tables.divide_rows, tables.exp2, tables.log2_bounds, fitness,
    )
    return fitness


@dataclass(frozen=True)
class _Dims:
    layers: int
    d: int

    @property
    def D(self) -> int:
        return 4**self.d


assert LAYER_MATS == ("mlp1", "mlp2", "Wf", "Uf", "Wh", "Uh")  # slot layout used by the kernel
