"""Reference implementation of the pure-integer EGG language model.

Every forward-path operation works on integer arrays only: 8-bit values in
[-127, 127], 32-bit accumulation, arithmetic (floor) right shifts, and
saturation on every narrowing.  This module is the readable oracle; the
batched training path in :mod:`eggroll.egg.kernels` must agree with it bit
for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from ..prng import StreamKey, Tag, derive_stream, fill_gaussian
from .tables import Tables, get_tables

__all__ = [
    "EggDims",
    "EggParams",
    "init_params",
    "zero_state",
    "matrix_slots",
    "sat8",
    "scaled_matmul",
    "perturbed_scaled_matmul",
    "embed",
    "layer_norm",
    "mlp_forward",
    "gru_forward",
    "egg_forward",
    "token_loss",
    "save_egg",
    "load_egg",
]

I8_MAX = 127
GRU_MATS = ("Wf", "Uf", "Wh", "Uh")
LAYER_MATS = ("mlp1", "mlp2") + GRU_MATS


@dataclass(frozen=True)
class EggDims:
    layers: int
    d: int  # hidden size is 4**d

    def __post_init__(self) -> None:
        if self.layers < 1 or self.d < 1:
            raise ValueError("layers and d must be positive")

    @property
    def D(self) -> int:
        return 4**self.d

    def param_count(self) -> int:
        D = self.D
        return 513 * D + self.layers * (4 * D + 12 * D * D)


@dataclass
class EggParams:
    """All weights as int8 arrays; per-layer tensors are stacked on axis 0."""

    emb: np.ndarray  # 256 x D
    head: np.ndarray  # 256 x D
    lnout: np.ndarray  # D
    ln1: np.ndarray  # l x D
    ln2: np.ndarray  # l x D
    mlp1: np.ndarray  # l x 4D x D
    mlp2: np.ndarray  # l x D x 4D
    Wf: np.ndarray  # l x D x D
    Uf: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bf: np.ndarray  # l x D
    bh: np.ndarray

    @property
    def dims(self) -> EggDims:
        layers, D = self.ln1.shape
        d = D.bit_length() // 2
        return EggDims(layers, d)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def copy(self) -> "EggParams":
        return EggParams(**{k: v.copy() for k, v in self.arrays().items()})

    def equals(self, other: "EggParams") -> bool:
        return all(np.array_equal(a, getattr(other, k)) for k, a in self.arrays().items())


def matrix_slots(dims: EggDims) -> list[tuple[str, int | None]]:
    """The matrices that take perturbations, in a fixed order: (field, layer)."""
    slots: list[tuple[str, int | None]] = [("emb", None), ("head", None)]
    for i in range(dims.layers):
        slots.extend((name, i) for name in LAYER_MATS)
    return slots


def _log4(n: int) -> int:
    k = (n.bit_length() - 1) // 2
    if n < 1 or 4**k != n:
        raise ValueError(f"input width {n} is not a power of 4")
    return k


def sat8(v: np.ndarray) -> np.ndarray:
    return np.clip(v, -I8_MAX, I8_MAX).astype(np.int8)


def _standard_init(key: StreamKey, shape: tuple[int, ...]) -> np.ndarray:
    # the only floating-point step: one-off host-side sampling, then rounded
    z = fill_gaussian(key, int(np.prod(shape)))
    return sat8(np.rint(16.0 * z)).reshape(shape)


def init_params(dims: EggDims, key: StreamKey) -> EggParams:
    """Matrices: round(16 N(0,1)) clamped to int8; LN weights 16; biases 0."""
    D, l = dims.D, dims.layers

    def mat(slot: int, shape) -> np.ndarray:
        sub = derive_stream(key.master_seed, key.timestep, key.worker, slot, Tag.INIT)
        return _standard_init(sub, shape)

    slot = iter(range(2 + 6 * l))
    emb = mat(next(slot), (256, D))
    head = mat(next(slot), (256, D))
    per = {name: [] for name in LAYER_MATS}
    for _ in range(l):
        for name in LAYER_MATS:
            shape = {"mlp1": (4 * D, D), "mlp2": (D, 4 * D)}.get(name, (D, D))
            per[name].append(mat(next(slot), shape))
    ones = np.full((l, D), 16, dtype=np.int8)
    zeros = np.zeros((l, D), dtype=np.int8)
    return EggParams(
        emb=emb,
        head=head,
        lnout=np.full(D, 16, dtype=np.int8),
        ln1=ones.copy(),
        ln2=ones.copy(),
        bf=zeros.copy(),
        bh=zeros.copy(),
        **{name: np.stack(v) for name, v in per.items()},
    )


def zero_state(dims: EggDims) -> np.ndarray:
    return np.zeros((dims.layers, dims.D), dtype=np.int8)


# -- operations ----------------------------------------------------------------


def scaled_matmul(x: np.ndarray, M: np.ndarray) -> np.ndarray:
    """sat8((x M^T) >> (4 + log4 n)) with 32-bit accumulation."""
    return perturbed_scaled_matmul(x, M, None, None, 0)


def perturbed_scaled_matmul(x, M, a, b, sigma_shift: int) -> np.ndarray:
    """Scaled matmul plus the rank-1 correction ``((x . b) a) >> (4 + sigma_shift)``.

    The correction is added to the 32-bit accumulator before the output
    shift.  ``a`` (length m) and ``b`` (length n) may be None for no
    perturbation.
    """
    x = np.asanyarray(x)
    M = np.asanyarray(M)
    m, n = M.shape
    if x.shape[-1] != n:
        raise ValueError(f"input width {x.shape[-1]} does not match matrix {M.shape}")
    k = _log4(n)
    acc = x.astype(np.int32) @ M.T.astype(np.int32)
    if a is not None:
        a = np.asanyarray(a)
        b = np.asanyarray(b)
        if a.shape != (m,) or b.shape != (n,):
            raise ValueError(f"perturbation shapes {a.shape}, {b.shape} do not match {M.shape}")
        xb = x.astype(np.int64) @ b.astype(np.int64)
        corr = (np.multiply.outer(xb, a.astype(np.int64))) >> (4 + sigma_shift)
        acc = acc.astype(np.int64) + corr
    return sat8(acc >> (4 + k))


def embed(emb: np.ndarray, t: int, a=None, b=None, sigma_shift: int = 0) -> np.ndarray:
    """Row ``t`` of the embedding; a perturbation adds ``(b[t] a) >> (4 + sigma_shift)``."""
    row = emb[t]
    if a is None:
        return row.copy()
    corr = (np.int64(b[t]) * np.asanyarray(a, dtype=np.int64)) >> (4 + sigma_shift)
    return sat8(row.astype(np.int64) + corr)


def layer_norm(x: np.ndarray, w: np.ndarray, tables: Tables | None = None) -> np.ndarray:
    """DIVIDE(x * w, mean |x|) with the mean taken as a shift by log2 D."""
    tables = tables or get_tables()
    D = x.shape[-1]
    two_d = 2 * _log4(D)
    xi = x.astype(np.int32)
    mav = np.minimum(np.abs(xi).sum(axis=-1, keepdims=True) >> two_d, I8_MAX)
    prod = (xi * w.astype(np.int32)).astype(np.int16)
    return tables.divide(prod, np.broadcast_to(mav, prod.shape))


def mlp_forward(x, theta1, theta2, pert1=None, pert2=None, sigma_shift: int = 0) -> np.ndarray:
    """(x @ theta1^T) @ theta2^T; saturation is the only nonlinearity."""
    a1, b1 = pert1 or (None, None)
    a2, b2 = pert2 or (None, None)
    h = perturbed_scaled_matmul(x, theta1, a1, b1, sigma_shift)
    return perturbed_scaled_matmul(h, theta2, a2, b2, sigma_shift)


def gru_forward(x, s, Wf, Uf, Wh, Uh, bf, bh, perts=None, sigma_shift: int = 0):
    """Integer minimal GRU.  Returns ``(h, h)``: output and new state."""
    p = perts or {}

    def mm(v, M, name):
        a, b = p.get(name, (None, None))
        return perturbed_scaled_matmul(v, M, a, b, sigma_shift).astype(np.int32)

    s32 = s.astype(np.int32)
    f = sat8(mm(x, Wf, "Wf") + mm(s, Uf, "Uf") + bf.astype(np.int32)).astype(np.int32)
    gate = f + 127
    f_hat = sat8((gate * s32) >> 8)
    h_hat = sat8(mm(x, Wh, "Wh") + mm(f_hat, Uh, "Uh") + bh.astype(np.int32)).astype(np.int32)
    h = sat8(s32 + sat8((gate * (h_hat - s32)) >> 8).astype(np.int32))
    return h, h


def egg_forward(t: int, s: np.ndarray, params: EggParams, tables: Tables | None = None, perts=None, sigma_shift: int = 0):
    """One token through the network: returns ``(logits, new_state)``.

    ``perts`` optionally maps ``(field, layer)`` slots (see
    :func:`matrix_slots`) to rank-1 integer factor pairs ``(a, b)``.
    """
    tables = tables or get_tables()
    p = perts or {}
    l = params.ln1.shape[0]
    s_new = np.zeros_like(s)
    a, b = p.get(("emb", None), (None, None))
    y = embed(params.emb, t, a, b, sigma_shift)
    for i in range(l):
        layer_p = {name: p[(name, i)] for name in LAYER_MATS if (name, i) in p}
        x = layer_norm(y, params.ln1[i], tables)
        y2, s_new[i] = gru_forward(
            x, s[i], params.Wf[i], params.Uf[i], params.Wh[i], params.Uh[i], params.bf[i], params.bh[i],
            layer_p, sigma_shift,
        )
        y = sat8(y2.astype(np.int32) + y.astype(np.int32))
        x = layer_norm(y, params.ln2[i], tables)
        y2 = mlp_forward(x, params.mlp1[i], params.mlp2[i], layer_p.get("mlp1"), layer_p.get("mlp2"), sigma_shift)
        y = sat8(y2.astype(np.int32) + y.astype(np.int32))
    x = layer_norm(y, params.lnout, tables)
    a, b = p.get(("head", None), (None, None))
    return perturbed_scaled_matmul(x, params.head, a, b, sigma_shift), s_new


def token_loss(y: np.ndarray, t_next: int, tables: Tables | None = None) -> int:
    """Log-likelihood of ``t_next`` in 1/16-bit units (larger is better)."""
    tables = tables or get_tables()
    yp = y.astype(np.int32) + 128
    total = int(tables.exp2[yp].sum())
    return int(yp[t_next]) - tables.log2(total)


# -- checkpoint ----------------------------------------------------------------

_EGG_MAGIC = b"EGG1"
_EGG_HEADER = struct.Struct("<4sIIQQ")
_PER_LAYER = ("ln1", "ln2", "mlp1", "mlp2", "Wf", "Uf", "Wh", "Uh", "bf", "bh")


def save_egg(path, params: EggParams, master_seed: int, step: int) -> None:
    """Header (magic, l, d, master_seed, step) then int8 blocks in field order, layer by layer."""
    dims = params.dims
    with open(path, "wb") as fh:
        fh.write(_EGG_HEADER.pack(_EGG_MAGIC, dims.layers, dims.d, master_seed, step))
        for name in ("emb", "head", "lnout"):
            fh.write(np.ascontiguousarray(getattr(params, name), dtype=np.int8).tobytes())
        for i in range(dims.layers):
            for name in _PER_LAYER:
                fh.write(np.ascontiguousarray(getattr(params, name)[i], dtype=np.int8).tobytes())


def load_egg(path) -> tuple[EggParams, int, int]:
    """Returns ``(params, master_seed, step)``."""
    data = Path(path).read_bytes()
    magic, layers, d, seed, step = _EGG_HEADER.unpack_from(data, 0)
    if magic != _EGG_MAGIC:
        raise ValueError(f"{path}: not an EGG checkpoint")
    dims = EggDims(layers, d)
    D = dims.D
    buf = np.frombuffer(data, dtype=np.int8, offset=_EGG_HEADER.size)
    if buf.size != dims.param_count():
        raise ValueError(f"{path}: expected {dims.param_count()} parameters, found {buf.size}")
    shapes = {"mlp1": (4 * D, D), "mlp2": (D, 4 * D), "ln1": (D,), "ln2": (D,), "bf": (D,), "bh": (D,)}
    off = 0

    def take(shape):
        nonlocal off
        size = int(np.prod(shape))
        out = buf[off : off + size].reshape(shape).copy()
        off += size
        return out

    emb = take((256, D))
    head = take((256, D))
    lnout = take((D,))
    per = {name: [] for name in _PER_LAYER}
    for _ in range(layers):
        for name in _PER_LAYER:
            per[name].append(take(shapes.get(name, (D, D))))
    params = EggParams(emb=emb, head=head, lnout=lnout, **{k: np.stack(v) for k, v in per.items()})
    return params, seed, step
