"""Scrambled Sobol points and standard-normal base samples."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

__all__ = [
    "BaseSamples",
    "UnsupportedDimensionError",
    "inverse_normal_cdf",
    "normal_base_samples",
    "sobol",
    "MAX_DIM",
]

_BITS = 32
MAX_DIM = 21201


class UnsupportedDimensionError(ValueError):
    pass


@lru_cache(maxsize=1)
def _table():
    with resources.files("qehvi.data").joinpath("sobol_directions.npz").open("rb") as fh:
        data = np.load(fh)
        return data["poly"].astype(np.int64), data["vinit"].astype(np.int64)


@lru_cache(maxsize=64)
def _directions(dim: int) -> np.ndarray:
    """Direction numbers ``v[j, k]`` (already shifted into the top bits)."""
    poly, vinit = _table()
    m = np.zeros((dim, _BITS), dtype=np.int64)
    m[0, :] = 1
    for j in range(1, dim):
        p = int(poly[j])
        s = p.bit_length() - 1
        m[j, :s] = vinit[j, :s]
        for k in range(s, _BITS):
            new = int(m[j, k - s])
            for i in range(1, s + 1):
                if (p >> (s - i)) & 1:
                    new ^= int(m[j, k - i]) << i
            m[j, k] = new
    shifts = np.arange(_BITS - 1, -1, -1, dtype=np.int64)
    return (m << shifts).astype(np.uint64)


def _reverse_bits(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint32)
    x = ((x >> 1) & 0x55555555) | ((x & 0x55555555) << 1)
    x = ((x >> 2) & 0x33333333) | ((x & 0x33333333) << 2)
    x = ((x >> 4) & 0x0F0F0F0F) | ((x & 0x0F0F0F0F) << 4)
    x = ((x >> 8) & 0x00FF00FF) | ((x & 0x00FF00FF) << 8)
    return ((x >> 16) | (x << 16)).astype(np.uint32)


def _nested_scramble(x: np.ndarray, seed: np.uint32) -> np.ndarray:
    # Laine-Karras hash in bit-reversed order: each output bit flips as a
    # function of the more significant input bits only (Owen's nesting).
    y = _reverse_bits(x)
    with np.errstate(over="ignore"):
        y = y + seed
        y ^= y * np.uint32(0x6C50B47C)
        y ^= y * np.uint32(0xB82F1E52)
        y ^= y * np.uint32(0xC7AFE638)
        y ^= y * np.uint32(0x8D22F6E6)
    return _reverse_bits(y)


def sobol(count: int, dim: int, seed: int = 0, scramble: bool = True, skip: int = 0) -> np.ndarray:
    """``count`` Sobol points in ``[0, 1)^dim``, starting at index ``skip``.

    With ``scramble`` the digits are Owen-scrambled by a seeded hash; the
    result is deterministic in ``seed``.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if dim < 1:
        raise ValueError("dim must be at least 1")
    if dim > MAX_DIM:
        raise UnsupportedDimensionError(f"dimension {dim} exceeds direction-number table ({MAX_DIM})")
    if skip + count > 2**_BITS:
        raise ValueError("too many points requested")
    v = _directions(dim)
    idx = np.arange(skip, skip + count, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    x = np.zeros((count, dim), dtype=np.uint64)
    for k in range(_BITS):
        bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
        if not bit.any():
            continue
        x[bit] ^= v[:, k]
    x = x.astype(np.uint32)
    if not scramble:
        return x.astype(float) / 2.0**_BITS
    seeds = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, dim]).generate_state(dim, dtype=np.uint32)
    out = np.empty((count, dim))
    for j in range(dim):
        out[:, j] = (_nested_scramble(x[:, j], seeds[j]).astype(float) + 0.5) / 2.0**_BITS
    return out


# Wichura (1988), algorithm AS241 PPND16
_A = (3.387132872796366608, 133.14166789178437745, 1971.5909503065514427, 13731.693765509461125,
      45921.953931549871457, 67265.770927008700853, 33430.575583588128105, 2509.0809287301226727)
_B = (1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
      21213.794301586595867, 39307.89580009271061, 28729.085735721942674, 5226.495278852545925)
_C = (1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055, 3.64784832476320460504,
      1.27045825245236838258, 0.24178072517745061177, 0.0227238449892691845833,
      7.7454501427834140764e-4)
_D = (1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455,
      0.14810397642748007459, 0.0151986665636164571966, 5.475938084995344946e-4,
      1.05075007164441684324e-9)
_E = (6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358, 0.29656057182850489123,
      0.026532189526576123093, 0.0012426609473880784386, 2.71155556874348757815e-5,
      2.01033439929228813265e-7)
_F = (1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525,
      7.868691311456132591e-4, 1.8463183175100546818e-5, 1.4215117583164458887e-7,
      2.04426310338993978564e-15)


def _poly(coef, x):
    out = np.full_like(x, coef[-1])
    for c in coef[-2::-1]:
        out = out * x + c
    return out


def inverse_normal_cdf(p) -> np.ndarray:
    """Standard-normal quantile function (absolute error well below 1e-9)."""
    p = np.asarray(p, dtype=float)
    q = p - 0.5
    out = np.empty_like(p)
    central = np.abs(q) <= 0.425
    if central.any():
        r = 0.180625 - q[central] ** 2
        out[central] = q[central] * _poly(_A, r) / _poly(_B, r)
    tail = ~central
    if tail.any():
        qt = q[tail]
        r = np.where(qt < 0, p[tail], 1.0 - p[tail])
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.sqrt(-np.log(r))
        near = r <= 5.0
        val = np.where(
            near,
            _poly(_C, r - 1.6) / _poly(_D, r - 1.6),
            _poly(_E, r - 5.0) / _poly(_F, r - 5.0),
        )
        out[tail] = np.where(qt < 0, -val, val)
    return out


@dataclass(frozen=True)
class BaseSamples:
    """Standard-normal draws of shape ``(N, q, outputs)``."""

    data: np.ndarray
    seed: int
    kind: str

    def __post_init__(self):
        if self.kind not in ("iid-normal", "qmc-normal"):
            raise ValueError(f"unknown base-sample kind {self.kind!r}")
        if self.data.ndim != 3:
            raise ValueError("base samples must have shape (N, q, outputs)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("base samples must be finite")

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]


def normal_base_samples(N: int, q: int, outputs: int, seed: int = 0, kind: str = "qmc-normal") -> BaseSamples:
    if min(N, q, outputs) < 1:
        raise ValueError("N, q and outputs must all be at least 1")
    if kind == "qmc-normal":
        u = sobol(N, q * outputs, seed)
        data = inverse_normal_cdf(u).reshape(N, q, outputs)
    elif kind == "iid-normal":
        data = np.random.default_rng(seed).standard_normal((N, q, outputs))
    else:
        raise ValueError(f"unknown base-sample kind {kind!r}")
    data.setflags(write=False)
    return BaseSamples(data, int(seed), kind)
