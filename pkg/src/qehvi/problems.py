"""Benchmark problems.

Raw objective functions follow the usual minimisation convention.  A
:class:`Problem` exposes them to the engine negated, so that every objective is
maximised and the reference point is negated to match.  Constraint slacks are
feasible when ``>= 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from typing import Callable

import numpy as np

from .sampling import sobol

__all__ = [
    "C2_RADIUS",
    "PROBLEMS",
    "Problem",
    "branin_currin",
    "branin_currin_constraint",
    "c2_constraint",
    "dtlz2",
    "get_problem",
    "load_front",
    "vehicle_safety",
    "with_noise",
]

C2_RADIUS = 0.2
_RANGE_POINTS = 2**14


def _rows(x, d=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if d is not None and x.shape[1] != d:
        raise ValueError(f"expected inputs with {d} columns, got {x.shape[1]}")
    return x


def branin_currin(x) -> np.ndarray:
    x = _rows(x, 2)
    x1, x2 = x[:, 0], x[:, 1]
    u, v = 15 * x1 - 5, 15 * x2
    branin = (v - 5.1 / (4 * np.pi**2) * u**2 + 5 / np.pi * u - 6) ** 2 + 10 * (1 - 1 / (8 * np.pi)) * np.cos(u) + 10
    with np.errstate(divide="ignore"):
        decay = np.where(x2 > 0, 1 - np.exp(-1 / (2 * np.where(x2 > 0, x2, 1.0))), 1.0)
    currin = decay * (2300 * x1**3 + 1900 * x1**2 + 2092 * x1 + 60) / (100 * x1**3 + 500 * x1**2 + 4 * x1 + 20)
    return np.c_[branin, currin]


def branin_currin_constraint(x) -> np.ndarray:
    x = _rows(x, 2)
    u, v = 15 * x[:, 0] - 5, 15 * x[:, 1]
    return (50 - (u - 2.5) ** 2 - (v - 7.5) ** 2)[:, None]


def dtlz2(x, M: int) -> np.ndarray:
    x = _rows(x)
    d = x.shape[1]
    if not 2 <= M <= d:
        raise ValueError("dtlz2 needs 2 <= M <= d")
    g = np.sum((x[:, M - 1:] - 0.5) ** 2, axis=1)
    angles = 0.5 * np.pi * x[:, : M - 1]
    f = np.empty((len(x), M))
    for k in range(M):
        f[:, k] = np.prod(np.cos(angles[:, : M - 1 - k]), axis=1)
        if k > 0:
            f[:, k] *= np.sin(angles[:, M - 1 - k])
    return (1 + g)[:, None] * f


def c2_constraint(f, r: float = C2_RADIUS) -> np.ndarray:
    f = _rows(f)
    M = f.shape[1]
    sq = f**2 - r**2
    near_axis = (f - 1) ** 2 + (sq.sum(axis=1, keepdims=True) - sq)
    centre = np.sum((f - 1 / math.sqrt(M)) ** 2 - r**2, axis=1)
    return -np.minimum(near_axis.min(axis=1), centre)[:, None]


def vehicle_safety(x) -> np.ndarray:
    x = _rows(x, 5)
    x1, x2, x3, x4, x5 = x.T
    f1 = 1640.2823 + 2.3573285 * x1 + 2.3220035 * x2 + 4.5688768 * x3 + 7.7213633 * x4 + 4.4559504 * x5
    f2 = (6.5856 + 1.15 * x1 - 1.0427 * x2 + 0.9738 * x3 + 0.8364 * x4 - 0.3695 * x1 * x4 + 0.0861 * x1 * x5
          + 0.3628 * x2 * x4 + 0.1106 * x1**2 - 0.3437 * x3**2 + 0.1764 * x4**2)
    f3 = (-0.0551 + 0.0181 * x1 + 0.1024 * x2 + 0.0421 * x3 - 0.0073 * x1 * x2 + 0.024 * x2 * x3
          - 0.0118 * x2 * x4 - 0.0204 * x3 * x4 - 0.008 * x3 * x5 - 0.0241 * x2**2 + 0.0109 * x4**2)
    return np.c_[f1, f2, f3]


@dataclass(frozen=True)
class Problem:
    """A benchmark in the engine's maximisation convention."""

    name: str
    d: int
    M: int
    V: int
    bounds: np.ndarray
    ref_point: np.ndarray
    raw: Callable  # X -> (minimisation objectives, constraint slacks)
    true_front_hv: float | None = None
    noise_sd: np.ndarray | None = None
    noise_seed: int | None = None

    def __post_init__(self):
        if self.noise_sd is not None:
            object.__setattr__(self, "_rng", np.random.default_rng(self.noise_seed))

    def evaluate(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = _rows(X, self.d)
        f, c = self.raw(X)
        if self.noise_sd is not None:
            f = f + self._rng.standard_normal(f.shape) * self.noise_sd
        return -f, c

    def evaluate_stacked(self, X) -> np.ndarray:
        """Objectives followed by constraint slacks, one row per point."""
        Y, C = self.evaluate(X)
        return np.hstack([Y, C])

    def to_unit(self, X) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return (np.asarray(X, dtype=float) - lo) / (hi - lo)

    def from_unit(self, U) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + (hi - lo) * np.asarray(U, dtype=float)


def with_noise(problem: Problem, relative_sd: float, seed: int = 0) -> Problem:
    """Gaussian observation noise with sd ``relative_sd`` times each objective's range.

    Ranges come from evaluating the noiseless problem at 2^14 scrambled Sobol
    points.  The returned problem owns its generator, so use one per trial.
    """
    if relative_sd < 0:
        raise ValueError("relative_sd must be non-negative")
    f, _ = problem.raw(problem.from_unit(sobol(_RANGE_POINTS, problem.d, seed=0)))
    sd = relative_sd * (f.max(axis=0) - f.min(axis=0))
    return replace(problem, noise_sd=sd, noise_seed=seed)


@lru_cache(maxsize=None)
def load_front(name: str) -> tuple[np.ndarray, float, dict]:
    """Stored approximate true front: (points, hypervolume, header fields)."""
    text = resources.files("qehvi").joinpath("data", f"front_{name}.csv").read_text()
    header = {}
    for line in text.splitlines():
        if line.startswith("#") and ":" in line:
            key, val = line[1:].split(":", 1)
            header[key.strip()] = val.strip()
    points = np.loadtxt(text.splitlines(), delimiter=",", comments="#", ndmin=2)
    return points, float(header["hypervolume"]), header


def _dtlz2_true_hv(M: int, ref: float = 1.1) -> float:
    # box minus the positive orthant of the unit ball
    ball = math.pi ** (M / 2) / math.gamma(M / 2 + 1) / 2**M
    return ref**M - ball


def _c2_true_hv_2d(r: float = C2_RADIUS, ref: float = 1.1) -> float:
    """Feasible true front of 2-objective C2-DTLZ2 is three arcs of the unit circle."""
    end = math.sin(math.acos(1 - r**2 / 2))   # f1 extent of the arc at (0, 1)
    half = math.acos(1 - r**2)                 # half-angle of the middle arc
    arcs = [(0.0, end), (math.cos(math.pi / 4 + half), math.cos(math.pi / 4 - half)), (math.sqrt(1 - end**2), 1.0)]
    prim = lambda x: 0.5 * (x * math.sqrt(1 - x * x) + math.asin(x))  # noqa: E731  integral of sqrt(1-x^2)
    hv = 0.0
    for k, (lo, hi) in enumerate(arcs):
        nxt = arcs[k + 1][0] if k + 1 < len(arcs) else ref
        hv += ref * (hi - lo) - (prim(hi) - prim(lo))
        hv += (nxt - hi) * (ref - math.sqrt(1 - hi * hi))
    return hv


def _branin_currin(constrained: bool = False) -> Problem:
    if constrained:
        raw = lambda X: (branin_currin(X), branin_currin_constraint(X))  # noqa: E731
        name, ref, V = "constrained_branin_currin", [-90.0, -10.0], 1
    else:
        raw = lambda X: (branin_currin(X), np.zeros((len(X), 0)))  # noqa: E731
        name, ref, V = "branin_currin", [-18.0, -6.0], 0
    return Problem(name, 2, 2, V, np.tile([0.0, 1.0], (2, 1)), np.array(ref), raw, load_front(name)[1])


def _dtlz2(d: int = 6, M: int = 2) -> Problem:
    raw = lambda X: (dtlz2(X, M), np.zeros((len(X), 0)))  # noqa: E731
    return Problem("dtlz2", d, M, 0, np.tile([0.0, 1.0], (d, 1)), np.full(M, -1.1), raw, _dtlz2_true_hv(M))


def _c2_dtlz2(d: int = 12, M: int = 2) -> Problem:
    def raw(X):
        f = dtlz2(X, M)
        return f, c2_constraint(f)

    hv = _c2_true_hv_2d() if M == 2 else None
    return Problem("c2_dtlz2", d, M, 1, np.tile([0.0, 1.0], (d, 1)), np.full(M, -1.1), raw, hv)


def _vehicle() -> Problem:
    raw = lambda X: (vehicle_safety(X), np.zeros((len(X), 0)))  # noqa: E731
    ref = -np.array([1864.72022, 11.81993945, 0.2903999384])
    return Problem("vehicle_safety", 5, 3, 0, np.tile([1.0, 3.0], (5, 1)), ref, raw,
                   load_front("vehicle_safety")[1])


PROBLEMS: dict[str, Callable[..., Problem]] = {
    "branin_currin": _branin_currin,
    "constrained_branin_currin": lambda: _branin_currin(constrained=True),
    "dtlz2": _dtlz2,
    "c2_dtlz2": _c2_dtlz2,
    "vehicle_safety": _vehicle,
}


def get_problem(name: str, **kwargs) -> Problem:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**kwargs)
