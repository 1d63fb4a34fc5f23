"""Build the approximate true-front fixtures in src/qehvi/data.

Each problem is evaluated at 2^20 scrambled Sobol points (seed 0) and the
feasible points are Pareto-filtered.  Dense sampling misses fronts lying on
the box boundary, so the front is then refined with epsilon-constraint
solves (SLSQP: minimise one objective with the others capped), started from
the dense front.  Every stored point is a genuine feasible evaluation, so the
recorded hypervolume is a lower bound on the true one.

    python3 scripts/build_fronts.py [name ...]
"""
from __future__ import annotations

import sys
import time
import warnings
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from qehvi import problems
from qehvi.pareto import ParetoFront, hypervolume, pareto_filter
from qehvi.sampling import sobol

N_POINTS = 2**20
BLOCK = 2**16
SWEEP_2D = 4000
GRID_3D = 48
OUT = Path(__file__).resolve().parents[1] / "src" / "qehvi" / "data"

UNIT2 = np.tile([0.0, 1.0], (2, 1))
SETUP = {
    "branin_currin": (UNIT2, [-18.0, -6.0],
                      lambda X: (problems.branin_currin(X), np.zeros((len(X), 0)))),
    "constrained_branin_currin": (UNIT2, [-90.0, -10.0],
                                  lambda X: (problems.branin_currin(X), problems.branin_currin_constraint(X))),
    "vehicle_safety": (np.tile([1.0, 3.0], (5, 1)), [-1864.72022, -11.81993945, -0.2903999384],
                       lambda X: (problems.vehicle_safety(X), np.zeros((len(X), 0)))),
}


def dense_front(fn, bounds):
    X = bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * sobol(N_POINTS, len(bounds), seed=0)
    keep_x, keep_f = [], []
    for s in range(0, N_POINTS, BLOCK):
        f, c = fn(X[s:s + BLOCK])
        ok = np.all(c >= 0, axis=1)
        idx = pareto_filter(-f[ok])
        keep_x.append(X[s:s + BLOCK][ok][idx])
        keep_f.append(f[ok][idx])
    X, f = np.vstack(keep_x), np.vstack(keep_f)
    idx = pareto_filter(-f)
    return X[idx], f[idx]


def eps_solve(fn, bounds, x0, caps, k=0):
    """min f_k s.t. f_j <= caps[j] for j != k and constraint slacks >= 0 (caps[k] unused)."""
    cons = [{"type": "ineq", "fun": lambda x, j=j: caps[j] - fn(x[None])[0][0, j]}
            for j in range(len(caps)) if j != k]
    cons.append({"type": "ineq", "fun": lambda x: np.r_[fn(x[None])[1][0], 0.0]})
    res = minimize(lambda x: fn(x[None])[0][0, k], x0, method="SLSQP", bounds=bounds,
                   constraints=cons, options={"maxiter": 200, "ftol": 1e-13})
    return np.clip(res.x, bounds[:, 0], bounds[:, 1])


def refine(fn, bounds, ref, X, f):
    caps_hi = -np.asarray(ref)[1:]
    lo = f[:, 1:].min(axis=0)
    if f.shape[1] == 2:
        grid = np.linspace(lo[0], caps_hi[0], SWEEP_2D)[:, None]
    else:
        axes = [np.linspace(lo[k], caps_hi[k], GRID_3D) for k in range(2)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    out = []
    for caps in grid:
        ok = np.all(f[:, 1:] <= caps, axis=1)
        if not ok.any():
            continue
        x0 = X[ok][np.argmin(f[ok, 0])]
        out.append(eps_solve(fn, bounds, x0, np.r_[np.inf, caps]))
    # polish every dense front point along each objective in turn
    for k in range(f.shape[1]):
        for x0, f0 in zip(X, f):
            out.append(eps_solve(fn, bounds, x0, f0, k))
    return np.vstack(out)


def build(name: str) -> None:
    t0 = time.perf_counter()
    bounds, ref, fn = SETUP[name]
    X, f = dense_front(fn, bounds)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        R = refine(fn, bounds, ref, X, f)
    fr, cr = fn(R)
    Y = np.vstack([-f, -fr[np.all(cr >= 0, axis=1)]])
    front = ParetoFront(Y[pareto_filter(Y)], np.asarray(ref))
    hv = hypervolume(front)
    lines = [
        f"# problem: {name}",
        f"# construction: scripts/build_fronts.py; {N_POINTS} scrambled Sobol points (seed 0), "
        "Pareto-filtered, refined by epsilon-constraint SLSQP solves",
        "# convention: maximisation (negated objectives); hypervolume is a lower bound",
        f"# reference: {', '.join(repr(float(v)) for v in ref)}",
        f"# points: {len(front)}",
        f"# hypervolume: {float(hv)!r}",
    ]
    body = "\n".join(",".join(repr(float(v)) for v in row) for row in front.points)
    (OUT / f"front_{name}.csv").write_text("\n".join(lines) + "\n" + body + "\n")
    print(f"{name}: {len(front)} points, dense hv={hypervolume(ParetoFront(-f, np.asarray(ref))):.10g}, "
          f"hv={hv:.10g}, {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    for name in sys.argv[1:] or SETUP:
        build(name)
