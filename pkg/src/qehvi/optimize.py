"""Multi-start L-BFGS-B maximisation of acquisition functions over a box."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .autodiff import GraphBuilder, evaluate, gradient as graph_gradient
from .sampling import sobol

__all__ = [
    "GraphAcquisition",
    "OptConfig",
    "OptResult",
    "generate_initial_conditions",
    "optimize_joint",
    "optimize_sequential_greedy",
]

_MEMORY = 10
_GTOL = 1e-8


@dataclass(frozen=True)
class OptConfig:
    bounds: np.ndarray
    restarts: int = 20
    raw_samples: int = 1024
    max_iterations: int = 200
    seed: int = 0

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if b.ndim != 2 or b.shape[1] != 2:
            raise ValueError("bounds must have shape (d, 2)")
        if np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("each lower bound must be below its upper bound")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.raw_samples < self.restarts:
            raise ValueError("raw_samples must be at least restarts")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        object.__setattr__(self, "bounds", b)

    @classmethod
    def unit(cls, d: int, **kw) -> "OptConfig":
        return cls(np.tile([0.0, 1.0], (d, 1)), **kw)

    @property
    def d(self) -> int:
        return len(self.bounds)


@dataclass
class OptResult:
    X: np.ndarray
    value: float
    degraded: bool = False
    n_evaluations: int = 0
    initial_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    terminal_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    marginals: list = field(default_factory=list)

    def __iter__(self):
        yield self.X
        yield self.value


class GraphAcquisition:
    """Wraps ``build(builder, X_node) -> scalar node`` (X of shape (q, d)) as an acquisition."""

    def __init__(self, build: Callable, q: int, d: int):
        b = GraphBuilder()
        x = b.input((q, d))
        self._graph = b.build(build(b, x))
        self.q, self.d = q, d
        self.n_evaluations = 0

    def value(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 2
        X = X.reshape(-1, self.q, self.d)
        self.n_evaluations += len(X)
        out = np.array([evaluate(self._graph, x) for x in X], dtype=float)
        return float(out[0]) if single else out

    def value_and_grad(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 2
        X = X.reshape(-1, self.q, self.d)
        self.n_evaluations += len(X)
        res = [graph_gradient(self._graph, x) for x in X]
        vals = np.array([r.value for r in res], dtype=float)
        grads = np.stack([r.gradient.reshape(self.q, self.d) for r in res])
        if single:
            return float(vals[0]), grads[0]
        return vals, grads


def generate_initial_conditions(acqf, opt: OptConfig, q: int) -> np.ndarray:
    """Best ``restarts`` of ``raw_samples`` scrambled-Sobol q-batches (ties by index)."""
    d = opt.d
    raw = sobol(opt.raw_samples, q * d, seed=opt.seed).reshape(opt.raw_samples, q, d)
    lo, hi = opt.bounds[:, 0], opt.bounds[:, 1]
    raw = lo + (hi - lo) * raw
    vals = np.asarray(acqf.value(raw), dtype=float).reshape(-1)
    order = np.argsort(-vals, kind="stable")[: opt.restarts]
    return raw[order]


def _fd_value_and_grad(acqf, X: np.ndarray, lo: np.ndarray, hi: np.ndarray, step: float):
    """Central differences for each batch in ``X`` (shape ``(R, q, d)``).

    One call to ``acqf.value`` with ``R * (1 + 2 * q * d)`` batches.
    """
    R = len(X)
    n = X[0].size
    flat = np.repeat(X.reshape(R, 1, n), 2 * n + 1, axis=1)
    idx = np.arange(n)
    x, lo, hi = X.reshape(R, n), lo.ravel(), hi.ravel()
    flat[:, 1 + idx, idx] = np.minimum(x + step, hi)
    flat[:, 1 + n + idx, idx] = np.maximum(x - step, lo)
    vals = np.asarray(acqf.value(flat.reshape((-1,) + X.shape[1:])), dtype=float).reshape(R, 2 * n + 1)
    width = flat[:, 1 + idx, idx] - flat[:, 1 + n + idx, idx]
    grad = (vals[:, 1:n + 1] - vals[:, n + 1:]) / width
    return vals[:, 0], grad.reshape(X.shape)


class _Lockstep:
    """Collects one evaluation request per running restart, then serves them in a single batched call.

    Each restart runs its own L-BFGS-B in a thread, so results match
    independent runs while the acquisition is evaluated once per step.
    """

    def __init__(self, evaluate: Callable, n: int):
        self._evaluate = evaluate
        self._cv = threading.Condition()
        self._pending: dict[int, np.ndarray] = {}
        self._results: dict[int, object] = {}
        self._active = n

    def __call__(self, i: int, x: np.ndarray):
        with self._cv:
            self._pending[i] = x
            self._maybe_flush()
            while i not in self._results:
                self._cv.wait()
            out = self._results.pop(i)
        if isinstance(out, BaseException):
            raise out
        return out

    def finish(self):
        with self._cv:
            self._active -= 1
            self._maybe_flush()

    def _maybe_flush(self):
        if not self._pending or len(self._pending) < self._active:
            return
        keys = sorted(self._pending)
        X = np.stack([self._pending[k] for k in keys])
        self._pending.clear()
        try:
            v, g = self._evaluate(X)
            for j, k in enumerate(keys):
                self._results[k] = (float(v[j]), g[j])
        except Exception as err:  # handed to every waiting restart
            for k in keys:
                self._results[k] = err
        self._cv.notify_all()


def _run_restarts(acqf, starts: np.ndarray, opt: OptConfig, mode: str, fd_step: float):
    R, q, d = starts.shape
    lo = np.broadcast_to(opt.bounds[:, 0], (q, d))
    hi = np.broadcast_to(opt.bounds[:, 1], (q, d))

    def batch(X):
        if mode == "exact":
            v, g = acqf.value_and_grad(X)
        else:
            v, g = _fd_value_and_grad(acqf, X, lo, hi, fd_step)
        return np.asarray(v, dtype=float).reshape(-1), np.asarray(g, dtype=float)

    gate = _Lockstep(batch, R)
    best_x = starts.copy()
    best_v = np.full(R, -np.inf)
    initial = np.full(R, -np.inf)
    failed = np.zeros(R, dtype=bool)
    errors: list[BaseException] = []

    def one(i):
        def fun(z):
            x = np.clip(z.reshape(q, d), lo, hi)
            v, g = gate(i, x)
            if np.isfinite(v) and v > best_v[i]:
                best_x[i], best_v[i] = x, v
            return -v, -g.ravel()

        try:
            initial[i] = -fun(starts[i].ravel())[0]
            res = minimize(fun, starts[i].ravel(), jac=True, method="L-BFGS-B",
                           bounds=list(zip(lo.ravel(), hi.ravel())),
                           options={"maxiter": opt.max_iterations, "maxcor": _MEMORY, "gtol": _GTOL})
            failed[i] = not res.success and "ABNORMAL" in str(res.message).upper()
        except (ArithmeticError, np.linalg.LinAlgError):
            failed[i] = True
        except Exception as err:
            errors.append(err)
        finally:
            gate.finish()

    threads = [threading.Thread(target=one, args=(i,), daemon=True) for i in range(R)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return best_x, best_v, initial, bool(failed.all())


def optimize_joint(acqf, opt: OptConfig, q: int, gradient: str = "exact", fd_step: float = 1e-6) -> OptResult:
    """Maximise ``acqf`` over q-batches from the best raw starting points.

    Restarts run independently but in lockstep, sharing one batched
    acquisition call per step.
    ``gradient="fd"`` replaces the exact gradient by central differences
    (used for comparisons only).  The returned point is the best one
    evaluated across restarts; ``degraded`` is set when every restart ended
    with a failed line search.
    """
    if gradient not in ("exact", "fd"):
        raise ValueError("gradient must be 'exact' or 'fd'")
    count0 = getattr(acqf, "n_evaluations", 0)
    starts = generate_initial_conditions(acqf, opt, q)
    X, terminal, initial, failed = _run_restarts(acqf, starts, opt, gradient, fd_step)
    best = int(np.argmax(terminal))  # first index wins ties
    return OptResult(
        X=np.clip(X[best], opt.bounds[:, 0], opt.bounds[:, 1]),
        value=float(terminal[best]),
        degraded=failed,
        n_evaluations=getattr(acqf, "n_evaluations", 0) - count0,
        initial_values=initial,
        terminal_values=terminal,
    )


def optimize_sequential_greedy(acqf_family: Callable, opt: OptConfig, q: int) -> OptResult:
    """Build a batch one point at a time.

    ``acqf_family(pending, i)`` returns a single-candidate acquisition
    conditioned on the ``pending`` points chosen so far (``None`` at first).
    The reported value is the sum of the marginal values.
    """
    chosen: list[np.ndarray] = []
    marginals = []
    evals = 0
    degraded = False
    for i in range(q):
        pending = np.vstack(chosen) if chosen else None
        acqf = acqf_family(pending, i)
        step = OptConfig(opt.bounds, opt.restarts, opt.raw_samples, opt.max_iterations, opt.seed + i)
        res = optimize_joint(acqf, step, 1)
        chosen.append(res.X)
        marginals.append(res.value)
        evals += res.n_evaluations
        degraded |= res.degraded
    return OptResult(X=np.vstack(chosen), value=float(np.sum(marginals)), degraded=degraded,
                     n_evaluations=evals, marginals=marginals)
