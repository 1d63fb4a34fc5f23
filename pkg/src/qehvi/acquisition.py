"""Monte Carlo acquisition functions built as differentiable expression graphs.

qEHVI integrates the joint hypervolume improvement of a candidate batch over
reparameterised posterior samples; the constrained variant weights every
inclusion-exclusion term by sigmoid feasibility.  qParEGO is expected
improvement of a random augmented Chebyshev scalarisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ExprGraph, GradResult, GraphBuilder, Node, evaluate, gradient
from .gp import GpModel, posterior_samples_node
from .pareto import BoxDecomposition, ParetoFront, subset_table
from .sampling import BaseSamples

__all__ = [
    "AcqConfig",
    "Acquisition",
    "HviWorkspace",
    "QEHVI",
    "QParEGO",
    "ScalarizationConfig",
    "chebyshev_scalarize",
    "hvi_workspace",
    "parego_incumbent",
    "qehvi",
    "qehvi_constrained",
    "qparego",
]

DEFAULT_TEMPERATURE = 1e-3
# cap on batch * N * subsets * K * M entries held per graph evaluation
_WORK_LIMIT = 4_000_000


@dataclass(frozen=True)
class AcqConfig:
    base: BaseSamples
    ref: np.ndarray
    sigmoid_temperature: float = DEFAULT_TEMPERATURE
    pending: np.ndarray | None = None

    def __post_init__(self):
        if self.sigmoid_temperature <= 0:
            raise ValueError("sigmoid temperature must be positive")
        object.__setattr__(self, "ref", np.asarray(self.ref, dtype=float).ravel())
        if self.pending is not None:
            pend = np.atleast_2d(np.asarray(self.pending, dtype=float))
            object.__setattr__(self, "pending", pend if len(pend) else None)

    @property
    def N(self) -> int:
        return self.base.n_samples

    @property
    def n_pending(self) -> int:
        return 0 if self.pending is None else len(self.pending)


@dataclass(frozen=True)
class ScalarizationConfig:
    """Augmented Chebyshev weights; optional bounds normalise each objective to [0, 1]."""

    weights: np.ndarray
    rho: float = 0.05
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        object.__setattr__(self, "weights", w)
        if (self.lower is None) != (self.upper is None):
            raise ValueError("give both normalisation bounds or neither")
        if self.lower is not None:
            lo = np.asarray(self.lower, dtype=float).ravel()
            hi = np.asarray(self.upper, dtype=float).ravel()
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", np.where(hi - lo > 0, hi, lo + 1.0))

    @classmethod
    def random(cls, rng: np.random.Generator, M: int, rho: float = 0.05, Y=None) -> "ScalarizationConfig":
        """Weights uniform on the simplex; bounds from observed outcomes ``Y`` if given."""
        w = rng.dirichlet(np.ones(M))
        if Y is None:
            return cls(w, rho)
        Y = np.asarray(Y, dtype=float)
        return cls(w, rho, Y.min(axis=0), Y.max(axis=0))

    def normalise(self, y):
        if self.lower is None:
            return y
        return (y - self.lower) / (self.upper - self.lower)


def chebyshev_scalarize(y, s: ScalarizationConfig):
    """``-(max_m w_m (-y_m) + rho * sum_m w_m (-y_m))`` over the last axis.

    The max runs over objectives with positive weight only, so a unit weight
    vector reduces to that single objective.
    """
    t = -s.weights * s.normalise(np.asarray(y, dtype=float))
    return -(t[..., s.weights > 0].max(axis=-1) + s.rho * t.sum(axis=-1))


def parego_incumbent(Y_obj, s: ScalarizationConfig, feasible=None) -> float:
    """Best scalarised feasible observation; the worst overall if none is feasible."""
    vals = chebyshev_scalarize(Y_obj, s)
    if feasible is not None:
        feasible = np.asarray(feasible, dtype=bool)
        if feasible.any():
            return float(vals[feasible].max())
        return float(vals.min())
    return float(vals.max())


@dataclass(frozen=True)
class HviWorkspace:
    """Subset table and the ``z`` tensor (N, K, subsets, M) for one set of samples."""

    subsets: tuple
    z: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_subsets(self) -> int:
        return sum(len(idx) for _, idx in self.subsets)


def hvi_workspace(samples: np.ndarray, decomp: BoxDecomposition) -> HviWorkspace:
    """Materialise ``z_{k, X_j, t} = min(u_k, min_{i in X_j} f_t(x_i))``."""
    samples = np.asarray(samples, dtype=float)
    table = subset_table(samples.shape[1])
    zs = []
    for _, idx in table:
        m = samples[:, idx, :].min(axis=2)  # (N, S_j, M)
        zs.append(np.minimum(m[:, None, :, :], decomp.uppers[None, :, None, :]))
    return HviWorkspace(table, np.concatenate(zs, axis=2))


def _sigmoid_weights(b: GraphBuilder, cons: Node, scale: np.ndarray, eps: float) -> Node:
    """Product over constraints of sigmoid(c / (eps * scale)); shape drops the last axis."""
    w = b.sigmoid(cons * b.const(1.0 / (eps * scale)))
    return w.prod(-1)


def _hvi_node(b, obj: Node, decomp: BoxDecomposition, q_total: int, required, weights: Node | None,
              batch: int, N: int) -> Node:
    """Inclusion-exclusion HVI per sample, shape (batch, N)."""
    lowers = b.const(decomp.lowers)
    uppers = b.const(decomp.uppers)
    K, M = decomp.lowers.shape
    total = None
    for j, idx in subset_table(q_total, required=required):
        S = len(idx)
        members = [obj.take(idx[:, i], 2) for i in range(j)]
        z = members[0] if j == 1 else b.minimum(*members)  # (batch, N, S, M)
        z = b.minimum(z.reshape(batch, N, S, 1, M), uppers)
        vol = b.relu(z - lowers).prod(-1)  # (batch, N, S, K)
        if weights is not None:
            w = weights.take(idx[:, 0], 2)
            for i in range(1, j):
                w = w * weights.take(idx[:, i], 2)
            vol = vol * w.reshape(batch, N, S, 1)
        term = vol.sum((2, 3))
        if j % 2 == 0:
            term = -term
        total = term if total is None else total + term
    return total


class Acquisition:
    """Batched evaluation of an acquisition graph over candidate batches.

    ``value`` and ``value_and_grad`` accept ``X`` of shape ``(q, d)`` or
    ``(batch, q, d)``; graphs are cached per batch size.
    """

    def __init__(self, model: GpModel, config: AcqConfig, q: int):
        self.model = model
        self.config = config
        self.q = q
        q_total = q + config.n_pending
        if config.base.shape[1:] != (q_total, model.n_outputs):
            raise ValueError(
                f"base samples shape {config.base.shape} does not match (N, {q_total}, {model.n_outputs})")
        self.q_total = q_total
        self.d = model.input_dim
        self._graphs: dict[int, ExprGraph] = {}
        self.n_evaluations = 0

    # subclasses fill in the per-sample value, shape (batch, N)
    def _per_sample(self, b: GraphBuilder, F: Node, batch: int) -> Node:
        raise NotImplementedError

    def _work_per_candidate(self) -> int:
        return self.config.N * self.q_total

    def _graph(self, batch: int) -> ExprGraph:
        g = self._graphs.get(batch)
        if g is None:
            b = GraphBuilder()
            X = b.input((batch, self.q, self.d))
            F = posterior_samples_node(b, self.model, X, batch, self.q, self.config.base.data,
                                       pending=self.config.pending)
            g = b.build(self._per_sample(b, F, batch).sum(1) * (1.0 / self.config.N))
            self._graphs[batch] = g
        return g

    def _chunks(self, n: int):
        size = max(1, min(n, _WORK_LIMIT // max(1, self._work_per_candidate())))
        # stable chunk sizes keep the number of cached graphs small
        for start in range(0, n, size):
            yield start, min(n, start + size)

    def _prepare(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 2
        X = X.reshape(-1, self.q, self.d)
        return X, single

    def value(self, X):
        X, single = self._prepare(X)
        out = np.empty(len(X))
        for s, e in self._chunks(len(X)):
            out[s:e] = evaluate(self._graph(e - s), X[s:e])
        self.n_evaluations += len(X)
        return float(out[0]) if single else out

    def value_and_grad(self, X):
        X, single = self._prepare(X)
        vals = np.empty(len(X))
        grads = np.empty_like(X)
        for s, e in self._chunks(len(X)):
            res = gradient(self._graph(e - s), X[s:e])
            vals[s:e] = res.value
            grads[s:e] = res.gradient.reshape(e - s, self.q, self.d)
        self.n_evaluations += len(X)
        if single:
            return float(vals[0]), grads[0]
        return vals, grads


class QEHVI(Acquisition):
    """q-expected hypervolume improvement (marginal over pending points).

    With ``constrained=True`` the outputs after the first ``M`` are treated
    as constraint slacks (feasible when >= 0).
    """

    def __init__(self, model: GpModel, decomp: BoxDecomposition, config: AcqConfig, q: int,
                 constrained: bool = False):
        super().__init__(model, config, q)
        self.decomp = decomp
        self.M = decomp.front.M
        self.constrained = constrained
        if constrained and model.n_outputs <= self.M:
            raise ValueError("constrained qEHVI needs at least one constraint output")
        p = config.n_pending
        self._required = list(range(p, p + q)) if p else None
        self._n_subsets = sum(len(i) for _, i in subset_table(self.q_total, required=self._required))

    def _work_per_candidate(self) -> int:
        return self.config.N * self._n_subsets * self.decomp.K * self.M

    def _per_sample(self, b, F, batch):
        M = self.M
        obj = F.take(np.arange(M), 3)
        weights = None
        if self.constrained:
            cons = F.take(np.arange(M, self.model.n_outputs), 3)
            weights = _sigmoid_weights(b, cons, self.model.y_std_[M:], self.config.sigmoid_temperature)
        return _hvi_node(b, obj, self.decomp, self.q_total, self._required, weights, batch, self.config.N)


class QParEGO(Acquisition):
    """Expected improvement of an augmented Chebyshev scalarisation.

    Improvement of each point is weighted by its sigmoid feasibility when
    ``n_constraints > 0``; the batch value is the best point's, marginal over
    pending points under the same samples.
    """

    def __init__(self, model: GpModel, scalarization: ScalarizationConfig, config: AcqConfig, q: int,
                 incumbent: float, n_objectives: int):
        super().__init__(model, config, q)
        self.scalarization = scalarization
        self.incumbent = float(incumbent)
        self.M = n_objectives
        self.V = model.n_outputs - n_objectives

    def _per_sample(self, b, F, batch):
        s = self.scalarization
        M = self.M
        y = F.take(np.arange(M), 3)
        if s.lower is not None:
            y = (y - b.const(s.lower)) * b.const(1.0 / (s.upper - s.lower))
        t = y * b.const(-s.weights)
        active = np.flatnonzero(s.weights > 0)
        scal = -(t.take(active, 3).max(3) + s.rho * t.sum(3))  # (batch, N, Q)
        imp = b.relu(scal - self.incumbent)
        if self.V:
            cons = F.take(np.arange(M, self.model.n_outputs), 3)
            imp = imp * _sigmoid_weights(b, cons, self.model.y_std_[M:], self.config.sigmoid_temperature)
        best = imp.max(2) if self.q_total > 1 else imp.sum(2)
        p = self.config.n_pending
        if p:
            base = imp.take(np.arange(p), 2)
            best = best - (base.max(2) if p > 1 else base.sum(2))
        return best


def _functional(acq: Acquisition, Xcand) -> GradResult:
    v, g = acq.value_and_grad(np.asarray(Xcand, dtype=float).reshape(acq.q, acq.d))
    return GradResult(v, g.ravel())


def qehvi(model: GpModel, Xcand, front: ParetoFront, decomp: BoxDecomposition, config: AcqConfig) -> GradResult:
    """qEHVI value and gradient with respect to the flattened candidates."""
    _check_ref(front, decomp, config)
    Xcand = np.atleast_2d(Xcand)
    return _functional(QEHVI(model, decomp, config, len(Xcand)), Xcand)


def qehvi_constrained(model: GpModel, Xcand, front_feasible: ParetoFront, decomp: BoxDecomposition,
                      config: AcqConfig) -> GradResult:
    _check_ref(front_feasible, decomp, config)
    Xcand = np.atleast_2d(Xcand)
    return _functional(QEHVI(model, decomp, config, len(Xcand), constrained=True), Xcand)


def qparego(model: GpModel, Xcand, s: ScalarizationConfig, config: AcqConfig, incumbent: float,
            n_objectives: int | None = None) -> GradResult:
    Xcand = np.atleast_2d(Xcand)
    M = s.weights.size if n_objectives is None else n_objectives
    return _functional(QParEGO(model, s, config, len(Xcand), incumbent, M), Xcand)


def _check_ref(front: ParetoFront, decomp: BoxDecomposition, config: AcqConfig):
    if not np.array_equal(front.ref, config.ref) or not np.array_equal(decomp.front.ref, config.ref):
        raise ValueError("front, decomposition and config must share the reference point")
