"""Independent-output GP surrogate (Matern-5/2 ARD) with MAP fitting."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from ._workers import parallel_map
from .autodiff import GraphBuilder, Node
from .sampling import BaseSamples

__all__ = [
    "Dataset",
    "GpModel",
    "NotPSDError",
    "OutputHypers",
    "Posterior",
    "fit",
    "kernel_matern52",
    "posterior",
    "posterior_samples_node",
    "sample",
]

SQRT5 = np.sqrt(5.0)
NOISE_FLOOR = 1e-6
LENGTHSCALE_BOUNDS = (1e-3, 1e3)
OUTPUT_SCALE_BOUNDS = (1e-4, 1e2)
NOISE_BOUNDS = (NOISE_FLOOR, 1.0)
_JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
# log-normal prior widths (log space)
_LS_PRIOR_SD = 1.0
_OS_PRIOR_SD = 1.0
_NOISE_PRIOR = (np.log(1e-4), 3.0)


class NotPSDError(np.linalg.LinAlgError):
    pass


def robust_cholesky(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, adding diagonal jitter (relative to the mean
    diagonal) from 1e-8 up to 1e-4 when needed.  Returns the jitter used."""
    scale = max(float(np.mean(np.abs(np.diag(a)))), 1e-300)
    eye = np.eye(len(a))
    for j in _JITTERS:
        try:
            return np.linalg.cholesky(a + j * scale * eye), j * scale
        except np.linalg.LinAlgError:
            continue
    raise NotPSDError("matrix not positive definite after maximum jitter")


def _matern_from_r(r: np.ndarray, output_scale: float) -> np.ndarray:
    return output_scale * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * np.exp(-SQRT5 * r)


def _scaled_dist(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    diff = (a[:, None, :] - b[None, :, :]) / lengthscales
    return np.sqrt(np.sum(diff**2, axis=-1))


def kernel_matern52(x, x2, lengthscales, output_scale: float) -> float:
    """Matern-5/2 ARD covariance between two points."""
    ls = np.asarray(lengthscales, dtype=float)
    if np.any(ls <= 0):
        raise ValueError("lengthscales must be positive")
    r = np.sqrt(np.sum(((np.asarray(x, float) - np.asarray(x2, float)) / ls) ** 2))
    return float(_matern_from_r(r, output_scale))


def kernel_matrix(a, b, lengthscales, output_scale: float) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return _matern_from_r(_scaled_dist(a, b, np.asarray(lengthscales, float)), output_scale)


@dataclass(frozen=True)
class Dataset:
    """Training inputs in the unit cube and outputs (objectives, then constraints)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if len(X) < 1 or len(X) != len(Y):
            raise ValueError("X and Y need the same, positive, number of rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset entries must be finite")
        if len(X) > 1:
            d = np.abs(X[:, None, :] - X[None, :, :]).max(axis=2)
            np.fill_diagonal(d, np.inf)
            if d.min() <= 1e-12:
                raise ValueError("duplicate rows in X")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class OutputHypers:
    lengthscales: np.ndarray
    output_scale: float
    noise_variance: float

    def pack(self) -> np.ndarray:
        return np.log(np.r_[self.lengthscales, self.output_scale, self.noise_variance])

    @classmethod
    def unpack(cls, theta: np.ndarray) -> "OutputHypers":
        e = np.exp(theta)
        return cls(e[:-2], float(e[-2]), float(e[-1]))


def _log_bounds(d: int) -> list:
    b = [tuple(np.log(LENGTHSCALE_BOUNDS))] * d
    b.append(tuple(np.log(OUTPUT_SCALE_BOUNDS)))
    b.append(tuple(np.log(NOISE_BOUNDS)))
    return b


def _neg_log_posterior(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative (log marginal likelihood + log prior) and its gradient in log space."""
    n, d = X.shape
    h = OutputHypers.unpack(theta)
    diff2 = ((X[:, None, :] - X[None, :, :]) / h.lengthscales) ** 2  # (n, n, d)
    r = np.sqrt(diff2.sum(axis=-1))
    e = np.exp(-SQRT5 * r)
    Kf = h.output_scale * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * e
    K = Kf + h.noise_variance * np.eye(n)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((L, True), y)
    nll = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * np.log(2 * np.pi)
    Kinv = cho_solve((L, True), np.eye(n))
    A = np.outer(alpha, alpha) - Kinv  # d(mll)/dK = A / 2
    grad = np.empty_like(theta)
    dk_dls = h.output_scale * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e  # times diff2_j
    for j in range(d):
        grad[j] = -0.5 * np.sum(A * dk_dls * diff2[:, :, j])
    grad[d] = -0.5 * np.sum(A * Kf)
    grad[d + 1] = -0.5 * h.noise_variance * np.trace(A)
    # log-normal priors on each hyperparameter
    ls_center = np.log(np.sqrt(d) / 2.0)
    dev = np.r_[(theta[:d] - ls_center) / _LS_PRIOR_SD, theta[d] / _OS_PRIOR_SD,
                (theta[d + 1] - _NOISE_PRIOR[0]) / _NOISE_PRIOR[1]]
    sds = np.r_[np.full(d, _LS_PRIOR_SD), _OS_PRIOR_SD, _NOISE_PRIOR[1]]
    nll += 0.5 * np.sum(dev**2)
    grad += dev / sds
    return float(nll), grad


def _default_theta(d: int) -> np.ndarray:
    return np.log(np.r_[np.full(d, np.sqrt(d) / 2.0), 1.0, 1e-4])


def _fit_output(X: np.ndarray, y: np.ndarray, n_restarts: int, seed: int, max_iter: int):
    n, d = X.shape
    bounds = _log_bounds(d)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    rng = np.random.default_rng(seed)
    starts = [_default_theta(d)]
    for _ in range(n_restarts - 1):
        starts.append(np.r_[rng.uniform(np.log(0.05), np.log(2.0), d),
                            rng.uniform(np.log(0.3), np.log(3.0)),
                            rng.uniform(np.log(1e-6), np.log(1e-2))])
    best = None
    start_values = []
    for theta0 in starts:
        theta0 = np.clip(theta0, lo, hi)
        start_values.append(_neg_log_posterior(theta0, X, y)[0])
        res = minimize(_neg_log_posterior, theta0, args=(X, y), jac=True, method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": max_iter})
        val = float(res.fun)
        if best is None or val < best[0]:
            best = (val, np.clip(res.x, lo, hi))
    return OutputHypers.unpack(best[1]), -best[0], [-v for v in start_values]


@dataclass(frozen=True)
class Posterior:
    """Joint Gaussian over q points and all outputs; row ``i * O + o``."""

    mean: np.ndarray
    covariance: np.ndarray
    root: np.ndarray
    q: int
    n_outputs: int
    jittered: bool = False


class GpModel(BaseEstimator):
    """One independent Matern-5/2 GP per output column.

    Inputs are expected in the unit cube; outputs are standardised per
    column before fitting.  Hyperparameters are MAP estimates found by
    multi-start L-BFGS-B.
    """

    def __init__(self, n_restarts: int = 5, seed: int = 0, max_iter: int = 200):
        self.n_restarts = n_restarts
        self.seed = seed
        self.max_iter = max_iter

    # fitting -------------------------------------------------------------
    def fit(self, X, Y):
        data = X if isinstance(X, Dataset) else Dataset(X, Y)
        self.X_train_ = data.X
        self.Y_train_ = data.Y
        mean = data.Y.mean(axis=0)
        std = data.Y.std(axis=0)
        constant = std < 1e-12
        std = np.where(constant, 1.0, std)
        self.y_mean_, self.y_std_ = mean, std
        Ys = (data.Y - mean) / std
        d = data.d

        def one(o):
            if constant[o]:
                h = OutputHypers(np.full(d, np.sqrt(d) / 2.0), OUTPUT_SCALE_BOUNDS[0], NOISE_FLOOR)
                return h, np.nan, []
            return _fit_output(data.X, Ys[:, o], self.n_restarts, self.seed + 7919 * o, self.max_iter)

        results = parallel_map(one, range(data.Y.shape[1]))
        self.hypers_ = [r[0] for r in results]
        self.map_objective_ = [r[1] for r in results]
        self.start_objectives_ = [r[2] for r in results]
        self._build_cache()
        return self

    def _build_cache(self):
        Ys = (self.Y_train_ - self.y_mean_) / self.y_std_
        self.chol_, self.alpha_, self.linv_ = [], [], []
        for o, h in enumerate(self.hypers_):
            K = kernel_matrix(self.X_train_, self.X_train_, h.lengthscales, h.output_scale)
            K[np.diag_indices_from(K)] += h.noise_variance
            L, _ = robust_cholesky(K)
            self.chol_.append(L)
            self.alpha_.append(cho_solve((L, True), Ys[:, o]))
            self.linv_.append(solve_triangular(L, np.eye(len(L)), lower=True))

    @property
    def n_outputs(self) -> int:
        return len(self.hypers_)

    @property
    def input_dim(self) -> int:
        return self.X_train_.shape[1]

    # prediction ----------------------------------------------------------
    def _latent(self, Xc: np.ndarray, o: int):
        h = self.hypers_[o]
        Kxs = kernel_matrix(Xc, self.X_train_, h.lengthscales, h.output_scale)
        mean = Kxs @ self.alpha_[o]
        W = Kxs @ self.linv_[o].T
        cov = kernel_matrix(Xc, Xc, h.lengthscales, h.output_scale) - W @ W.T
        return mean, cov

    def predict(self, X, return_std: bool = False):
        """Posterior mean (and marginal std) of each output, original units."""
        Xc = np.atleast_2d(np.asarray(X, dtype=float))
        means, stds = [], []
        for o in range(self.n_outputs):
            h = self.hypers_[o]
            Kxs = kernel_matrix(Xc, self.X_train_, h.lengthscales, h.output_scale)
            means.append(Kxs @ self.alpha_[o])
            if return_std:
                W = Kxs @ self.linv_[o].T
                var = np.clip(h.output_scale - np.sum(W**2, axis=1), 0.0, None)
                stds.append(np.sqrt(var))
        mean = np.stack(means, axis=1) * self.y_std_ + self.y_mean_
        if not return_std:
            return mean
        return mean, np.stack(stds, axis=1) * self.y_std_

    def posterior(self, Xcand) -> Posterior:
        return posterior(self, Xcand)

    # serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "params": self.get_params(),
            "X": self.X_train_.tolist(),
            "Y": self.Y_train_.tolist(),
            "y_mean": self.y_mean_.tolist(),
            "y_std": self.y_std_.tolist(),
            "hypers": [
                {"lengthscales": h.lengthscales.tolist(), "output_scale": h.output_scale,
                 "noise_variance": h.noise_variance}
                for h in self.hypers_
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GpModel":
        m = cls(**data["params"])
        m.X_train_ = np.asarray(data["X"], dtype=float)
        m.Y_train_ = np.asarray(data["Y"], dtype=float)
        m.y_mean_ = np.asarray(data["y_mean"], dtype=float)
        m.y_std_ = np.asarray(data["y_std"], dtype=float)
        m.hypers_ = [OutputHypers(np.asarray(h["lengthscales"], float), float(h["output_scale"]),
                                  float(h["noise_variance"])) for h in data["hypers"]]
        m.map_objective_ = [np.nan] * len(m.hypers_)
        m.start_objectives_ = [[] for _ in m.hypers_]
        m._build_cache()
        return m


def fit(data: Dataset, n_restarts: int = 5, seed: int = 0, max_iter: int = 200) -> GpModel:
    return GpModel(n_restarts=n_restarts, seed=seed, max_iter=max_iter).fit(data, None)


def posterior(model: GpModel, Xcand) -> Posterior:
    """Joint posterior of all outputs at the rows of ``Xcand`` (original units)."""
    Xc = np.atleast_2d(np.asarray(Xcand, dtype=float))
    q, O = len(Xc), model.n_outputs
    mean = np.empty(q * O)
    cov = np.zeros((q * O, q * O))
    for o in range(O):
        m, c = model._latent(Xc, o)
        idx = np.arange(q) * O + o
        mean[idx] = m * model.y_std_[o] + model.y_mean_[o]
        cov[np.ix_(idx, idx)] = c * model.y_std_[o] ** 2
    cov = 0.5 * (cov + cov.T)
    root, jitter = robust_cholesky(cov)
    if jitter > 0:
        warnings.warn("posterior covariance needed jitter (duplicate or near-duplicate candidates)",
                      RuntimeWarning, stacklevel=2)
    return Posterior(mean, cov, root, q, O, jitter > 0)


def sample(post: Posterior, base: BaseSamples | np.ndarray) -> np.ndarray:
    """Reparameterised draws ``mean + root @ eps`` with shape ``(N, q, O)``."""
    eps = base.data if isinstance(base, BaseSamples) else np.asarray(base, dtype=float)
    if eps.shape[1:] != (post.q, post.n_outputs):
        raise ValueError(f"base samples shape {eps.shape} does not match posterior ({post.q}, {post.n_outputs})")
    flat = eps.reshape(len(eps), -1)
    return (post.mean + flat @ post.root.T).reshape(eps.shape)


def posterior_samples_node(b: GraphBuilder, model: GpModel, X: Node, batch: int, q: int,
                           base: np.ndarray, pending=None) -> Node:
    """Graph node of posterior samples at candidates ``X`` (shape ``(batch, q, d)``).

    Pending points (fixed, shape ``(p, d)``) are prepended so the samples are
    joint over ``p + q`` points.  ``base`` has shape ``(N, p + q, O)``; the
    result has shape ``(batch, N, p + q, O)`` in original output units.
    """
    d = model.input_dim
    if pending is not None and len(pending):
        pend = np.broadcast_to(np.asarray(pending, float)[None], (batch, len(pending), d))
        Xall = b.concat([b.const(pend), X], axis=1)
        Q = len(pending) + q
    else:
        Xall, Q = X, q
    N = base.shape[0]
    if base.shape[1:] != (Q, model.n_outputs):
        raise ValueError("base samples do not match the joint batch size")
    eye_zero = 1.0 - np.eye(Q)
    outs = []
    for o, h in enumerate(model.hypers_):
        Z = Xall * b.const(1.0 / h.lengthscales)  # (batch, Q, d)
        Ztr = model.X_train_ / h.lengthscales
        diff = Z.reshape(batch, Q, 1, d) - b.const(Ztr[None, None])
        kxs = _matern_node(b, (diff * diff).sum(-1), h.output_scale)  # (batch, Q, n)
        dcc = Z.reshape(batch, Q, 1, d) - Z.reshape(batch, 1, Q, d)
        # zero the diagonal exactly so sqrt sees 0 there
        kcc = _matern_node(b, (dcc * dcc).sum(-1) * b.const(eye_zero), h.output_scale)
        mean = kxs @ b.const(model.alpha_[o])  # (batch, Q)
        W = kxs @ b.const(model.linv_[o].T)
        cov = kcc - W @ W.transpose(0, 2, 1)
        cov = 0.5 * (cov + cov.transpose(0, 2, 1))
        Lc = b.cholesky(cov)
        eps = b.const(base[:, :, o].T)  # (Q, N)
        draws = (Lc @ eps).transpose(0, 2, 1) + mean.reshape(batch, 1, Q)
        outs.append((draws * model.y_std_[o] + model.y_mean_[o]).reshape(batch, N, Q, 1))
    return outs[0] if len(outs) == 1 else b.concat(outs, axis=3)


def _matern_node(b: GraphBuilder, r2: Node, output_scale: float) -> Node:
    r = b.sqrt(r2)
    return output_scale * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * b.exp(-SQRT5 * r)
