"""Closed-loop Bayesian optimisation runs, metrics and result files."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._workers import parallel_map
from .acquisition import QEHVI, AcqConfig, QParEGO, ScalarizationConfig, parego_incumbent
from .gp import GpModel, NotPSDError
from .optimize import OptConfig, optimize_joint, optimize_sequential_greedy
from .pareto import ParetoFront, box_decompose, hypervolume, infer_reference_point
from .problems import Problem, get_problem, with_noise
from .sampling import normal_base_samples, sobol

__all__ = [
    "CSV_COLUMNS",
    "HV_FLOOR",
    "METHODS",
    "MODES",
    "SCHEMA_VERSION",
    "BoTrace",
    "ExperimentConfig",
    "IterationRecord",
    "log_hv_difference",
    "read_trace",
    "run_bo",
    "run_sweep",
    "write_csv",
    "write_trace",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HV_FLOOR = 1e-10
METHODS = ("qehvi", "qparego", "sobol")
MODES = ("joint", "sequential-greedy")
CSV_COLUMNS = ("schema_version", "problem", "method", "q", "seed", "iteration", "evaluations", "hv",
               "log_hv_diff", "acq_seconds")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    method: str = "qehvi"
    q: int = 1
    budget: int | None = None  # total evaluations including the initial design
    mc_samples: int = 128
    seed: int = 0
    zeta: float = 0.0
    mode: str = "joint"
    infer_ref: bool = False
    restarts: int = 20
    raw_samples: int = 1024
    max_iterations: int = 200
    noise: float = 0.0
    problem_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.q < 1 or self.mc_samples < 1:
            raise ValueError("q and mc_samples must be positive")
        if self.zeta < 0 or self.noise < 0:
            raise ValueError("zeta and noise must be non-negative")
        d = self.make_problem().d
        budget = self.budget if self.budget is not None else self.n_initial(d) + 10 * self.q
        if budget < self.n_initial(d):
            raise ValueError(f"budget {budget} is smaller than the initial design {self.n_initial(d)}")
        object.__setattr__(self, "budget", int(budget))

    @staticmethod
    def n_initial(d: int) -> int:
        return 2 * (d + 1)

    def make_problem(self) -> Problem:
        return get_problem(self.problem, **self.problem_kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)


@dataclass
class IterationRecord:
    iteration: int
    candidates: list
    observations: list
    front: list
    hv: float
    log_hv_diff: float | None
    acq_seconds: float
    fallback: bool = False


@dataclass
class BoTrace:
    config: ExperimentConfig
    initial_X: list
    initial_Y: list
    initial_hv: float
    initial_log_hv_diff: float | None
    records: list[IterationRecord] = field(default_factory=list)

    @property
    def hv(self) -> np.ndarray:
        return np.array([self.initial_hv] + [r.hv for r in self.records])

    @property
    def log_hv_diff(self) -> np.ndarray:
        return np.array([self.initial_log_hv_diff] + [r.log_hv_diff for r in self.records], dtype=float)

    def to_dict(self, timing: bool = True) -> dict:
        recs = [asdict(r) for r in self.records]
        if not timing:
            for r in recs:
                r.pop("acq_seconds")
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "initial": {"X": self.initial_X, "Y": self.initial_Y, "hv": self.initial_hv,
                        "log_hv_diff": self.initial_log_hv_diff},
            "records": recs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoTrace":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {d.get('schema_version')!r}")
        ini = d["initial"]
        recs = [IterationRecord(**{"acq_seconds": 0.0, **r}) for r in d["records"]]
        return cls(ExperimentConfig.from_dict(d["config"]), ini["X"], ini["Y"], ini["hv"], ini["log_hv_diff"], recs)

    def rows(self) -> list[dict]:
        c = self.config
        n = len(self.initial_X)
        out = [self._row(0, n, self.initial_hv, self.initial_log_hv_diff, 0.0)]
        for r in self.records:
            n += len(r.candidates)
            out.append(self._row(r.iteration, n, r.hv, r.log_hv_diff, r.acq_seconds))
        return out

    def _row(self, it, n, hv, lhd, secs):
        c = self.config
        return {"schema_version": SCHEMA_VERSION, "problem": c.problem, "method": c.method, "q": c.q,
                "seed": c.seed, "iteration": it, "evaluations": n, "hv": hv, "log_hv_diff": lhd,
                "acq_seconds": secs}


def log_hv_difference(true_hv: float, front: ParetoFront, floor: float = HV_FLOOR) -> float:
    """``log10(max(true_hv - HV(front), floor))``."""
    return float(np.log10(max(true_hv - hypervolume(front), floor)))


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _feasible(C: np.ndarray) -> np.ndarray:
    return np.all(C >= 0, axis=1)


def _unique_rows(X: np.ndarray) -> np.ndarray:
    """Indices of the first occurrence of each distinct row, in order."""
    _, first = np.unique(X, axis=0, return_index=True)
    return np.sort(first)


def _metric(problem: Problem, X: np.ndarray) -> tuple[list, float, float | None]:
    # noise-free values: noisy observations would make the metric itself noisy
    f, c = problem.raw(problem.from_unit(X))
    Y = -f[_feasible(c)]
    front = ParetoFront(Y, problem.ref_point)
    lhd = None if problem.true_front_hv is None else log_hv_difference(problem.true_front_hv, front)
    return front.points.tolist(), hypervolume(front), lhd


class _Loop:
    def __init__(self, config: ExperimentConfig):
        self.c = config
        self.problem = config.make_problem()
        self.truth = self.problem
        if config.noise > 0:
            self.problem = with_noise(self.problem, config.noise, seed=_seed(config.seed, 99))
        self.stream = sobol(config.budget, self.problem.d, seed=config.seed)

    def observe(self, U):
        Y, C = self.problem.evaluate(self.problem.from_unit(U))
        return np.hstack([Y, C])

    def candidates(self, X, Z, it: int, qb: int) -> np.ndarray:
        c, p = self.c, self.problem
        M = p.M
        keep = _unique_rows(X)
        model = GpModel(seed=_seed(c.seed, it, 1)).fit(X[keep], Z[keep])
        Y, C = Z[:, :M], Z[:, M:]
        feas = _feasible(C)
        ref = p.ref_point
        if c.infer_ref:
            ref = infer_reference_point(Y[feas] if feas.any() else Y)
        opt = OptConfig.unit(p.d, restarts=c.restarts, raw_samples=c.raw_samples,
                             max_iterations=c.max_iterations, seed=_seed(c.seed, it, 2))
        rng = np.random.default_rng(_seed(c.seed, it, 3))
        O = model.n_outputs
        base_seed = _seed(c.seed, it, 4)

        if c.method == "qehvi":
            decomp = box_decompose(ParetoFront(Y[feas], ref), c.zeta)

            def make(q, pending=None):
                n_pend = 0 if pending is None else len(pending)
                base = normal_base_samples(c.mc_samples, q + n_pend, O, seed=base_seed)
                return QEHVI(model, decomp, AcqConfig(base, ref, pending=pending), q, constrained=p.V > 0)
        else:
            def make(q, pending=None):
                s = ScalarizationConfig.random(rng, M, Y=Y)
                inc = parego_incumbent(Y, s, feas)
                n_pend = 0 if pending is None else len(pending)
                base = normal_base_samples(c.mc_samples, q + n_pend, O, seed=base_seed)
                return QParEGO(model, s, AcqConfig(base, ref, pending=pending), q, inc, M)

        if c.mode == "joint" or qb == 1:
            res = optimize_joint(make(qb), opt, qb)
        else:
            res = optimize_sequential_greedy(lambda pending, i: make(1, pending), opt, qb)
        if res.degraded:
            log.warning("all restarts failed at iteration %d; using best point found", it)
        return res.X

    def run(self) -> BoTrace:
        c, p = self.c, self.problem
        n0 = c.n_initial(p.d)
        X = self.stream[:n0].copy()
        Z = self.observe(X)
        pts, hv, lhd = _metric(self.truth, X)
        trace = BoTrace(c, X.tolist(), Z.tolist(), hv, lhd)
        it = 0
        while len(X) < c.budget:
            it += 1
            qb = min(c.q, c.budget - len(X))
            t0 = time.perf_counter()
            fallback = False
            if c.method == "sobol":
                U = self.stream[len(X):len(X) + qb]
            else:
                try:
                    U = self.candidates(X, Z, it, qb)
                except (NotPSDError, np.linalg.LinAlgError, ArithmeticError) as err:
                    log.warning("model or acquisition failure at iteration %d (%s); using Sobol points", it, err)
                    U = self.stream[len(X):len(X) + qb]
                    fallback = True
            secs = time.perf_counter() - t0
            Znew = self.observe(U)
            X, Z = np.vstack([X, U]), np.vstack([Z, Znew])
            pts, hv, lhd = _metric(self.truth, X)
            trace.records.append(IterationRecord(it, U.tolist(), Znew.tolist(), pts, hv, lhd, secs, fallback))
        return trace


def run_bo(config: ExperimentConfig) -> BoTrace:
    """One seeded trial: 2(d+1) Sobol points, then model-based batches until the budget is spent."""
    return _Loop(config).run()


def write_trace(trace: BoTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trace.to_dict(), indent=1))
    return path


def read_trace(path) -> BoTrace:
    return BoTrace.from_dict(json.loads(Path(path).read_text()))


def write_csv(traces, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for t in traces:
            w.writerows(t.rows())
    return path


def trial_name(c: ExperimentConfig) -> str:
    return f"{c.problem}_{c.method}_q{c.q}_{c.mode}_seed{c.seed}.json"


def run_sweep(configs, out_dir=None) -> list[BoTrace]:
    """Run independent trials through the worker pool; optionally write JSON per trial and results.csv."""
    configs = list(configs)
    traces = parallel_map(run_bo, configs)
    if out_dir is not None:
        out = Path(out_dir)
        for t in traces:
            write_trace(t, out / trial_name(t.config))
        write_csv(traces, out / "results.csv")
    return traces
