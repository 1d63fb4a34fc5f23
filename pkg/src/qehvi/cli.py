"""Command line entry point: ``qehvi {run,sweep,plot,hv}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import harness
from .pareto import ParetoFront, box_decompose, hvi_inclusion_exclusion, hypervolume, infer_reference_point
from .problems import PROBLEMS


def _experiment_args(p: argparse.ArgumentParser, multi: bool = False) -> None:
    if multi:
        p.add_argument("--problem", nargs="+", required=True, choices=sorted(PROBLEMS))
        p.add_argument("--method", nargs="+", default=list(harness.METHODS), choices=harness.METHODS)
        p.add_argument("--q", nargs="+", type=int, default=[1])
        p.add_argument("--seed", type=int, default=0, help="first seed")
        p.add_argument("--trials", type=int, default=20, help="number of seeds per cell")
    else:
        p.add_argument("--problem", required=True, choices=sorted(PROBLEMS))
        p.add_argument("--method", default="qehvi", choices=harness.METHODS)
        p.add_argument("--q", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=None, help="total evaluations incl. the 2(d+1) initial points")
    p.add_argument("--mc-samples", type=int, default=128)
    p.add_argument("--zeta", type=float, default=0.0)
    p.add_argument("--mode", default="joint", choices=harness.MODES)
    p.add_argument("--infer-ref", action="store_true", help="use the observed nadir heuristic as reference point")
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--raw-samples", type=int, default=1024)
    p.add_argument("--max-iterations", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.0, help="noise sd as a fraction of each objective's range")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def _config(a, problem, method, q, seed) -> harness.ExperimentConfig:
    return harness.ExperimentConfig(
        problem=problem, method=method, q=q, budget=a.budget, mc_samples=a.mc_samples, seed=seed,
        zeta=a.zeta, mode=a.mode, infer_ref=a.infer_ref, restarts=a.restarts, raw_samples=a.raw_samples,
        max_iterations=a.max_iterations, noise=a.noise)


def _summary(t: harness.BoTrace) -> str:
    c = t.config
    lhd = t.log_hv_diff[-1]
    tail = "" if np.isnan(lhd) else f" log_hv_diff={lhd:.4f}"
    return f"{c.problem} {c.method} q={c.q} seed={c.seed}: hv={t.hv[-1]:.6g}{tail}"


def cmd_run(a) -> int:
    trace = harness.run_sweep([_config(a, a.problem, a.method, a.q, a.seed)], a.out)[0]
    print(_summary(trace))
    return 0


def cmd_sweep(a) -> int:
    configs = [_config(a, prob, m, q, s)
               for prob in a.problem for m in a.method for q in a.q
               for s in range(a.seed, a.seed + a.trials)]
    for t in harness.run_sweep(configs, a.out):
        print(_summary(t))
    return 0


def _curves(rows, x_key, y_key):
    """{(problem, method, q): (x, median, 2 standard errors)} across seeds."""
    by = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r[y_key] in ("", "None"):
            continue
        by[(r["problem"], r["method"], r["q"])][int(r[x_key])].append(float(r[y_key]))
    out = {}
    for key, pts in sorted(by.items()):
        xs = np.array(sorted(pts))
        vals = [np.array(pts[x]) for x in xs]
        med = np.array([np.median(v) for v in vals])
        se = np.array([v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0 for v in vals])
        out[key] = (xs, med, 2 * se)
    return out


def cmd_plot(a) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with Path(a.csv).open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        print("no rows to plot", file=sys.stderr)
        return 1
    y_key = "log_hv_diff" if all(r["log_hv_diff"] not in ("", "None") for r in rows) else "hv"
    fig, ax = plt.subplots(figsize=(6, 4))
    for (prob, method, q), (x, med, band) in _curves(rows, a.x, y_key).items():
        line, = ax.plot(x, med, label=f"{prob} {method} q={q}")
        ax.fill_between(x, med - band, med + band, color=line.get_color(), alpha=0.2)
    ax.set_xlabel("batch iterations" if a.x == "iteration" else "function evaluations")
    ax.set_ylabel("log hypervolume difference" if y_key == "log_hv_diff" else "hypervolume")
    ax.legend(fontsize=7)
    fig.tight_layout()
    a.out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(a.out, format="svg")
    plt.close(fig)
    print(a.out)
    return 0


def _read_points(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)


def cmd_hv(a) -> int:
    P = _read_points(a.points)
    if a.ref is not None:
        ref = np.array([float(v) for v in a.ref.split(",")])
    elif a.infer_ref:
        ref = infer_reference_point(P)
    else:
        raise SystemExit("give --ref or --infer-ref")
    front = ParetoFront(P, ref)
    out = {"schema_version": harness.SCHEMA_VERSION, "ref": ref.tolist(), "n_front": len(front),
           "hv": hypervolume(front)}
    decomp = None
    if a.new is not None or a.decompose:
        decomp = box_decompose(front, a.zeta)
    if a.new is not None:
        out["hvi"] = float(hvi_inclusion_exclusion(_read_points(a.new), decomp))
    if a.decompose:
        out["decomposition"] = decomp.to_dict()
    text = json.dumps(out, indent=1)
    if a.out is not None:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        a.out.write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qehvi", description="Multi-objective Bayesian optimisation with qEHVI.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a single trial")
    _experiment_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of problems x methods x batch sizes x seeds")
    _experiment_args(p, multi=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="SVG of median +- 2 standard errors across seeds")
    p.add_argument("csv", type=Path, help="results.csv written by run or sweep")
    p.add_argument("--x", choices=("iteration", "evaluations"), default="evaluations")
    p.add_argument("--out", type=Path, required=True, help="SVG path")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("hv", help="hypervolume / improvement / box decomposition of CSV point sets (maximisation)")
    p.add_argument("points", type=Path, help="CSV of objective vectors, one per row")
    p.add_argument("--ref", help="comma-separated reference point")
    p.add_argument("--infer-ref", action="store_true")
    p.add_argument("--new", type=Path, help="CSV of new points; reports their joint improvement")
    p.add_argument("--zeta", type=float, default=0.0)
    p.add_argument("--decompose", action="store_true", help="include the box decomposition in the output")
    p.add_argument("--out", type=Path, help="also write the JSON here")
    p.set_defaults(func=cmd_hv)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
