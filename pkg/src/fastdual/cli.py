"""Command line entry point: ``fastdual generate|solve|bench|check``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

import numpy as np

from .blocks import RankError, validate_full_row_rank
from .dmpc import (ALGORITHMS, BenchConfig, GeneratorConfig, bench, build_metric, condense,
                   generate)
from .io import dump_problem, load_problem
from .metrics import verify_feasible
from .simnet import run_distributed
from .solvers import SolveOptions, fast_dual_gradient, parallel_fast_dual_gradient

# metric kinds each algorithm can run with
_COMPATIBLE = {
    "parallel": {"sparse_factored"},
    "distributed": {"block_diagonal"},
    "scalar2": {"scalar"},
    "scalar1": {"scalar"},
}


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _dataclass_from(cls, doc):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise SystemExit(f"unknown {cls.__name__} fields: {', '.join(sorted(unknown))}")
    return cls(**doc)


def _generator_config(doc):
    return _dataclass_from(GeneratorConfig, {k: tuple(v) if isinstance(v, list) else v
                                             for k, v in doc.items()})


def cmd_generate(args):
    cfg = _generator_config(_read_json(args.config))
    problem = condense(generate(cfg))
    metric = build_metric(problem, args.with_metric) if args.with_metric else None
    dump_problem(problem, args.out, metric)
    print(json.dumps({"out": args.out, "M": problem.M, "vars": problem.partition.n,
                      "equalities": problem.partition.m,
                      "metric": metric.kind if metric is not None else None}))
    return 0


def cmd_solve(args):
    problem, stored = load_problem(args.problem)
    if stored is not None and stored.kind in _COMPATIBLE[args.algorithm]:
        metric = stored
    else:
        metric = build_metric(problem, args.algorithm)
    opts = SolveOptions(max_iter=args.max_iter, tol=args.tol)
    trace = [] if args.trace else None
    if args.algorithm == "parallel":
        if args.trace:
            raise SystemExit("--trace needs a distributed algorithm")
        rep = parallel_fast_dual_gradient(problem, metric, opts=opts)
    elif args.trace:
        rep = run_distributed(problem, metric, opts=opts, trace=trace)
    else:
        rep = fast_dual_gradient(problem, metric, opts=opts)
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write("round\ttype\tsrc\tdst\tsize\n")
            fh.writelines(line + "\n" for line in trace)
    out = {"algorithm": args.algorithm, "metric": ALGORITHMS[args.algorithm],
           "status": rep.status, "iterations": rep.iterations,
           "primal_residual": rep.primal_residual, "coupling_residual": rep.coupling_residual,
           "objective": rep.objective, "counters": rep.counters}
    if args.solution:
        np.savetxt(args.solution, rep.x)
    print(json.dumps(out))
    return 0 if rep.converged else 2


def cmd_bench(args):
    doc = _read_json(args.config)
    gen = _generator_config(doc.pop("generator", {}))
    if "algorithms" in doc:
        doc["algorithms"] = tuple(doc["algorithms"])
    cfg = _dataclass_from(BenchConfig, {**doc, "generator": gen})

    def progress(rec):
        logging.getLogger("fastdual.bench").info(
            "instance %d ic %d %s: %d iterations", rec.instance, rec.initial_condition,
            rec.algorithm, rec.iterations)

    rows, _ = bench(cfg, out=args.out, progress=progress)
    for r in rows:
        print(f"{r.algorithm:>22s}  iters {r.avg_iters:10.1f}  local {r.avg_local_rounds:10.1f}"
              f"  global {r.avg_global_rounds:8.1f}")
    return 0


def cmd_check(args):
    problem, stored = load_problem(args.problem)
    report = {"rank": "ok"}
    status = 0
    try:
        validate_full_row_rank(problem.A, tol=args.rank_tol)
    except RankError as exc:
        report["rank"] = {"error": str(exc), "dependent_rows": list(exc.rows)}
        status = 1
    metric = stored if stored is not None else build_metric(problem, "distributed")
    feas = verify_feasible(metric, problem)
    report["metric"] = metric.kind
    report["stored_metric"] = stored is not None
    report["feasible"] = feas.feasible
    report["min_eig"] = feas.min_eig
    if not feas.feasible:
        status = 1
    print(json.dumps(report))
    return status


def build_parser():
    ap = argparse.ArgumentParser(prog="fastdual", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="random coupled MPC instance")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--with-metric", choices=sorted(ALGORITHMS),
                   help="also store the metric this algorithm would use")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve a problem file")
    s.add_argument("--problem", required=True)
    s.add_argument("--algorithm", choices=sorted(ALGORITHMS), default="distributed")
    s.add_argument("--max-iter", type=int, default=20_000)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--trace", help="run in the simulator and write its message trace here")
    s.add_argument("--solution", help="write the primal solution, one value per line")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="run the comparison harness")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("check", help="rank and metric feasibility checks")
    c.add_argument("--problem", required=True)
    c.add_argument("--rank-tol", type=float, default=1e-10)
    c.set_defaults(func=cmd_check)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
