"""Command-line entry point: solve, score, gen.

Exit codes: 0 success, 2 invalid input, 3 fallback solution emitted,
4 hard violations found.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .evaluator import contingency_screen, feasibility_report, market_surplus, scaled_score
from .generator import generate_text
from .instance import InstanceError, parse_instance
from .pipeline import CATEGORY_LIMITS, run_pipeline
from .solution import read_solution, write_solution
from .solvers import SolveOptions


def _load_instance(path: str):
    try:
        with open(path) as fh:
            return parse_instance(fh.read())
    except OSError as exc:
        print(f"cannot read instance: {exc}", file=sys.stderr)
        raise SystemExit(2)
    except InstanceError as exc:
        print(f"invalid instance: {exc}", file=sys.stderr)
        raise SystemExit(2)


def cmd_solve(args) -> int:
    instance = _load_instance(args.instance)
    time_limit = args.time_limit if args.time_limit else CATEGORY_LIMITS[args.category]
    options = SolveOptions(time_limit=time_limit, mip_gap=args.mip_gap)
    solution = run_pipeline(
        instance, args.category, options,
        stage_len=args.stage_len,
        switch_threshold=args.switch_threshold,
        export_mps_dir=args.export_mps,
        workers=args.workers,
    )
    with open(args.out, "w") as fh:
        fh.write(write_solution(solution, instance))
    for line in solution.meta.get("progress", []):
        print(line)
    print(f"objective total: {solution.objective['total']:.6f}")
    if solution.flags:
        print(f"flags: {', '.join(solution.flags)}")
    return 3 if "fallback" in solution.flags else 0


def cmd_score(args) -> int:
    instance = _load_instance(args.instance)
    try:
        with open(args.solution) as fh:
            solution = read_solution(fh.read(), instance)
    except OSError as exc:
        print(f"cannot read solution: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"invalid solution: {exc}", file=sys.stderr)
        return 2
    breakdown = market_surplus(solution, instance)
    report = feasibility_report(solution, instance)
    print("== objective breakdown ==")
    for key, val in breakdown.as_dict().items():
        print(f"  {key:>26}: {val:.6f}")
    if args.best is not None:
        print(f"  {'scaled_score':>26}: {scaled_score(breakdown.total, args.best):.6f}")
    print("== feasibility ==")
    print(f"  hard violations: {len(report.hard)}")
    for v in report.hard[:50]:
        print(f"    {v}")
    print(f"  soft mismatch:  {report.mismatch:.6e}")
    print(f"  soft overload:  {report.overload:.6e}")
    print(f"  soft shortfall: {report.shortfall:.6e}")
    if args.contingencies != "none":
        outages = None
        if args.contingencies not in ("all",):
            with open(args.contingencies) as fh:
                outages = [line.strip() for line in fh if line.strip()]
        results = contingency_screen(solution, instance, outages, workers=args.workers)
        n_unscreen = sum(1 for r in results if not r.screenable)
        n_over = sum(len(r.overloads) for r in results)
        print("== contingency screen ==")
        print(f"  outages screened: {len(results)}, unscreenable (islanding): {n_unscreen}")
        print(f"  post-outage overload records: {n_over}")
        for r in results:
            for t, br, flow, lim in r.overloads[:10]:
                print(f"    outage {r.branch_id}: t={t} {br} |flow|={flow:.4f} > {lim:.4f}")
    return 4 if report.hard else 0


def cmd_gen(args) -> int:
    text = generate_text(args.buses, args.intervals, args.seed)
    with open(args.out, "w") as fh:
        fh.write(text)
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mtscopf",
                                     description="multi-timestep SCOPF pipeline")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run the DC+AC pipeline")
    p_solve.add_argument("--instance", required=True)
    p_solve.add_argument("--category", type=int, choices=(1, 2, 3), required=True)
    p_solve.add_argument("--time-limit", type=float, default=None)
    p_solve.add_argument("--workers", type=int, default=1)
    p_solve.add_argument("--mip-gap", type=float, default=1e-4)
    p_solve.add_argument("--dc-fraction", type=float, default=1.0 / 3.0,
                         help="informational; the budget split is one third DC")
    p_solve.add_argument("--stage-len", type=int, default=None)
    p_solve.add_argument("--switch-threshold", type=float, default=0.5)
    p_solve.add_argument("--export-mps", default=None, metavar="DIR")
    p_solve.add_argument("--out", required=True)
    p_solve.set_defaults(func=cmd_solve)

    p_score = sub.add_parser("score", help="score and check a solution")
    p_score.add_argument("--instance", required=True)
    p_score.add_argument("--solution", required=True)
    p_score.add_argument("--best", type=float, default=None)
    p_score.add_argument("--contingencies", default="none",
                         help="all | none | file with branch ids")
    p_score.add_argument("--workers", type=int, default=1)
    p_score.set_defaults(func=cmd_score)

    p_gen = sub.add_parser("gen", help="generate a synthetic instance")
    p_gen.add_argument("--buses", type=int, required=True)
    p_gen.add_argument("--intervals", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
