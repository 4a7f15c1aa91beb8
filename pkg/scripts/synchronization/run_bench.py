import argparse
import math
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

from scripts.common.errors import (
    EXIT_CHECK_FAILED,
    EXIT_INVALID_TRACE,
    EXIT_SUCCESS,
    ConfigError,
    SphereSyncError,
    create_error_report,
)
from scripts.common.logger import logger

from . import graph_topology as gt
from .distance_kernels import (
    builtin_kernel,
    class_limits,
    infer_classes,
    max_pde_residual,
    two_agent_rate_constant,
    verify_sandwich,
)
from .scenarios import (
    CRITERIA,
    SUITE_BUDGET_SECONDS,
    evaluate_checks,
    format_acceptance_table,
    load_scenario_run,
    run_acceptance,
)
from .simulator import analyze_trace, simulate, write_trace_csv


def _num(x: Optional[float]) -> str:
    if x is None:
        return "none"
    return f"{x:.6g}"


def _result_line(**fields) -> str:
    return "RESULT " + " ".join(f"{k}={v}" for k, v in fields.items())


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = load_scenario_run(args.config, seed=args.seed, dt=args.dt, t_end=args.t_end)
    trace = simulate(scenario.config)
    if args.out:
        write_trace_csv(trace, args.out)
    report = analyze_trace(trace)
    checks = evaluate_checks(trace, scenario.checks, report)

    cfg = scenario.config
    print(f"Scenario {scenario.name}: N={cfg.graph.n_nodes}, M={cfg.graph.n_edges}, t_end={cfg.t_end:g}, dt={cfg.dt:g}, samples={len(trace)}")
    if not trace.valid:
        print(f"Trace flagged: {trace.failure}")
    print(f"Final V {_num(float(trace.V[-1]))}, spread {_num(report.final_spread)} rad, fitted |e| rate {_num(report.exp_rate)} (r2 {_num(report.r_squared)})")
    for check in checks:
        print(f"  check {check.kind}: observed {_num(check.observed)} vs {check.threshold:g} -> {'pass' if check.passed else 'FAIL'}")
    if args.out:
        print(f"Trace written to {args.out}")
    print(
        _result_line(
            scenario=scenario.name,
            valid=str(trace.valid).lower(),
            final_V=_num(float(trace.V[-1])),
            spread=_num(report.final_spread),
            rate=_num(report.exp_rate),
            r2=_num(report.r_squared),
            checks=f"{sum(c.passed for c in checks)}/{len(checks)}",
        )
    )
    if not trace.valid:
        return EXIT_INVALID_TRACE
    return EXIT_SUCCESS if all(c.passed for c in checks) else EXIT_CHECK_FAILED


def _matrix_rows(matrix: np.ndarray, exact: bool) -> List[str]:
    if exact:
        return ["  [" + ", ".join(f"{int(v):d}" for v in row) + "]" for row in matrix]
    return ["  [" + ", ".join(f"{v:.6f}" for v in row) + "]" for row in matrix]


def cmd_graph(args: argparse.Namespace) -> int:
    graph = gt.read_edge_list(args.edges)
    b = gt.incidence(graph)
    tree = gt.is_tree(graph)
    lam = gt.lambda_min_BtB(b) if graph.n_edges else math.nan
    report = gt.cycle_null_space(graph)

    print(f"N={graph.n_nodes} M={graph.n_edges}")
    print(f"tree: {'yes' if tree else 'no'}")
    print(f"lambda_min(B^T B) = {lam:.6g}")
    print(f"cycles: {report.classification.value}")
    print("incidence B:")
    print("\n".join(_matrix_rows(b, exact=True)))
    print(f"null space basis (dimension {report.dimension}):")
    if report.dimension:
        print("\n".join(_matrix_rows(report.null_space_basis, exact=report.exact)))
    print(
        _result_line(
            n=graph.n_nodes,
            m=graph.n_edges,
            tree=str(tree).lower(),
            lambda_min=_num(lam),
            classification=report.classification.value,
            kernel_dim=report.dimension,
        )
    )
    return EXIT_SUCCESS


def _parse_params(pairs: List[str]) -> dict:
    params = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--param expects key=value, got {pair!r}", {"param": pair})
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"--param {key.strip()}: {value!r} is not a number", {"param": pair}) from None
    return params


def cmd_kernel(args: argparse.Namespace) -> int:
    kernel = builtin_kernel(args.name, **_parse_params(args.param))
    limits = class_limits(kernel)
    sandwich = verify_sandwich(kernel, math.pi / 2)
    residual = max_pde_residual(kernel, samples=10_000)
    classes = sorted(c.value for c in infer_classes(kernel))

    def lim(value: float, diverges: bool) -> str:
        return "diverges" if diverges else _num(value)

    print(f"Kernel {kernel.describe()} (declared {kernel.declared_class.value}, inferred {', '.join(classes)})")
    print(f"lim s->0+ f'(s) sqrt(s)   = {lim(limits.lim0, limits.lim0_diverges)}")
    print(f"lim s->2- f'(s) sqrt(2-s) = {lim(limits.lim2, limits.lim2_diverges)}")
    print(f"sandwich on [0, pi/2]: [{sandwich.alpha_lower:.9g}, {sandwich.alpha_upper:.9g}] holds={sandwich.holds}")
    print(f"max PDE residual over 10^4 pairs: {residual:.3e}")
    print(f"two-agent constant c = {two_agent_rate_constant(kernel):.9g}")
    print(
        _result_line(
            kernel=args.name,
            lim0="inf" if limits.lim0_diverges else _num(limits.lim0),
            lim2="inf" if limits.lim2_diverges else _num(limits.lim2),
            alpha_lower=_num(sandwich.alpha_lower),
            alpha_upper=_num(sandwich.alpha_upper),
            residual=f"{residual:.3e}",
        )
    )
    return EXIT_SUCCESS


def cmd_acceptance(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    results = run_acceptance(only=args.only or None, parallel=args.parallel)
    wall = time.perf_counter() - started
    within_budget = wall <= SUITE_BUDGET_SECONDS
    print(format_acceptance_table(results))
    if not within_budget:
        print(f"Suite wall-clock {wall:.2f}s exceeds the {SUITE_BUDGET_SECONDS:g}s budget")
    passed = sum(r.passed for r in results)
    print(
        _result_line(
            passed=f"{passed}/{len(results)}",
            seconds=f"{wall:.2f}",
            budget=str(within_budget).lower(),
        )
    )
    return EXIT_SUCCESS if passed == len(results) and within_budget else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spheresync", description="Attitude synchronization bench on the unit sphere")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Run a scenario file and report convergence")
    sim.add_argument("--config", required=True, help="Scenario INI file")
    sim.add_argument("--out", default=None, help="Write the trace CSV here")
    sim.add_argument("--seed", type=int, default=None, help="Override the initial-state seed")
    sim.add_argument("--dt", type=float, default=None, help="Override the step size")
    sim.add_argument("--t-end", dest="t_end", type=float, default=None, help="Override the final time")
    sim.set_defaults(handler=cmd_simulate)

    graph = sub.add_parser("graph", help="Incidence, spectrum and cycle null space of an edge list")
    graph.add_argument("edges", type=Path, help="Edge-list file: 'N M' then M lines 'i j'")
    graph.set_defaults(handler=cmd_graph)

    kernel = sub.add_parser("kernel", help="Diagnostics of a built-in distance kernel")
    kernel.add_argument("name", help="linear_cos, arccos_sqrt, quadratic, power or log_barrier")
    kernel.add_argument("--param", action="append", default=[], help="Kernel parameter key=value (repeatable)")
    kernel.set_defaults(handler=cmd_kernel)

    acceptance = sub.add_parser("acceptance", help="Run the acceptance criteria")
    acceptance.add_argument("--parallel", action="store_true", help="Run criteria concurrently")
    acceptance.add_argument("--only", nargs="*", choices=list(CRITERIA), default=None, help="Subset of criteria")
    acceptance.set_defaults(handler=cmd_acceptance)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:
        report = create_error_report(exc)
        if isinstance(exc, SphereSyncError):
            logger.error("Command failed", extra={"command": args.command, "stage": report.stage, "error_type": report.error_type})
        else:
            logger.exception("Command failed", extra={"command": args.command})
        print(report.model_dump_json(), file=sys.stderr)
        return report.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
