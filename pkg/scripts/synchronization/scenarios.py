"""
Named scenarios, scenario checks and the acceptance criteria.

Each criterion is a function of a kernel factory (normally `builtin_kernel`) so
that a deliberately broken factory can be injected to show the suite fails.
"""

from __future__ import annotations

import concurrent.futures
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import subspace_angles

from scripts.common.logger import logger
from scripts.common.settings import acceptance_workers

from . import graph_topology as gt
from .consensus_controller import KinematicController
from .distance_kernels import (
    DistanceKernel,
    bilinear_gradients,
    builtin_kernel,
    check_kernel_invariants,
    max_pde_residual,
    pde_residual_from_gradients,
    two_agent_rate_constant,
    verify_sandwich,
)
from .schemas import load_scenario
from .simulator import (
    ConvergenceReport,
    SimulationConfig,
    SimulationTrace,
    analyze_trace,
    arccot_closed_form,
    constant_limit_check,
    fit_exponential_rate,
    great_circle_state,
    lyapunov_rate_mismatch,
    random_cap_state,
    random_state,
    simulate,
    two_agent_state,
)
from .sphere_core import drive_with_omega, geodesic_angle, log_time_omega

KernelFactory = Callable[..., DistanceKernel]

# CPU seconds per criterion; exceeding the budget fails the criterion
CRITERION_BUDGETS: Dict[str, float] = {"two_agent_arccot": 5.0, "two_agent_exponential": 5.0}
SUITE_BUDGET_SECONDS = 120.0


# --- scenario checks ---


@dataclass(frozen=True)
class Scenario:
    name: str
    config: SimulationConfig
    checks: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class CheckResult:
    kind: str
    threshold: float
    observed: Optional[float]
    passed: bool


def _spread(report: ConvergenceReport, trace: SimulationTrace) -> float:
    return report.final_spread


def _rate(report: ConvergenceReport, trace: SimulationTrace) -> Optional[float]:
    return report.exp_rate


def _r_squared(report: ConvergenceReport, trace: SimulationTrace) -> Optional[float]:
    return report.r_squared


def _drift(report: ConvergenceReport, trace: SimulationTrace) -> float:
    return report.tail_drift


def _final_v(report: ConvergenceReport, trace: SimulationTrace) -> float:
    return float(trace.V[-1])


# kind -> (observed value, passes when observed is below the threshold)
CHECKS: Dict[str, tuple[Callable[[ConvergenceReport, SimulationTrace], Optional[float]], bool]] = {
    "synchronized": (_spread, True),
    "min_rate": (_rate, False),
    "min_r_squared": (_r_squared, False),
    "constant_limit": (_drift, True),
    "max_final_v": (_final_v, True),
}


def evaluate_checks(trace: SimulationTrace, checks: Mapping[str, float], report: Optional[ConvergenceReport] = None) -> List[CheckResult]:
    report = report if report is not None else analyze_trace(trace)
    results = []
    for kind, threshold in checks.items():
        observe, below = CHECKS[kind]
        observed = observe(report, trace)
        if observed is None:
            passed = False
        elif kind == "max_final_v":
            passed = observed <= threshold
        else:
            passed = observed < threshold if below else observed >= threshold
        results.append(CheckResult(kind=kind, threshold=threshold, observed=observed, passed=passed))
    return results


def load_scenario_run(
    path: str | Path,
    seed: Optional[int] = None,
    dt: Optional[float] = None,
    t_end: Optional[float] = None,
) -> Scenario:
    source = Path(path)
    parsed = load_scenario(source)
    config = parsed.to_config(base_dir=source.parent, seed=seed, dt=dt, t_end=t_end)
    return Scenario(name=config.name, config=config, checks=dict(parsed.checks))


# --- acceptance criteria ---


@dataclass
class CriterionResult:
    name: str
    passed: bool
    detail: str
    observed: Dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0
    cpu_seconds: float = 0.0


def _angles(trace: SimulationTrace) -> np.ndarray:
    return geodesic_angle(trace.states[:, 0], trace.states[:, 1])


def two_agent_arccot(kernel_factory: KernelFactory) -> CriterionResult:
    kernel = kernel_factory("arccos_sqrt")
    c = two_agent_rate_constant(kernel)
    theta0 = math.pi / 4
    trace = simulate(
        SimulationConfig(
            graph=gt.path_graph(2),
            kernels=kernel,
            t_end=100.0,
            dt=1e-2,
            record_every=10,
            initial_vectors=two_agent_state(theta0).vectors,
            name="two_agent_arccot",
        )
    )
    theta = _angles(trace)
    error = float(np.max(np.abs(theta - arccot_closed_form(trace.times, theta0, c))))
    product = float(theta[-1] * trace.times[-1])
    relative = abs(product - 1.0 / c) * c
    passed = trace.valid and error < 1e-5 and relative < 0.05
    return CriterionResult(
        "two_agent_arccot",
        passed,
        f"c={c:.6g}, max|theta-arccot|={error:.3e} (<1e-5), theta*t at t=100 off 1/c by {relative:.2%} (<5%)",
        {"c": c, "max_error": error, "theta_t": product},
    )


def two_agent_exponential(kernel_factory: KernelFactory) -> CriterionResult:
    kernel = kernel_factory("linear_cos", a=1.0)
    worst_ratio, rates = 0.0, []
    for theta0 in (0.1, 0.5, 1.0, math.pi / 2 - 0.01):
        trace = simulate(
            SimulationConfig(
                graph=gt.path_graph(2),
                kernels=kernel,
                t_end=10.0,
                dt=5e-3,
                record_every=2,
                initial_vectors=two_agent_state(theta0).vectors,
                name="two_agent_exponential",
            )
        )
        theta = _angles(trace)
        worst_ratio = max(worst_ratio, float(np.max(theta / (theta0 * np.exp(-trace.times)))))
        rates.append(fit_exponential_rate(trace.times, theta, window=0.5).rate)
    passed = worst_ratio <= 1.0 + 1e-3 and all(1.9 <= r <= 2.1 for r in rates)
    return CriterionResult(
        "two_agent_exponential",
        passed,
        f"max theta/(theta0 e^-t)={worst_ratio:.6f} (<=1.001), rates={[round(r, 4) for r in rates]} (in [1.9, 2.1])",
        {"worst_ratio": worst_ratio, "rates": rates},
    )


def ln_t_counterexample(kernel_factory: KernelFactory) -> CriterionResult:
    omega = log_time_omega()
    marks = (math.e, math.e ** 2, math.e ** 3)
    closed = drive_with_omega([1.0, 0.0, 0.0], omega, 1.0, marks[-1], 2.5e-4, checkpoints=marks, record_every=10_000)
    error = max(
        float(np.linalg.norm(closed.sample_at(t) - np.array([math.cos(k), math.sin(k), 0.0])))
        for k, t in enumerate(marks, start=1)
    )
    decades = tuple(math.e ** k for k in range(1, 7))
    long_run = drive_with_omega([1.0, 0.0, 0.0], omega, 1.0, decades[-1], 1e-2, checkpoints=decades, record_every=1000)
    steps = [float(geodesic_angle(long_run.sample_at(a), long_run.sample_at(b))) for a, b in zip(decades[:-1], decades[1:])]
    checks = constant_limit_check(long_run, tail=0.7, tol=1e-4)
    omega_tail = float(np.linalg.norm(omega(decades[-1])))
    passed = error < 1e-8 and min(steps) >= 0.9 and not checks[0].constant_limit and omega_tail < 1e-2
    return CriterionResult(
        "ln_t_counterexample",
        passed,
        f"max error at e,e^2,e^3={error:.3e} (<1e-8), per-decade angle min={min(steps):.4f} (>=0.9), "
        f"|omega(e^6)|={omega_tail:.3e}, tail_drift={checks[0].tail_drift:.3f}, constant_limit={checks[0].constant_limit}",
        {"max_error": error, "decade_angles": steps, "tail_drift": checks[0].tail_drift},
    )


def tree_exponential(kernel_factory: KernelFactory, seed: int = 5) -> CriterionResult:
    graph = gt.random_tree(5, seed)
    state = random_cap_state(5, seed, half_angle=0.7)
    trace = simulate(
        SimulationConfig(
            graph=graph,
            kernels=kernel_factory("linear_cos", a=1.0),
            t_end=50.0,
            dt=1e-2,
            record_every=10,
            initial_vectors=state.vectors,
            name="tree_exponential",
        )
    )
    report = analyze_trace(trace, sync_tol=1e-4, limit_tol=1e-4)
    passed = (
        trace.valid
        and report.synchronized
        and report.exp_rate is not None
        and report.exp_rate > 0
        and report.r_squared > 0.999
        and report.constant_limit
    )
    return CriterionResult(
        "tree_exponential",
        passed,
        f"edges={list(graph.edges)}, spread={report.final_spread:.3e} (<1e-4), rate={report.exp_rate}, "
        f"r2={report.r_squared} (>0.999), tail_drift={report.tail_drift:.3e} (<1e-4)",
        {"spread": report.final_spread, "rate": report.exp_rate, "r_squared": report.r_squared},
    )


B1 = np.array([[1, 0, 1], [-1, 1, 0], [0, -1, -1]])
B2 = np.array([[1, 1, 0], [-1, 0, 1], [0, -1, -1]])
B3 = np.array([[0, 1, 1], [1, 0, -1], [-1, -1, 0]])


def incidence_equivalence(kernel_factory: KernelFactory) -> CriterionResult:
    b1 = gt.incidence(gt.triangle_graph())
    b2 = gt.permute_nodes(b1, gt.transposition(3, 0, 1))
    b3 = gt.permute_edges(b2, gt.transposition(3, 0, 2))
    passed = np.array_equal(b1, B1) and np.array_equal(b2, B2) and np.array_equal(b3, B3)
    return CriterionResult(
        "incidence_equivalence",
        passed,
        f"B1 exact={np.array_equal(b1, B1)}, B2 exact={np.array_equal(b2, B2)}, B3 exact={np.array_equal(b3, B3)}",
    )


INDEPENDENT_CYCLES_SPAN = np.array([[1, 1, -1, 0, 0, 0], [0, 0, 0, 1, -1, 1]])
SHARED_EDGE_SPAN = np.array(
    [
        [1, 1, -1, 0, 0, 0, 0, 0],
        [0, 0, 1, 0, 0, 0, -1, 1],
        [0, 0, 0, 1, -1, 1, 0, 0],
    ]
)


def cycle_null_spaces(kernel_factory: KernelFactory) -> CriterionResult:
    observed = {}
    passed = True
    for label, graph, expected in (
        ("independent", gt.independent_cycles_graph(), INDEPENDENT_CYCLES_SPAN),
        ("shared_edge", gt.shared_edge_cycles_graph(), SHARED_EDGE_SPAN),
    ):
        report = gt.cycle_null_space(graph)
        b = gt.incidence(graph)
        basis = report.null_space_basis
        angle = float(np.max(subspace_angles(basis.T, expected.T.astype(float)))) if basis.shape == expected.shape else math.inf
        exact = report.exact and not np.any(b @ basis.astype(np.int64).T)
        observed[label] = {"dimension": report.dimension, "max_angle": angle, "classification": report.classification.value}
        passed = passed and report.dimension == expected.shape[0] and angle < 1e-10 and exact
    return CriterionResult(
        "cycle_null_spaces",
        passed,
        ", ".join(f"{k}: dim={v['dimension']} angle={v['max_angle']:.2e} class={v['classification']}" for k, v in observed.items()),
        observed,
    )


def sandwich_bounds(kernel_factory: KernelFactory) -> CriterionResult:
    rows, passed = [], True
    for a in (0.5, 1.0, 2.0):
        report = verify_sandwich(kernel_factory("linear_cos", a=a), math.pi / 2, samples=100_000)
        ok = report.alpha_lower >= 1 / (2 * a) - 1e-9 and report.alpha_upper <= 1 / a + 1e-9
        passed = passed and ok
        rows.append(f"a={a:g}: [{report.alpha_lower:.9f}, {report.alpha_upper:.9f}]")
    return CriterionResult("sandwich_bounds", passed, "; ".join(rows))


def pde_residual(kernel_factory: KernelFactory) -> CriterionResult:
    kernels = {
        "linear_cos": kernel_factory("linear_cos", a=1.0),
        "arccos_sqrt": kernel_factory("arccos_sqrt"),
        "quadratic": kernel_factory("quadratic"),
        "power": kernel_factory("power", a=1.0, alpha=1.5),
        "log_barrier": kernel_factory("log_barrier"),
    }
    residuals = {name: max_pde_residual(k, samples=10_000) for name, k in kernels.items()}
    control = float(
        np.linalg.norm(
            pde_residual_from_gradients(bilinear_gradients(np.diag([1.0, 2.0, 3.0])), [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        )
    )
    passed = all(r < 1e-10 for r in residuals.values()) and control > 0.1
    return CriterionResult(
        "pde_residual",
        passed,
        ", ".join(f"{k}={v:.2e}" for k, v in residuals.items()) + f", anisotropic control={control:.3f} (>0.1)",
        {"residuals": residuals, "control": control},
    )


def lyapunov_dissipation(kernel_factory: KernelFactory, runs: int = 20) -> CriterionResult:
    names = ("linear_cos", "arccos_sqrt", "quadratic")
    flagged, fd_failures = [], []
    for seed in range(runs):
        n_nodes = 3 + seed % 6
        graph = gt.random_tree(n_nodes, seed) if seed % 2 == 0 else gt.cycle_graph(n_nodes)
        kernel = kernel_factory(names[seed % len(names)])
        state = random_state(n_nodes, seed)
        trace = simulate(
            SimulationConfig(
                graph=graph,
                kernels=kernel,
                t_end=5.0,
                dt=1e-2,
                record_every=1,
                initial_vectors=state.vectors,
                name=f"dissipation_{seed}",
            )
        )
        if not trace.valid:
            flagged.append(seed)
        controller = KinematicController(graph, kernel)
        coarse = lyapunov_rate_mismatch(controller, state.vectors, 1e-3)
        fine = lyapunov_rate_mismatch(controller, state.vectors, 1e-4)
        if not (fine < 0.2 * coarse or coarse < 1e-9):
            fd_failures.append(seed)
    passed = not flagged and not fd_failures
    return CriterionResult(
        "lyapunov_dissipation",
        passed,
        f"{runs} runs, V increases in seeds {flagged}, non-first-order dV/dt in seeds {fd_failures}",
        {"flagged": flagged, "fd_failures": fd_failures},
    )


def cycle_equilibrium(kernel_factory: KernelFactory) -> CriterionResult:
    graph = gt.cycle_graph(4)
    kernel = kernel_factory("linear_cos", a=1.0)
    state = great_circle_state(4)
    omegas, _ = KinematicController(graph, kernel).control(state.vectors)
    peak = float(np.max(np.linalg.norm(omegas, axis=1)))
    trace = simulate(
        SimulationConfig(graph=graph, kernels=kernel, t_end=1.0, dt=1e-2, record_every=10, initial_vectors=state.vectors, name="cycle_equilibrium")
    )
    moved = float(np.max(geodesic_angle(trace.states[-1], trace.states[0])))
    passed = peak < 1e-10 and moved < 1e-10
    return CriterionResult(
        "cycle_equilibrium",
        passed,
        f"max|omega_i| at t=0 = {peak:.2e} (<1e-10), drift over t in [0,1] = {moved:.2e}",
        {"max_omega": peak, "drift": moved},
    )


def kernel_derivatives(kernel_factory: KernelFactory) -> CriterionResult:
    problems = {}
    for name, params in (
        ("linear_cos", {"a": 1.0}),
        ("arccos_sqrt", {}),
        ("quadratic", {}),
        ("power", {"a": 1.0, "alpha": 1.5}),
        ("log_barrier", {}),
    ):
        found = check_kernel_invariants(kernel_factory(name, **params))
        if found:
            problems[name] = found
    return CriterionResult(
        "kernel_derivatives",
        not problems,
        "all built-in kernels consistent" if not problems else "; ".join(f"{k}: {v}" for k, v in problems.items()),
        {"problems": problems},
    )


CRITERIA: Dict[str, Callable[[KernelFactory], CriterionResult]] = {
    "two_agent_arccot": two_agent_arccot,
    "two_agent_exponential": two_agent_exponential,
    "ln_t_counterexample": ln_t_counterexample,
    "tree_exponential": tree_exponential,
    "incidence_equivalence": incidence_equivalence,
    "cycle_null_spaces": cycle_null_spaces,
    "sandwich_bounds": sandwich_bounds,
    "pde_residual": pde_residual,
    "lyapunov_dissipation": lyapunov_dissipation,
    "cycle_equilibrium": cycle_equilibrium,
    "kernel_derivatives": kernel_derivatives,
}


def _run_one(name: str, kernel_factory: KernelFactory) -> CriterionResult:
    started, cpu_started = time.perf_counter(), time.thread_time()
    try:
        result = CRITERIA[name](kernel_factory)
    except Exception as exc:
        logger.exception("Acceptance criterion raised", extra={"criterion": name})
        result = CriterionResult(name, False, f"raised {type(exc).__name__}: {exc}")
    result.seconds = time.perf_counter() - started
    # budgets are measured in CPU time of the worker thread
    result.cpu_seconds = time.thread_time() - cpu_started
    budget = CRITERION_BUDGETS.get(name)
    if budget is not None and result.cpu_seconds > budget:
        result.passed = False
        result.detail += f"; over budget: {result.cpu_seconds:.2f}s CPU > {budget:g}s"
    logger.info(
        "Acceptance criterion finished",
        extra={"criterion": name, "passed": result.passed, "seconds": round(result.seconds, 3)},
    )
    return result


def run_acceptance(
    kernel_factory: KernelFactory = builtin_kernel,
    only: Optional[Iterable[str]] = None,
    parallel: bool = False,
) -> List[CriterionResult]:
    """Run criteria in declaration order; results come back in that order either way."""
    names: Sequence[str] = list(CRITERIA) if only is None else list(only)
    unknown = [n for n in names if n not in CRITERIA]
    if unknown:
        raise KeyError(f"unknown criteria {unknown}; known: {list(CRITERIA)}")
    if not parallel:
        return [_run_one(name, kernel_factory) for name in names]
    with concurrent.futures.ThreadPoolExecutor(max_workers=acceptance_workers()) as pool:
        fut_map = {pool.submit(_run_one, name, kernel_factory): i for i, name in enumerate(names)}
        results = {}
        for fut in concurrent.futures.as_completed(fut_map):
            results[fut_map[fut]] = fut.result()
    return [results[i] for i in sorted(results)]


def format_acceptance_table(results: Sequence[CriterionResult]) -> str:
    width = max(len(r.name) for r in results) if results else 10
    lines = [f"{'criterion':<{width}}  status  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
