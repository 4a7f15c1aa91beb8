"""
Closed-loop time marching and convergence diagnostics.

Every agent is advanced on the sphere with the Rodrigues map using a midpoint
scheme: control at the current state, half step, control again, full step from
the current state.  Samples are recorded every `record_every` steps plus t=0
and t_end; V is checked for monotonicity at each sample.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, TextIO, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, InstanceOf, field_validator, model_validator

from scripts.common.errors import (
    EmptyWindowError,
    InsufficientSamplesError,
    KernelEvaluationError,
    NetworkSizeMismatchError,
    NonFiniteStateError,
)
from scripts.common.logger import logger
from scripts.common.settings import default_dt, default_record_every, default_t_end

from .consensus_controller import KinematicController, NetworkState
from .distance_kernels import DistanceKernel
from .graph_topology import NetworkGraph
from .sphere_core import Trajectory, as_unit_vector, geodesic_angle, rotate_vectors

LOG_FLOOR = 1e-14
MIN_FIT_SAMPLES = 10
V_TOLERANCE = 1e-10
CSV_DIGITS = 17


class SimulationConfig(BaseModel):
    """One closed-loop run. Exactly one of `initial_vectors` and `seed` selects the start state."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    graph: InstanceOf[NetworkGraph]
    kernels: Union[InstanceOf[DistanceKernel], tuple[InstanceOf[DistanceKernel], ...]]
    t_end: float = Field(default_factory=default_t_end, gt=0)
    dt: float = Field(default_factory=default_dt, gt=0)
    record_every: int = Field(default_factory=default_record_every, ge=1)
    initial_vectors: Optional[InstanceOf[np.ndarray]] = None
    seed: Optional[int] = None
    name: str = "scenario"

    @field_validator("initial_vectors", mode="before")
    @classmethod
    def _as_array(cls, value):
        if value is None:
            return None
        return np.asarray(value, dtype=np.float64)

    @model_validator(mode="after")
    def _check(self):
        if self.t_end < self.dt:
            raise ValueError(f"t_end ({self.t_end}) must be >= dt ({self.dt})")
        if (self.initial_vectors is None) == (self.seed is None):
            raise ValueError("give exactly one of initial_vectors or seed")
        if self.initial_vectors is not None and self.initial_vectors.shape != (self.graph.n_nodes, 3):
            raise NetworkSizeMismatchError(
                f"initial_vectors has shape {self.initial_vectors.shape}, graph has {self.graph.n_nodes} nodes"
            )
        return self

    def initial_state(self) -> NetworkState:
        if self.initial_vectors is not None:
            return NetworkState.normalized(self.initial_vectors)
        return random_state(self.graph.n_nodes, self.seed)


@dataclass
class SimulationTrace:
    times: NDArray[np.float64]
    states: NDArray[np.float64]
    V: NDArray[np.float64]
    Vdot: NDArray[np.float64]
    omega_norms: NDArray[np.float64]
    edge_error_norms: NDArray[np.float64]
    valid: bool = True
    failure: Optional[str] = None

    def __post_init__(self) -> None:
        lengths = {len(self.times), len(self.states), len(self.V), len(self.Vdot), len(self.omega_norms), len(self.edge_error_norms)}
        if len(lengths) != 1:
            raise ValueError(f"trace series have inconsistent lengths {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n_agents(self) -> int:
        return int(self.states.shape[1])

    @property
    def n_edges(self) -> int:
        return int(self.edge_error_norms.shape[1])

    @property
    def stacked_error_norm(self) -> NDArray[np.float64]:
        """|e| of the stacked (3M) edge-error vector per sample."""
        return np.sqrt(np.sum(self.edge_error_norms ** 2, axis=1))

    def state_at(self, m: int) -> NetworkState:
        return NetworkState(vectors=self.states[m], time=float(self.times[m]))


@dataclass(frozen=True)
class ConvergenceReport:
    synchronized: bool
    final_spread: float
    exp_rate: Optional[float]
    r_squared: Optional[float]
    constant_limit: bool
    limit_vector: Optional[NDArray[np.float64]]
    tail_drift: float


@dataclass(frozen=True)
class RateFit:
    rate: float
    r_squared: float
    n_samples: int


@dataclass(frozen=True)
class LimitCheck:
    agent: int
    constant_limit: bool
    tail_drift: float


@dataclass(frozen=True)
class ScalarTrajectory:
    times: NDArray[np.float64]
    thetas: NDArray[np.float64]


# --- stepping ---


def closed_loop_step(
    controller: KinematicController,
    vectors: NDArray[np.float64],
    dt: float,
    omegas: Optional[NDArray[np.float64]] = None,
) -> NDArray[np.float64]:
    """Midpoint step. `omegas` may carry the control already evaluated at `vectors`."""
    if omegas is None:
        omegas, _ = controller.control(vectors)
    half = rotate_vectors(vectors, omegas, 0.5 * dt)
    omegas_mid, _ = controller.control(half)
    return rotate_vectors(vectors, omegas_mid, dt)


def lyapunov_rate_mismatch(controller: KinematicController, vectors: ArrayLike, h: float) -> float:
    """|(V(t+h) - V(t))/h - Vdot(t)| along one closed-loop step."""
    n = np.asarray(vectors, dtype=np.float64)
    omegas, _ = controller.control(n)
    vdot = -float(np.einsum("ij,ij->", omegas, omegas))
    v0 = controller.lyapunov_value(n)
    v1 = controller.lyapunov_value(closed_loop_step(controller, n, h, omegas=omegas))
    return abs((v1 - v0) / h - vdot)


def simulate(config: SimulationConfig) -> SimulationTrace:
    controller = KinematicController(config.graph, config.kernels)
    n = config.initial_state().vectors
    n_steps = max(1, math.ceil(config.t_end / config.dt - 1e-9))
    h = config.t_end / n_steps

    times, states, values, rates, omega_norms, error_norms = [], [], [], [], [], []

    def record(t: float, vectors: NDArray[np.float64], omegas: NDArray[np.float64], errors: NDArray[np.float64]) -> float:
        v = controller.lyapunov_value(vectors)
        times.append(t)
        states.append(vectors)
        values.append(v)
        rates.append(-float(np.einsum("ij,ij->", omegas, omegas)))
        omega_norms.append(np.linalg.norm(omegas, axis=1))
        error_norms.append(np.linalg.norm(errors, axis=1))
        return v

    logger.info(
        "Simulation started",
        extra={"scenario": config.name, "n_nodes": config.graph.n_nodes, "n_edges": config.graph.n_edges, "steps": n_steps, "dt": h},
    )
    omegas, errors = controller.control(n)
    v_prev = record(0.0, n, omegas, errors)
    tolerance = V_TOLERANCE * (1.0 + v_prev)
    valid, failure = True, None
    for k in range(1, n_steps + 1):
        n = closed_loop_step(controller, n, h, omegas)
        if not np.all(np.isfinite(n)):
            logger.error("Non-finite state", extra={"scenario": config.name, "step": k, "t": k * h})
            raise NonFiniteStateError(
                f"non-finite state at step {k} (t={k * h:.6g}); check the kernel near s=0 and s=2",
                {"step": k, "t": k * h},
            )
        omegas, errors = controller.control(n)
        if k % config.record_every and k != n_steps:
            continue
        v = record(k * h, n, omegas, errors)
        if v > v_prev + tolerance:
            valid = False
            failure = f"lyapunov increase at t={k * h:.6g}: V went from {v_prev:.17g} to {v:.17g}"
            logger.warning("Trace flagged", extra={"scenario": config.name, "t": k * h, "V_prev": v_prev, "V": v})
            break
        v_prev = v

    trace = SimulationTrace(
        times=np.asarray(times),
        states=np.asarray(states),
        V=np.asarray(values),
        Vdot=np.asarray(rates),
        omega_norms=np.asarray(omega_norms),
        edge_error_norms=np.asarray(error_norms).reshape(len(times), config.graph.n_edges),
        valid=valid,
        failure=failure,
    )
    logger.info(
        "Simulation finished",
        extra={"scenario": config.name, "samples": len(trace), "final_V": float(trace.V[-1]), "valid": valid},
    )
    return trace


# --- two-agent reduction ---


def two_agent_theta_rate(kernel: DistanceKernel, theta: float) -> float:
    """theta' = -2 f'(1 - cos theta) sin theta."""
    gain = kernel.prime(1.0 - math.cos(theta))
    if not math.isfinite(gain):
        raise KernelEvaluationError(f"f' is not finite at theta={theta}", {"theta": theta})
    return -2.0 * gain * math.sin(theta)


def two_agent_scalar(kernel: DistanceKernel, theta0: float, t_end: float, dt: float) -> ScalarTrajectory:
    """Classical RK4 on the geodesic angle between two connected agents."""
    if not 0.0 <= theta0 < math.pi:
        raise ValueError(f"theta0 must lie in [0, pi), got {theta0}")
    if not dt > 0 or not t_end > 0:
        raise ValueError("dt and t_end must be positive")
    n_steps = max(1, math.ceil(t_end / dt - 1e-9))
    h = t_end / n_steps
    thetas = np.empty(n_steps + 1)
    thetas[0] = theta = theta0
    rate = lambda th: two_agent_theta_rate(kernel, th)  # noqa: E731
    for k in range(1, n_steps + 1):
        k1 = rate(theta)
        k2 = rate(theta + 0.5 * h * k1)
        k3 = rate(theta + 0.5 * h * k2)
        k4 = rate(theta + h * k3)
        theta = theta + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        thetas[k] = theta
    return ScalarTrajectory(times=h * np.arange(n_steps + 1), thetas=thetas)


def arccot_closed_form(t: ArrayLike, theta0: float, c: float) -> NDArray[np.float64]:
    """Solution of theta' = -c sin^2 theta: theta(t) = arccot(c t + cot theta0)."""
    return np.arctan2(1.0, c * np.asarray(t, dtype=np.float64) + 1.0 / math.tan(theta0))


# --- diagnostics ---


def fit_exponential_rate(times: ArrayLike, values: ArrayLike, window: float = 0.5) -> RateFit:
    """
    Least-squares line through log(values) over the last `window` fraction of
    the samples that sit above LOG_FLOOR.  rate = -slope.
    """
    if not 0.0 < window <= 1.0:
        raise ValueError(f"window must lie in (0, 1], got {window}")
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    usable = np.flatnonzero(y > LOG_FLOOR)
    count = math.ceil(window * usable.size)
    if count < MIN_FIT_SAMPLES:
        raise InsufficientSamplesError(
            f"too few samples above {LOG_FLOOR:g} for a rate fit: {count} < {MIN_FIT_SAMPLES}",
            {"usable": int(usable.size), "window": window},
        )
    idx = usable[-count:]
    log_y = np.log(y[idx])
    slope, intercept = np.polyfit(t[idx], log_y, 1)
    residual = log_y - (slope * t[idx] + intercept)
    total = float(np.sum((log_y - log_y.mean()) ** 2))
    r_squared = 1.0 if total == 0.0 else 1.0 - float(np.sum(residual ** 2)) / total
    return RateFit(rate=-float(slope), r_squared=r_squared, n_samples=int(count))


def _agent_series(trace: Union[SimulationTrace, Trajectory]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    if isinstance(trace, Trajectory):
        return trace.times, trace.vectors[:, None, :]
    return trace.times, trace.states


def constant_limit_check(
    trace: Union[SimulationTrace, Trajectory],
    tail: float = 0.25,
    tol: float = 1e-4,
) -> list[LimitCheck]:
    """
    Per agent, the largest geodesic angle between n_i(t) and n_i(t_end) over the
    last `tail` fraction of the time span.
    """
    if not 0.0 < tail <= 1.0:
        raise ValueError(f"tail must lie in (0, 1], got {tail}")
    times, states = _agent_series(trace)
    start = times[-1] - tail * (times[-1] - times[0])
    window = states[times >= start - 1e-12 * max(1.0, abs(start))]
    if len(window) < 2:
        raise EmptyWindowError(
            f"tail window of fraction {tail} holds {len(window)} sample(s); need at least 2",
            {"tail": tail, "samples": len(window)},
        )
    drift = np.max(geodesic_angle(window, window[-1][None, :, :]), axis=0)
    return [LimitCheck(agent=i, constant_limit=bool(d < tol), tail_drift=float(d)) for i, d in enumerate(drift)]


def max_pairwise_angle(vectors: ArrayLike) -> float:
    arr = np.asarray(vectors, dtype=np.float64)
    if len(arr) < 2:
        return 0.0
    return float(np.max(geodesic_angle(arr[:, None, :], arr[None, :, :])))


def analyze_trace(
    trace: SimulationTrace,
    sync_tol: float = 1e-4,
    window: float = 0.5,
    tail: float = 0.25,
    limit_tol: float = 1e-4,
) -> ConvergenceReport:
    final = trace.states[-1]
    spread = max_pairwise_angle(final)
    synchronized = spread < sync_tol
    try:
        fit = fit_exponential_rate(trace.times, trace.stacked_error_norm, window)
        rate, r_squared = fit.rate, fit.r_squared
    except InsufficientSamplesError:
        rate = r_squared = None
    try:
        checks = constant_limit_check(trace, tail, limit_tol)
        drift = max(c.tail_drift for c in checks)
        constant = all(c.constant_limit for c in checks)
    except EmptyWindowError:
        drift, constant = math.inf, False
    limit = as_unit_vector(final.mean(axis=0)) if synchronized else None
    return ConvergenceReport(
        synchronized=synchronized,
        final_spread=spread,
        exp_rate=rate,
        r_squared=r_squared,
        constant_limit=constant,
        limit_vector=limit,
        tail_drift=drift,
    )


# --- initial states ---


def random_state(n_agents: int, seed: int) -> NetworkState:
    """Normalized standard normals from a Philox stream; bit-identical per (seed, n_agents)."""
    if n_agents < 1:
        raise ValueError(f"need at least one agent, got {n_agents}")
    rng = np.random.Generator(np.random.Philox(seed))
    return NetworkState.normalized(rng.standard_normal((n_agents, 3)))


def random_cap_state(n_agents: int, seed: int, half_angle: float = 0.7) -> NetworkState:
    """Uniform samples in the cap of half-angle `half_angle` around e3; pairwise angles stay below 2*half_angle."""
    if not 0.0 < half_angle < math.pi:
        raise ValueError(f"half_angle must lie in (0, pi), got {half_angle}")
    rng = np.random.Generator(np.random.Philox(seed))
    z = rng.uniform(math.cos(half_angle), 1.0, n_agents)
    phi = rng.uniform(0.0, 2.0 * math.pi, n_agents)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return NetworkState.normalized(np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1))


def great_circle_state(n_agents: int) -> NetworkState:
    """Agents equally spaced on the equator, in node order."""
    phi = 2.0 * math.pi * np.arange(n_agents) / n_agents
    return NetworkState.normalized(np.stack([np.cos(phi), np.sin(phi), np.zeros(n_agents)], axis=1))


def two_agent_state(theta0: float) -> NetworkState:
    return NetworkState.normalized([[1.0, 0.0, 0.0], [math.cos(theta0), math.sin(theta0), 0.0]])


# --- CSV export ---


def trace_csv_header(n_agents: int, n_edges: int) -> list[str]:
    header = ["t", "V", "Vdot"]
    header += [f"omega_norm_{i}" for i in range(1, n_agents + 1)]
    header += [f"edge_err_{k}" for k in range(1, n_edges + 1)]
    for i in range(1, n_agents + 1):
        header += [f"nx_{i}", f"ny_{i}", f"nz_{i}"]
    return header


def _fmt(x: float) -> str:
    return f"{x:.{CSV_DIGITS}g}"


def write_trace_csv(trace: SimulationTrace, out: Union[str, Path, TextIO]) -> None:
    if isinstance(out, (str, Path)):
        target = Path(out)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding="utf-8", newline="") as fh:
            write_trace_csv(trace, fh)
        return
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(trace_csv_header(trace.n_agents, trace.n_edges))
    for m in range(len(trace)):
        row = [trace.times[m], trace.V[m], trace.Vdot[m], *trace.omega_norms[m], *trace.edge_error_norms[m], *trace.states[m].ravel()]
        writer.writerow([_fmt(float(x)) for x in row])


def format_trace_csv(trace: SimulationTrace) -> str:
    buffer = io.StringIO()
    write_trace_csv(trace, buffer)
    return buffer.getvalue()


def read_trace_csv(source: Union[str, Path, TextIO]) -> SimulationTrace:
    if isinstance(source, (str, Path)):
        with Path(source).open("r", encoding="utf-8", newline="") as fh:
            return read_trace_csv(fh)
    reader = csv.reader(source)
    header = next(reader)
    n_agents = sum(1 for name in header if name.startswith("omega_norm_"))
    n_edges = sum(1 for name in header if name.startswith("edge_err_"))
    if header != trace_csv_header(n_agents, n_edges):
        raise ValueError("trace CSV header does not match the expected column layout")
    rows = np.asarray([[float(x) for x in row] for row in reader], dtype=np.float64).reshape(-1, len(header))
    col = 3
    omega = rows[:, col:col + n_agents]
    col += n_agents
    errors = rows[:, col:col + n_edges]
    col += n_edges
    return SimulationTrace(
        times=rows[:, 0],
        states=rows[:, col:].reshape(len(rows), n_agents, 3),
        V=rows[:, 1],
        Vdot=rows[:, 2],
        omega_norms=omega,
        edge_error_norms=errors,
    )
