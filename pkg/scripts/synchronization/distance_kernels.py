"""
Distance functions d(n1, n2) = f(1 - n1.n2) on the sphere.

A DistanceKernel bundles f and its derivative f' (both vectorized over numpy
arrays).  f' is the gain of the edge error e = f'(s) * (n_t x n_h), so the
kernel alone fixes the distance, the Lyapunov contribution and the control
of an edge.  Diagnostics here are numerical: endpoint limits, class
inference, derivative consistency, the sandwich constants and the residual
of the rotation-invariance PDE S(n1) d_eta/dn1 + S(n2) d_eta/dn2 = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from scripts.common.errors import (
    DegenerateKernelError,
    KernelEvaluationError,
    KernelParameterError,
    UnknownKernelError,
)

from .sphere_core import as_unit_vector, chordal_param

ScalarFn = Callable[[Any], Any]

ENDPOINT_GUARD = 1e-6
LIMIT_LADDER = tuple(10.0 ** -k for k in range(3, 9))
DIVERGENCE_THRESHOLD = 1e6


class KernelClass(str, Enum):
    P = "P"
    P0 = "P0"
    P_INF = "P_inf"
    P_BAR0 = "P_bar0"
    CUSTOM = "custom"


@dataclass(frozen=True)
class DistanceKernel:
    f: ScalarFn
    f_prime: ScalarFn
    declared_class: KernelClass = KernelClass.CUSTOM
    name: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)

    def prime(self, s: ArrayLike) -> Any:
        """f'(s) with s kept below 2 - ENDPOINT_GUARD and lifted to the guard when f'(s) is not finite."""
        s_arr = np.clip(np.asarray(s, dtype=np.float64), 0.0, 2.0 - ENDPOINT_GUARD)
        with np.errstate(divide="ignore", invalid="ignore"):
            value = np.asarray(self.f_prime(s_arr), dtype=np.float64)
        if not np.all(np.isfinite(value)):
            lifted = np.clip(s_arr, ENDPOINT_GUARD, 2.0 - ENDPOINT_GUARD)
            value = np.where(np.isfinite(value), value, np.asarray(self.f_prime(lifted), dtype=np.float64))
        return float(value) if value.ndim == 0 else value

    def value(self, s: ArrayLike) -> Any:
        s_arr = np.clip(np.asarray(s, dtype=np.float64), 0.0, 2.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            value = np.asarray(self.f(s_arr), dtype=np.float64)
        return float(value) if value.ndim == 0 else value

    def describe(self) -> str:
        if not self.params:
            return self.name
        args = ", ".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.name}({args})"


@dataclass(frozen=True)
class EdgeError:
    k: int
    vector: NDArray[np.float64]


# --- built-in kernels ---


def linear_cos(a: float = 1.0) -> DistanceKernel:
    if not a > 0:
        raise KernelParameterError(f"linear_cos gain must be positive, got {a}", {"param": "a", "value": a})
    return DistanceKernel(
        f=lambda s: a * np.asarray(s),
        f_prime=lambda s: np.full_like(np.asarray(s, dtype=np.float64), a),
        declared_class=KernelClass.P_BAR0,
        name="linear_cos",
        params={"a": a},
    )


def arccos_sqrt() -> DistanceKernel:
    def f(s):
        s = np.asarray(s, dtype=np.float64)
        root = np.sqrt(np.clip(s * (2.0 - s), 0.0, None))
        return (root * (s - 1.0) + np.arccos(np.clip(1.0 - s, -1.0, 1.0))) / 8.0

    def f_prime(s):
        s = np.asarray(s, dtype=np.float64)
        return 0.25 * np.sqrt(np.clip(s * (2.0 - s), 0.0, None))

    return DistanceKernel(f=f, f_prime=f_prime, declared_class=KernelClass.P0, name="arccos_sqrt")


def quadratic() -> DistanceKernel:
    return DistanceKernel(
        f=lambda s: np.asarray(s) ** 2,
        f_prime=lambda s: 2.0 * np.asarray(s),
        declared_class=KernelClass.P_BAR0,
        name="quadratic",
    )


def power(a: float = 1.0, alpha: float = 1.0) -> DistanceKernel:
    if not a > 0:
        raise KernelParameterError(f"power gain must be positive, got {a}", {"param": "a", "value": a})
    if not alpha >= 1.0:
        raise KernelParameterError(f"power exponent must be >= 1, got {alpha}", {"param": "alpha", "value": alpha})
    return DistanceKernel(
        f=lambda s: a * np.asarray(s, dtype=np.float64) ** alpha,
        f_prime=lambda s: a * alpha * np.asarray(s, dtype=np.float64) ** (alpha - 1.0),
        declared_class=KernelClass.P_BAR0,
        name="power",
        params={"a": a, "alpha": alpha},
    )


def log_barrier() -> DistanceKernel:
    return DistanceKernel(
        f=lambda s: -np.log1p(-np.asarray(s, dtype=np.float64) / 2.0),
        f_prime=lambda s: 1.0 / (2.0 - np.asarray(s, dtype=np.float64)),
        declared_class=KernelClass.P_INF,
        name="log_barrier",
    )


BUILTIN_KERNELS: Dict[str, Callable[..., DistanceKernel]] = {
    "linear_cos": linear_cos,
    "arccos_sqrt": arccos_sqrt,
    "quadratic": quadratic,
    "power": power,
    "log_barrier": log_barrier,
}


def builtin_kernel(name: str, **params: float) -> DistanceKernel:
    try:
        factory = BUILTIN_KERNELS[name]
    except KeyError:
        known = ", ".join(sorted(BUILTIN_KERNELS))
        raise UnknownKernelError(f"unknown kernel '{name}' (known: {known})", {"name": name}) from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise UnknownKernelError(f"kernel '{name}' rejected parameters {sorted(params)}: {exc}", {"name": name}) from None
    except KernelParameterError as exc:
        exc.details.setdefault("name", name)
        raise
    except ValueError as exc:
        raise KernelParameterError(f"kernel '{name}' rejected parameters {sorted(params)}: {exc}", {"name": name}) from None


# --- per-pair evaluation ---


def distance(kernel: DistanceKernel, n1: ArrayLike, n2: ArrayLike) -> float:
    return kernel.value(chordal_param(n1, n2))


def edge_error_vector(kernel: DistanceKernel, n_tail: ArrayLike, n_head: ArrayLike) -> NDArray[np.float64]:
    """f'(s) * (n_tail x n_head); accepts stacked pairs."""
    s = chordal_param(n_tail, n_head)
    gain = np.asarray(kernel.prime(s))
    return gain[..., None] * np.cross(n_tail, n_head)


def edge_error(kernel: DistanceKernel, n_tail: ArrayLike, n_head: ArrayLike, k: int = 0) -> EdgeError:
    return EdgeError(k=k, vector=edge_error_vector(kernel, as_unit_vector(n_tail), as_unit_vector(n_head)))


def two_agent_rate_constant(kernel: DistanceKernel, h: float = 1e-5) -> float:
    """
    Finite-difference oracle for c in theta' = -c |sin theta| sin theta.

    At s = 1 (theta = pi/2) the reduction theta' = -2 f'(s) sin theta gives
    c = 2 f'(1), with f'(1) taken from central differences of f itself.
    """
    return 2.0 * (kernel.value(1.0 + h) - kernel.value(1.0 - h)) / (2.0 * h)


# --- rotation-invariance PDE ---

GradientFn = Callable[[NDArray[np.float64], NDArray[np.float64]], Tuple[NDArray[np.float64], NDArray[np.float64]]]


def pde_residual_from_gradients(gradients: GradientFn, n1: ArrayLike, n2: ArrayLike) -> NDArray[np.float64]:
    a = np.asarray(n1, dtype=np.float64)
    b = np.asarray(n2, dtype=np.float64)
    grad1, grad2 = gradients(a, b)
    return np.cross(a, grad1) + np.cross(b, grad2)


def kernel_gradients(kernel: DistanceKernel) -> GradientFn:
    def gradients(n1, n2):
        gain = np.asarray(kernel.prime(chordal_param(n1, n2)))[..., None]
        return -gain * n2, -gain * n1

    return gradients


def bilinear_gradients(matrix: ArrayLike) -> GradientFn:
    """Gradients of eta(n1, n2) = n1^T D n2."""
    d = np.asarray(matrix, dtype=np.float64)
    return lambda n1, n2: (n2 @ d.T, n1 @ d)


def pde_residual(kernel: DistanceKernel, n1: ArrayLike, n2: ArrayLike) -> NDArray[np.float64]:
    return pde_residual_from_gradients(kernel_gradients(kernel), n1, n2)


def max_pde_residual(kernel: DistanceKernel, samples: int = 10_000, seed: int = 0) -> float:
    rng = np.random.Generator(np.random.Philox(seed))
    n1 = as_unit_vector(rng.standard_normal((samples, 3)))
    n2 = as_unit_vector(rng.standard_normal((samples, 3)))
    s = chordal_param(n1, n2)
    inside = (s > ENDPOINT_GUARD) & (s < 2.0 - ENDPOINT_GUARD)
    residual = pde_residual(kernel, n1[inside], n2[inside])
    return float(np.max(np.linalg.norm(residual, axis=-1)))


# --- endpoint limits and classes ---


@dataclass(frozen=True)
class ClassLimits:
    lim0: float
    lim2: float
    lim0_diverges: bool
    lim2_diverges: bool

    @property
    def lim0_vanishes(self) -> bool:
        return not self.lim0_diverges and abs(self.lim0) < 1e-3


def _ladder_limit(samples: NDArray[np.float64], offsets: NDArray[np.float64]) -> tuple[float, bool]:
    magnitudes = np.abs(samples)
    growing = bool(np.all(np.diff(magnitudes) > 0))
    if growing and magnitudes[-1] > DIVERGENCE_THRESHOLD:
        return math.inf, True
    if np.all(magnitudes < 1e-300):
        return 0.0, False
    # log-log slope over the ladder: negative means power-law blow-up, positive means decay
    positive = magnitudes > 1e-300
    slope = np.polyfit(np.log10(offsets[positive]), np.log10(magnitudes[positive]), 1)[0]
    if growing and slope < -0.05:
        return math.inf, True
    if slope > 0.05:
        return 0.0, False
    return float(samples[-1]), False


def class_limits(kernel: DistanceKernel) -> ClassLimits:
    """
    Estimate lim f'(s) sqrt(s) as s -> 0+ and lim f'(s) sqrt(2 - s) as s -> 2-
    on the ladder s in {1e-3, ..., 1e-8} and its mirror near 2.
    """
    offsets = np.asarray(LIMIT_LADDER)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        near0 = np.asarray(kernel.f_prime(offsets), dtype=np.float64) * np.sqrt(offsets)
        near2 = np.asarray(kernel.f_prime(2.0 - offsets), dtype=np.float64) * np.sqrt(offsets)
    if not (np.all(np.isfinite(near0)) and np.all(np.isfinite(near2))):
        raise KernelEvaluationError(
            f"kernel '{kernel.name}' is non-finite on the endpoint ladder",
            {"near0": near0.tolist(), "near2": near2.tolist()},
        )
    lim0, div0 = _ladder_limit(near0, offsets)
    lim2, div2 = _ladder_limit(near2, offsets)
    return ClassLimits(lim0=lim0, lim2=lim2, lim0_diverges=div0, lim2_diverges=div2)


def infer_classes(kernel: DistanceKernel, grid_points: int = 2000) -> frozenset[KernelClass]:
    """
    Numerical class diagnosis.

    P: f >= 0 and nondecreasing on the interior grid.  P_inf: f grows without
    bound towards s = 2.  P0: f'(s) -> 0 as s -> 2.  P_bar0: f' stays away from
    zero at s = 2 (always the case for P_inf).
    """
    grid = np.linspace(ENDPOINT_GUARD, 2.0 - ENDPOINT_GUARD, grid_points)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        values = np.asarray(kernel.f(grid), dtype=np.float64)
        tail_f = np.asarray(kernel.f(2.0 - np.asarray(LIMIT_LADDER)), dtype=np.float64)
        tail_prime = np.asarray(kernel.f_prime(2.0 - np.asarray(LIMIT_LADDER)), dtype=np.float64)
    classes: set[KernelClass] = set()
    if np.all(values >= 0) and np.all(np.diff(values) >= -1e-12):
        classes.add(KernelClass.P)
    unbounded = bool(np.all(np.diff(tail_f) > 0) and tail_f[-1] - tail_f[0] > 1.0)
    if unbounded or not np.isfinite(tail_f[-1]):
        classes.update({KernelClass.P_INF, KernelClass.P_BAR0})
    elif abs(tail_prime[-1]) < 1e-3:
        classes.add(KernelClass.P0)
    else:
        classes.add(KernelClass.P_BAR0)
    return frozenset(classes)


def derivative_consistency(kernel: DistanceKernel, points: int = 1000, h: float = 1e-6) -> float:
    """Max relative error of f' against central differences of f on [0.01, 1.99]."""
    grid = np.linspace(0.01, 1.99, points)
    fd = (np.asarray(kernel.f(grid + h)) - np.asarray(kernel.f(grid - h))) / (2.0 * h)
    analytic = np.asarray(kernel.f_prime(grid), dtype=np.float64)
    scale = np.maximum(np.abs(analytic), 1e-3)
    return float(np.max(np.abs(fd - analytic) / scale))


def check_kernel_invariants(kernel: DistanceKernel, tolerance: float = 1e-6) -> list[str]:
    """Violated invariants, empty when the kernel is well formed."""
    problems = []
    grid = np.linspace(ENDPOINT_GUARD, 2.0 - ENDPOINT_GUARD, 1000)
    values = np.asarray(kernel.f(grid), dtype=np.float64)
    primes = np.asarray(kernel.f_prime(grid), dtype=np.float64)
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(primes))):
        problems.append("non-finite f or f' on (eps, 2-eps)")
    elif np.any(values < 0) or np.any(primes < 0):
        problems.append("f or f' negative on (eps, 2-eps)")
    error = derivative_consistency(kernel)
    if not error < tolerance:
        problems.append(f"f' disagrees with central differences (relative error {error:.3e})")
    return problems


# --- sandwich condition ---


@dataclass(frozen=True)
class SandwichReport:
    alpha_lower: float
    alpha_upper: float
    holds: bool


def verify_sandwich(kernel: DistanceKernel, theta_max: float, samples: int = 100_000) -> SandwichReport:
    """Empirical min/max of d / |e|^2 over geodesic angles uniformly sampled in (0, theta_max]."""
    if not 0.0 < theta_max < math.pi:
        raise ValueError(f"theta_max must lie in (0, pi), got {theta_max}")
    thetas = theta_max * np.arange(1, samples + 1) / samples
    tail = np.array([1.0, 0.0, 0.0])
    heads = np.stack([np.cos(thetas), np.sin(thetas), np.zeros_like(thetas)], axis=-1)
    e = edge_error_vector(kernel, tail, heads)
    e_sq = np.einsum("ij,ij->i", e, e)
    if np.any(e_sq == 0.0):
        bad = float(thetas[np.argmax(e_sq == 0.0)])
        raise DegenerateKernelError(
            f"edge error vanishes at interior angle {bad:.6g}; kernel '{kernel.name}' is degenerate on the interval",
            {"theta": bad},
        )
    ratio = np.asarray(kernel.value(chordal_param(tail, heads))) / e_sq
    lower, upper = float(np.min(ratio)), float(np.max(ratio))
    holds = bool(np.isfinite(lower) and np.isfinite(upper) and lower > 0 and upper > 0)
    return SandwichReport(alpha_lower=lower, alpha_upper=upper, holds=holds)


# --- saturation functions sigma(x) = sigma(|x|) x ---


@dataclass(frozen=True)
class SaturationFunction:
    sigma_scalar: ScalarFn
    sigma_max: float
    sigma_prime_max: float
    name: str = "custom"


def saturation_apply(s: SaturationFunction, x: ArrayLike) -> NDArray[np.float64]:
    vec = np.asarray(x, dtype=np.float64)
    r = float(np.linalg.norm(vec))
    if r == 0.0:
        return np.zeros(3)
    return float(s.sigma_scalar(r)) * vec


def rational_saturation() -> SaturationFunction:
    return SaturationFunction(
        sigma_scalar=lambda r: 1.0 / math.sqrt(1.0 + r * r),
        sigma_max=1.0,
        sigma_prime_max=1.0,
        name="rational",
    )


def tanh_saturation() -> SaturationFunction:
    return SaturationFunction(
        sigma_scalar=lambda r: math.tanh(r) / r if r > 1e-8 else 1.0 - r * r / 3.0,
        sigma_max=1.0,
        sigma_prime_max=1.0,
        name="tanh",
    )


def identity_saturation() -> SaturationFunction:
    return SaturationFunction(sigma_scalar=lambda r: 1.0, sigma_max=math.inf, sigma_prime_max=1.0, name="identity")


def check_saturation(
    s: SaturationFunction,
    radii: Tuple[float, ...] = (1e-3, 1.0, 1e3, 1e6),
    samples: int = 200,
    seed: int = 0,
    h: float = 1e-6,
) -> Optional[str]:
    """First violated saturation invariant, or None."""
    rng = np.random.Generator(np.random.Philox(seed))
    for r in radii:
        direction = as_unit_vector(rng.standard_normal(3))
        if np.linalg.norm(saturation_apply(s, r * direction)) > s.sigma_max:
            return f"|sigma(x)| exceeds sigma_max at |x|={r:g}"
    points = rng.standard_normal((samples, 3)) * rng.uniform(0.0, 5.0, (samples, 1))
    for x in points:
        jac = np.empty((3, 3))
        for j in range(3):
            step = np.zeros(3)
            step[j] = h
            jac[:, j] = (saturation_apply(s, x + step) - saturation_apply(s, x - step)) / (2.0 * h)
        if np.linalg.norm(jac, 2) > s.sigma_prime_max * (1.0 + 1e-6) + 1e-6:
            return f"Jacobian norm exceeds sigma_prime_max near x={x.tolist()}"
    return None
