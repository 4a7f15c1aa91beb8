"""
Geometry and kinematics of unit vectors on the sphere.

Vectors are plain float64 numpy arrays of shape (3,) or stacks of shape (..., 3).
Propagation uses the Rodrigues closed form of exp(S(w h)) so every step stays on
the sphere up to rounding, followed by a renormalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

UnitVector3 = NDArray[np.float64]
AngularVelocity = NDArray[np.float64]

SMALL_ANGLE = 1e-12
NORM_TOLERANCE = 1e-12


def as_unit_vector(v: ArrayLike) -> UnitVector3:
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape[-1:] != (3,):
        raise ValueError(f"expected 3-vector(s), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("unit vector has non-finite components")
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize the zero vector")
    return arr / norms


def as_angular_velocity(w: ArrayLike) -> AngularVelocity:
    arr = np.asarray(w, dtype=np.float64)
    if arr.shape[-1:] != (3,):
        raise ValueError(f"expected 3-vector(s), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("angular velocity has non-finite components")
    return arr


def skew(v: ArrayLike) -> NDArray[np.float64]:
    """Antisymmetric matrix S(v) with S(v) @ u == cross(v, u)."""
    x, y, z = (float(c) for c in np.asarray(v, dtype=np.float64))
    return np.array(
        [
            [0.0, -z, y],
            [z, 0.0, -x],
            [-y, x, 0.0],
        ]
    )


def cross_rows(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    """a x b over the last axis of (..., 3) float arrays, without np.cross's axis bookkeeping."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack((a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0), axis=-1)


def chordal_param(n1: ArrayLike, n2: ArrayLike) -> float | NDArray[np.float64]:
    """s = 1 - n1.n2 in [0, 2], evaluated as |n1 - n2|^2 / 2."""
    diff = np.asarray(n1, dtype=np.float64) - np.asarray(n2, dtype=np.float64)
    s = np.clip(0.5 * np.einsum("...i,...i->...", diff, diff), 0.0, 2.0)
    return float(s) if np.ndim(s) == 0 else s


def geodesic_angle(n1: ArrayLike, n2: ArrayLike) -> float | NDArray[np.float64]:
    """Great-circle angle in [0, pi]; equals arccos(clamp(n1.n2, -1, 1))."""
    a = np.asarray(n1, dtype=np.float64)
    b = np.asarray(n2, dtype=np.float64)
    sin_part = np.linalg.norm(np.cross(a, b), axis=-1)
    cos_part = np.einsum("...i,...i->...", a, b)
    theta = np.arctan2(sin_part, cos_part)
    return float(theta) if np.ndim(theta) == 0 else theta


def _rodrigues_coefficients(theta: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    # sin(t)/t and (1-cos(t))/t^2, Taylor-expanded below SMALL_ANGLE
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    return a, b


def rotate_vectors(vectors: ArrayLike, omegas: ArrayLike, h: float) -> NDArray[np.float64]:
    """Row-wise exp(S(w_i h)) n_i for stacks of shape (N, 3), renormalized."""
    n = np.asarray(vectors, dtype=np.float64)
    phi = np.asarray(omegas, dtype=np.float64) * h
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _rodrigues_coefficients(theta)
    # phi x (phi x n) = phi (phi.n) - n |phi|^2
    phi_dot_n = np.asarray(np.einsum("...i,...i->...", phi, n))
    double = phi * phi_dot_n[..., None] - n * np.asarray(theta * theta)[..., None]
    rotated = n + a[..., None] * cross_rows(phi, n) + b[..., None] * double
    return rotated / np.linalg.norm(rotated, axis=-1, keepdims=True)


def rotate_step(n: ArrayLike, w: ArrayLike, h: float) -> UnitVector3:
    if not h > 0:
        raise ValueError(f"timestep must be positive, got {h}")
    return rotate_vectors(np.asarray(n, dtype=np.float64), as_angular_velocity(w), h)


@dataclass(frozen=True)
class Trajectory:
    """Recorded samples of a single driven unit vector."""

    times: NDArray[np.float64]
    vectors: NDArray[np.float64]

    def sample_at(self, t: float, atol: float = 1e-9) -> UnitVector3:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > atol * max(1.0, abs(t)):
            raise KeyError(f"time {t} was not recorded")
        return self.vectors[idx]

    def __len__(self) -> int:
        return len(self.times)


def _time_grid(t0: float, t1: float, h: float, checkpoints: Iterable[float]) -> NDArray[np.float64]:
    marks = sorted({t0, t1, *(float(c) for c in checkpoints if t0 < c < t1)})
    pieces = []
    for start, stop in zip(marks[:-1], marks[1:]):
        steps = max(1, math.ceil((stop - start) / h - 1e-9))
        pieces.append(np.linspace(start, stop, steps + 1)[:-1])
    pieces.append(np.array([t1]))
    return np.concatenate(pieces)


def drive_with_omega(
    n0: ArrayLike,
    omega_fn: Callable[[float], ArrayLike],
    t0: float,
    t1: float,
    h: float,
    checkpoints: Sequence[float] = (),
    record_every: int = 1,
) -> Trajectory:
    """
    March n' = S(w(t)) n from t0 to t1 with w sampled at step midpoints.

    Checkpoint times are hit exactly and always recorded, as are t0 and t1.
    """
    if not h > 0:
        raise ValueError(f"timestep must be positive, got {h}")
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got t0={t0}, t1={t1}")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")

    grid = _time_grid(t0, t1, h, checkpoints)
    keep = {float(c) for c in checkpoints}
    n = as_unit_vector(n0)
    times = [grid[0]]
    samples = [n]
    last = len(grid) - 1
    for k in range(last):
        ta, tb = grid[k], grid[k + 1]
        w = np.asarray(omega_fn(0.5 * (ta + tb)), dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise ValueError(f"non-finite angular velocity sampled at t={0.5 * (ta + tb)}")
        n = rotate_vectors(n, w, tb - ta)
        if (k + 1) % record_every == 0 or k + 1 == last or float(tb) in keep:
            times.append(tb)
            samples.append(n)
    return Trajectory(times=np.asarray(times), vectors=np.asarray(samples))


def constant_omega(w: ArrayLike) -> Callable[[float], AngularVelocity]:
    vec = as_angular_velocity(w)
    return lambda _t: vec


def log_time_omega(axis: ArrayLike = (0.0, 0.0, 1.0)) -> Callable[[float], AngularVelocity]:
    """w(t) = axis / t; drives n(t) = [cos ln t, sin ln t, 0] from [1, 0, 0] at t = 1."""
    direction = as_angular_velocity(axis)
    return lambda t: direction / t
