"""
Kinematic synchronization law.

For edge k = (i, j) the tail is n_i and the head n_j.  Each agent turns with
omega_i = sum_k B[i, k] e_k, expressed in the inertial frame, so that
V = sum_k f_k(s_k) decreases at the rate -sum_i |omega_i|^2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from scripts.common.errors import NetworkSizeMismatchError

from .distance_kernels import DistanceKernel, EdgeError
from .graph_topology import NetworkGraph, incidence
from .sphere_core import NORM_TOLERANCE, as_unit_vector, chordal_param, cross_rows

KernelSpec = Union[DistanceKernel, Sequence[DistanceKernel]]


@dataclass(frozen=True)
class NetworkState:
    vectors: NDArray[np.float64]
    time: float = 0.0

    def __post_init__(self) -> None:
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
            raise ValueError(f"state must be an (N, 3) stack, got shape {arr.shape}")
        drift = np.abs(np.linalg.norm(arr, axis=1) - 1.0)
        if not np.all(drift <= NORM_TOLERANCE):
            raise ValueError(f"state vectors are not unit norm (max drift {float(np.max(drift)):.3e})")
        object.__setattr__(self, "vectors", arr)

    @classmethod
    def normalized(cls, vectors: ArrayLike, time: float = 0.0) -> "NetworkState":
        return cls(vectors=as_unit_vector(np.atleast_2d(vectors)), time=time)

    @property
    def n_agents(self) -> int:
        return int(self.vectors.shape[0])


@dataclass(frozen=True)
class ControlOutput:
    omegas: NDArray[np.float64]
    edge_errors: tuple[EdgeError, ...]

    @property
    def error_matrix(self) -> NDArray[np.float64]:
        if not self.edge_errors:
            return np.zeros((0, 3))
        return np.stack([e.vector for e in self.edge_errors])


class KinematicController:
    """Vectorized closed-loop evaluation for one graph and its per-edge kernels."""

    def __init__(self, graph: NetworkGraph, kernels: KernelSpec):
        self.graph = graph
        self.kernels = per_edge_kernels(kernels, graph.n_edges)
        self._tails = graph.tails
        self._heads = graph.heads
        self._incidence = incidence(graph).astype(np.float64)
        # edges sharing a kernel object are evaluated in one call
        groups: dict[int, tuple[DistanceKernel, list[int]]] = {}
        for k, kernel in enumerate(self.kernels):
            groups.setdefault(id(kernel), (kernel, []))[1].append(k)
        self._groups = [(kernel, np.asarray(idx, dtype=np.intp)) for kernel, idx in groups.values()]

    def _check(self, vectors: ArrayLike) -> NDArray[np.float64]:
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.shape != (self.graph.n_nodes, 3):
            raise NetworkSizeMismatchError(
                f"state has shape {arr.shape}, graph expects ({self.graph.n_nodes}, 3)",
                {"n_nodes": self.graph.n_nodes, "shape": list(arr.shape)},
            )
        return arr

    def chordal_params(self, vectors: ArrayLike) -> NDArray[np.float64]:
        arr = self._check(vectors)
        return np.atleast_1d(chordal_param(arr[self._tails], arr[self._heads]))

    def edge_errors(self, vectors: ArrayLike) -> NDArray[np.float64]:
        arr = self._check(vectors)
        tails, heads = arr[self._tails], arr[self._heads]
        s = np.atleast_1d(chordal_param(tails, heads))
        gains = np.empty(self.graph.n_edges)
        for kernel, idx in self._groups:
            gains[idx] = kernel.prime(s[idx])
        return gains[:, None] * cross_rows(tails, heads)

    def omegas(self, errors: NDArray[np.float64]) -> NDArray[np.float64]:
        """B applied blockwise to the (M, 3) error stack."""
        return self._incidence @ errors

    def control(self, vectors: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        errors = self.edge_errors(vectors)
        return self.omegas(errors), errors

    def lyapunov_value(self, vectors: ArrayLike) -> float:
        s = self.chordal_params(vectors)
        return float(sum(np.sum(kernel.value(s[idx])) for kernel, idx in self._groups))


def per_edge_kernels(kernels: KernelSpec, n_edges: int) -> tuple[DistanceKernel, ...]:
    if isinstance(kernels, DistanceKernel):
        return (kernels,) * n_edges
    assigned = tuple(kernels)
    if len(assigned) != n_edges:
        raise NetworkSizeMismatchError(
            f"got {len(assigned)} kernels for {n_edges} edges", {"kernels": len(assigned), "edges": n_edges}
        )
    return assigned


def compute_edge_errors(state: NetworkState, graph: NetworkGraph, kernels: KernelSpec) -> list[EdgeError]:
    errors = KinematicController(graph, kernels).edge_errors(state.vectors)
    return [EdgeError(k=k, vector=vec) for k, vec in enumerate(errors)]


def kinematic_control(state: NetworkState, graph: NetworkGraph, kernels: KernelSpec) -> ControlOutput:
    omegas, errors = KinematicController(graph, kernels).control(state.vectors)
    return ControlOutput(
        omegas=omegas,
        edge_errors=tuple(EdgeError(k=k, vector=vec) for k, vec in enumerate(errors)),
    )


def lyapunov_value(state: NetworkState, graph: NetworkGraph, kernels: KernelSpec) -> float:
    return KinematicController(graph, kernels).lyapunov_value(state.vectors)


def lyapunov_rate(control: ControlOutput, graph: NetworkGraph) -> float:
    """dV/dt = -|(B x I) e|^2, i.e. minus the summed squared agent rates."""
    omegas = np.asarray(control.omegas, dtype=np.float64)
    if omegas.shape != (graph.n_nodes, 3) or len(control.edge_errors) != graph.n_edges:
        raise NetworkSizeMismatchError(
            f"control output ({omegas.shape[0]} agents, {len(control.edge_errors)} edges) "
            f"does not match graph ({graph.n_nodes} nodes, {graph.n_edges} edges)"
        )
    return -float(np.einsum("ij,ij->", omegas, omegas))
