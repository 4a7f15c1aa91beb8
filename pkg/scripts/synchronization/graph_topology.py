"""
Undirected communication graphs and their oriented incidence matrices.

Node labels are 1-based (as in edge-list files); edge indices, permutations and
matrix rows/columns are 0-based numpy indices.  Column k of B carries +1 at the
smaller endpoint of edge k and -1 at the larger one.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import networkx as nx
import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import eigvalsh, null_space

from scripts.common.errors import GraphFormatError, GraphValidationError
from scripts.common.logger import logger

NULL_SPACE_RCOND = 1e-10

Edge = tuple[int, int]


@dataclass(frozen=True)
class NetworkGraph:
    n_nodes: int
    edges: tuple[Edge, ...]

    def __post_init__(self) -> None:
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        object.__setattr__(self, "edges", edges)
        if self.n_nodes < 1:
            raise GraphValidationError("size", f"need at least one node, got {self.n_nodes}")
        seen: set[Edge] = set()
        for k, (i, j) in enumerate(edges):
            if i == j:
                raise GraphValidationError("no-self-loops", f"edge {k + 1} ({i},{j}) is a self-loop", {"edge": k + 1})
            if not 1 <= i <= self.n_nodes or not 1 <= j <= self.n_nodes:
                raise GraphValidationError(
                    "range", f"edge {k + 1} ({i},{j}) leaves 1..{self.n_nodes}", {"edge": k + 1}
                )
            if i > j:
                raise GraphValidationError("ordered", f"edge {k + 1} ({i},{j}) must be written with i<j", {"edge": k + 1})
            if (i, j) in seen:
                raise GraphValidationError("no-duplicates", f"duplicate edge ({i},{j})", {"edge": k + 1})
            seen.add((i, j))
        if not nx.is_connected(self.to_networkx()):
            raise GraphValidationError(
                "connected",
                f"graph with {self.n_nodes} nodes and {len(edges)} edges is not connected",
                {"components": nx.number_connected_components(self.to_networkx())},
            )

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def kappa(self) -> dict[int, Edge]:
        """1-based edge label k -> node pair (i, j), the numbering of `[kernel:K]` and error details."""
        return dict(enumerate(self.edges, start=1))

    def edge_index(self, i: int, j: int) -> int:
        """0-based column of edge {i, j} in the incidence matrix; its label is one more."""
        pair = (min(i, j), max(i, j))
        try:
            return self.edges.index(pair)
        except ValueError:
            raise KeyError(f"no edge between {i} and {j}") from None

    @property
    def tails(self) -> NDArray[np.intp]:
        return np.array([i - 1 for i, _ in self.edges], dtype=np.intp)

    @property
    def heads(self) -> NDArray[np.intp]:
        return np.array([j - 1 for _, j in self.edges], dtype=np.intp)

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(1, self.n_nodes + 1))
        g.add_edges_from(self.edges)
        return g


# --- incidence matrices and equivalences ---


def incidence(graph: NetworkGraph) -> NDArray[np.int64]:
    b = np.zeros((graph.n_nodes, graph.n_edges), dtype=np.int64)
    cols = np.arange(graph.n_edges)
    b[graph.tails, cols] = 1
    b[graph.heads, cols] = -1
    return b


def _check_incidence(b: ArrayLike) -> NDArray[np.int64]:
    arr = np.asarray(b)
    if arr.ndim != 2:
        raise GraphFormatError(f"incidence matrix must be 2-D, got shape {arr.shape}")
    ints = arr.astype(np.int64)
    if not np.array_equal(ints, arr):
        raise GraphFormatError("incidence matrix entries must be integers")
    plus = (ints == 1).sum(axis=0)
    minus = (ints == -1).sum(axis=0)
    zeros = (ints == 0).sum(axis=0)
    bad = np.flatnonzero((plus != 1) | (minus != 1) | (zeros != ints.shape[0] - 2))
    if bad.size:
        raise GraphFormatError(
            f"column {int(bad[0]) + 1} needs exactly one +1 and one -1", {"column": int(bad[0]) + 1}
        )
    return ints


def _check_permutation(perm: Sequence[int], size: int) -> NDArray[np.intp]:
    arr = np.asarray(perm, dtype=np.intp)
    if arr.shape != (size,) or not np.array_equal(np.sort(arr), np.arange(size)):
        raise ValueError(f"expected a permutation of 0..{size - 1}, got {list(perm)}")
    return arr


def transposition(size: int, a: int, b: int) -> NDArray[np.intp]:
    perm = np.arange(size, dtype=np.intp)
    perm[[a, b]] = perm[[b, a]]
    return perm


def inverse_permutation(perm: Sequence[int]) -> NDArray[np.intp]:
    arr = _check_permutation(perm, len(perm))
    inverse = np.empty_like(arr)
    inverse[arr] = np.arange(arr.size, dtype=np.intp)
    return inverse


def permute_nodes(b: ArrayLike, perm: Sequence[int]) -> NDArray[np.int64]:
    """
    Relabel node r as perm[r] and re-orient columns so +1 stays on the smaller row.
    """
    src = _check_incidence(b)
    p = _check_permutation(perm, src.shape[0])
    out = np.empty_like(src)
    out[p] = src
    plus_row = np.argmax(out == 1, axis=0)
    minus_row = np.argmax(out == -1, axis=0)
    out[:, plus_row > minus_row] *= -1
    return out


def permute_edges(b: ArrayLike, perm: Sequence[int]) -> NDArray[np.int64]:
    """Move column k to position perm[k]."""
    src = _check_incidence(b)
    p = _check_permutation(perm, src.shape[1])
    out = np.empty_like(src)
    out[:, p] = src
    return out


def graph_from_incidence(b: ArrayLike) -> NetworkGraph:
    ints = _check_incidence(b)
    rows_plus = np.argmax(ints == 1, axis=0)
    rows_minus = np.argmax(ints == -1, axis=0)
    edges = tuple(
        (int(min(p, m)) + 1, int(max(p, m)) + 1) for p, m in zip(rows_plus, rows_minus)
    )
    return NetworkGraph(n_nodes=ints.shape[0], edges=edges)


# --- spectra and cycles ---


def is_tree(graph: NetworkGraph) -> bool:
    return graph.n_edges == graph.n_nodes - 1


def lambda_min_BtB(b: ArrayLike) -> float:
    arr = np.asarray(b, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError("lambda_min needs an incidence matrix with at least one edge")
    return float(eigvalsh(arr.T @ arr, subset_by_index=[0, 0])[0])


class CycleClass(str, Enum):
    TREE = "tree"
    INDEPENDENT = "independent_cycles"
    SHARED_EDGE_PAIRS = "shared_edge_pairs"
    GENERAL = "general"


@dataclass(frozen=True)
class CycleBasisReport:
    cycles: tuple[frozenset[int], ...]
    classification: CycleClass
    null_space_basis: NDArray[np.float64]

    @property
    def dimension(self) -> int:
        return int(self.null_space_basis.shape[0])

    @property
    def exact(self) -> bool:
        """True when the basis is made of signed cycle indicators."""
        return self.classification is not CycleClass.GENERAL

    def certificate(self, b: ArrayLike) -> float:
        """max |B v| over the basis."""
        if self.dimension == 0:
            return 0.0
        return float(np.max(np.abs(np.asarray(b) @ self.null_space_basis.T)))


def _signed_cycle(graph: NetworkGraph, nodes: Sequence[int]) -> NDArray[np.int64]:
    vec = np.zeros(graph.n_edges, dtype=np.int64)
    for a, b in zip(nodes, [*nodes[1:], nodes[0]]):
        vec[graph.edge_index(a, b)] = 1 if a < b else -1
    return vec


def _normalize_sign(vec: NDArray[np.int64]) -> NDArray[np.int64]:
    first = vec[np.flatnonzero(vec)[0]]
    return vec if first > 0 else -vec


def _is_simple_cycle(graph: NetworkGraph, b: NDArray[np.int64], vec: NDArray[np.int64]) -> bool:
    if np.any(np.abs(vec) > 1) or not np.any(vec) or np.any(b @ vec):
        return False
    sub = nx.Graph([graph.edges[k] for k in np.flatnonzero(vec)])
    return nx.is_connected(sub) and all(d == 2 for _, d in sub.degree())


def _reduce_cycles(graph: NetworkGraph, b: NDArray[np.int64], cycles: list[NDArray[np.int64]]) -> list[NDArray[np.int64]]:
    # replace the longer of two cycles by their signed sum/difference when that is a shorter simple cycle
    changed = True
    while changed:
        changed = False
        for p, q in itertools.combinations(range(len(cycles)), 2):
            longer = p if np.count_nonzero(cycles[p]) >= np.count_nonzero(cycles[q]) else q
            for candidate in (cycles[p] + cycles[q], cycles[p] - cycles[q]):
                if np.count_nonzero(candidate) < np.count_nonzero(cycles[longer]) and _is_simple_cycle(graph, b, candidate):
                    cycles[longer] = _normalize_sign(candidate)
                    changed = True
                    break
            if changed:
                break
    return cycles


def _classify(supports: Sequence[frozenset[int]]) -> CycleClass:
    overlaps = {pair: len(supports[pair[0]] & supports[pair[1]]) for pair in itertools.combinations(range(len(supports)), 2)}
    if all(v == 0 for v in overlaps.values()):
        return CycleClass.INDEPENDENT
    if any(v > 1 for v in overlaps.values()):
        return CycleClass.GENERAL
    partners = {i: sum(1 for (p, q), v in overlaps.items() if v and i in (p, q)) for i in range(len(supports))}
    if all(n <= 1 for n in partners.values()):
        return CycleClass.SHARED_EDGE_PAIRS
    return CycleClass.GENERAL


def cycle_null_space(graph: NetworkGraph) -> CycleBasisReport:
    """
    Cycles of the graph and a basis of ker(B).

    Fundamental cycles of a spanning tree are shortened pairwise so that
    edge-disjoint cycles and cycle pairs sharing one edge show up as such.  Those
    two structures get the exact +-1 cycle indicators as basis; any other cycle
    structure gets an orthonormal numerical basis.
    """
    b = incidence(graph)
    if is_tree(graph):
        return CycleBasisReport(cycles=(), classification=CycleClass.TREE, null_space_basis=np.zeros((0, graph.n_edges)))

    cycles = [_normalize_sign(_signed_cycle(graph, nodes)) for nodes in nx.cycle_basis(graph.to_networkx())]
    cycles = _reduce_cycles(graph, b, cycles)
    cycles.sort(key=lambda v: tuple(-np.abs(v)))
    supports = tuple(frozenset(int(k) for k in np.flatnonzero(v)) for v in cycles)
    classification = _classify(supports)

    if classification is CycleClass.GENERAL:
        basis = null_space(b.astype(np.float64), rcond=NULL_SPACE_RCOND).T
    else:
        basis = np.asarray(cycles, dtype=np.float64)
    logger.debug(
        "Cycle structure computed",
        extra={"n_nodes": graph.n_nodes, "n_edges": graph.n_edges, "classification": classification.value, "dimension": basis.shape[0]},
    )
    return CycleBasisReport(cycles=supports, classification=classification, null_space_basis=basis)


# --- edge-list format: "N M" then M lines "i j" ---


def parse_edge_list(text: str) -> NetworkGraph:
    lines = [(no, line.strip()) for no, line in enumerate(text.splitlines(), start=1)]
    lines = [(no, line) for no, line in lines if line and not line.startswith("#")]
    if not lines:
        raise GraphFormatError("empty edge list; expected header 'N M'")

    def ints(no: int, line: str) -> tuple[int, int]:
        parts = line.split()
        if len(parts) != 2:
            raise GraphFormatError(f"line {no}: expected two integers, got {line!r}", {"line": no})
        try:
            return int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"line {no}: expected two integers, got {line!r}", {"line": no}) from None

    header_no, header = lines[0]
    n_nodes, n_edges = ints(header_no, header)
    body = lines[1:]
    if len(body) != n_edges:
        raise GraphFormatError(
            f"line {header_no}: header declares {n_edges} edges but {len(body)} follow", {"line": header_no}
        )
    return NetworkGraph(n_nodes=n_nodes, edges=tuple(ints(no, line) for no, line in body))


def format_edge_list(graph: NetworkGraph) -> str:
    rows = [f"{graph.n_nodes} {graph.n_edges}"] + [f"{i} {j}" for i, j in graph.edges]
    return "\n".join(rows) + "\n"


def read_edge_list(path: str | Path) -> NetworkGraph:
    return parse_edge_list(Path(path).read_text(encoding="utf-8"))


def write_edge_list(graph: NetworkGraph, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(format_edge_list(graph), encoding="utf-8")
    return target


# --- builders ---


def _graph(n_nodes: int, edges: Iterable[Edge]) -> NetworkGraph:
    return NetworkGraph(n_nodes=n_nodes, edges=tuple(edges))


def path_graph(n_nodes: int) -> NetworkGraph:
    return _graph(n_nodes, ((i, i + 1) for i in range(1, n_nodes)))


def cycle_graph(n_nodes: int) -> NetworkGraph:
    if n_nodes < 3:
        raise GraphValidationError("size", f"a cycle needs at least 3 nodes, got {n_nodes}")
    return _graph(n_nodes, [*((i, i + 1) for i in range(1, n_nodes)), (1, n_nodes)])


def star_graph(n_nodes: int) -> NetworkGraph:
    return _graph(n_nodes, ((1, k) for k in range(2, n_nodes + 1)))


def triangle_graph() -> NetworkGraph:
    return _graph(3, [(1, 2), (2, 3), (1, 3)])


def independent_cycles_graph() -> NetworkGraph:
    """Two triangles joined at node 1."""
    return _graph(5, [(1, 2), (2, 3), (1, 3), (1, 4), (1, 5), (4, 5)])


def shared_edge_cycles_graph() -> NetworkGraph:
    """The two-triangle graph plus node 6, whose triangle shares edge (1,3)."""
    return _graph(6, [(1, 2), (2, 3), (1, 3), (1, 4), (1, 5), (4, 5), (1, 6), (3, 6)])


def random_tree(n_nodes: int, seed: int, rng: Optional[np.random.Generator] = None) -> NetworkGraph:
    """Uniform labelled tree from a Pruefer sequence."""
    if n_nodes < 1:
        raise GraphValidationError("size", f"need at least one node, got {n_nodes}")
    if n_nodes <= 2:
        return path_graph(n_nodes)
    gen = rng if rng is not None else np.random.Generator(np.random.Philox(seed))
    sequence = gen.integers(0, n_nodes, size=n_nodes - 2).tolist()
    tree = nx.from_prufer_sequence(sequence)
    return _graph(n_nodes, sorted((min(a, b) + 1, max(a, b) + 1) for a, b in tree.edges()))
