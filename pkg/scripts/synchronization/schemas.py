"""
Scenario files: INI sections [graph], [kernel], optional [kernel:K] per-edge
overrides (1-based K), [sim] and [checks].

    [graph]
    n_nodes = 3
    edges = 1-2, 2-3, 1-3        # or: file = graphs/triangle.edges

    [kernel]
    name = linear_cos
    a = 1.0

    [sim]
    t_end = 10
    dt = 0.001
    record_every = 10
    seed = 7                     # or: initial = 1,0,0; 0,1,0; 0,0,1

    [checks]
    synchronized = 1e-4
    min_rate = 1.0
"""

import configparser
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from scripts.common.errors import ConfigError, KernelParameterError
from scripts.common.settings import default_record_every

from .distance_kernels import DistanceKernel, builtin_kernel
from .graph_topology import NetworkGraph, read_edge_list
from .simulator import SimulationConfig

CHECK_KINDS = ("synchronized", "min_rate", "min_r_squared", "constant_limit", "max_final_v")

_KERNEL_OVERRIDE = re.compile(r"^kernel:(\d+)$")
_EDGE_TOKEN = re.compile(r"^\s*(\d+)\s*-\s*(\d+)\s*$")


class GraphSection(BaseModel):
    n_nodes: Optional[int] = Field(None, ge=1)
    edges: Optional[List[Tuple[int, int]]] = None
    file: Optional[str] = Field(None, description="Edge-list path, relative to the scenario file")

    @field_validator("edges", mode="before")
    @classmethod
    def _parse_edges(cls, value):
        if not isinstance(value, str):
            return value
        edges = []
        for token in filter(None, (t.strip() for t in value.split(","))):
            match = _EDGE_TOKEN.match(token)
            if not match:
                raise ValueError(f"edge {token!r} is not of the form i-j")
            edges.append((int(match.group(1)), int(match.group(2))))
        return edges

    @model_validator(mode="after")
    def _one_source(self):
        inline = self.n_nodes is not None or self.edges is not None
        if inline == (self.file is not None):
            raise ValueError("give either 'file' or both 'n_nodes' and 'edges'")
        if inline and (self.n_nodes is None or self.edges is None):
            raise ValueError("'n_nodes' and 'edges' must be given together")
        return self

    def to_graph(self, base_dir: Optional[Path] = None) -> NetworkGraph:
        if self.file is not None:
            path = Path(self.file)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            return read_edge_list(path)
        return NetworkGraph(n_nodes=self.n_nodes, edges=tuple(self.edges))


class KernelSection(BaseModel):
    name: str = Field(..., min_length=1)
    params: Dict[str, float] = Field(default_factory=dict)

    def build(self, section: str = "kernel") -> DistanceKernel:
        try:
            return builtin_kernel(self.name, **self.params)
        except KernelParameterError as exc:
            param = exc.details.get("param")
            where = f"{section}.{param}" if param else section
            raise ConfigError(f"{where}: {exc.message}", {"loc": [section, param], "param": param}) from None


class SimSection(BaseModel):
    t_end: float = Field(..., gt=0)
    dt: float = Field(..., gt=0)
    record_every: int = Field(default_factory=default_record_every, ge=1)
    seed: Optional[int] = None
    initial: Optional[List[Tuple[float, float, float]]] = None
    name: str = "scenario"

    @field_validator("initial", mode="before")
    @classmethod
    def _parse_initial(cls, value):
        if not isinstance(value, str):
            return value
        rows = []
        for chunk in filter(None, (c.strip() for c in value.split(";"))):
            parts = [p.strip() for p in chunk.split(",")]
            if len(parts) != 3:
                raise ValueError(f"initial vector {chunk!r} needs three components")
            rows.append(tuple(float(p) for p in parts))
        return rows

    @model_validator(mode="after")
    def _one_start(self):
        if (self.seed is None) == (self.initial is None):
            raise ValueError("give exactly one of 'seed' or 'initial'")
        return self


class ScenarioFile(BaseModel):
    graph: GraphSection
    kernel: KernelSection
    edge_kernels: Dict[int, KernelSection] = Field(default_factory=dict)
    sim: SimSection
    checks: Dict[str, float] = Field(default_factory=dict)

    @field_validator("checks")
    @classmethod
    def _known_checks(cls, value):
        unknown = sorted(set(value) - set(CHECK_KINDS))
        if unknown:
            raise ValueError(f"unknown check kind(s) {unknown}; known: {list(CHECK_KINDS)}")
        return value

    def to_config(
        self,
        base_dir: Optional[Path] = None,
        seed: Optional[int] = None,
        dt: Optional[float] = None,
        t_end: Optional[float] = None,
    ) -> SimulationConfig:
        """Build the run; explicit seed/dt/t_end override the file."""
        graph = self.graph.to_graph(base_dir)
        shared = self.kernel.build("kernel")
        for k in self.edge_kernels:
            if not 1 <= k <= graph.n_edges:
                raise ConfigError(f"kernel:{k}: edge index outside 1..{graph.n_edges}", {"section": f"kernel:{k}"})
        kernels = tuple(self.edge_kernels[k + 1].build(f"kernel:{k + 1}") if k + 1 in self.edge_kernels else shared for k in range(graph.n_edges))
        use_seed = seed if seed is not None else self.sim.seed
        try:
            return SimulationConfig(
                graph=graph,
                kernels=kernels if self.edge_kernels else shared,
                t_end=t_end if t_end is not None else self.sim.t_end,
                dt=dt if dt is not None else self.sim.dt,
                record_every=self.sim.record_every,
                seed=use_seed,
                initial_vectors=self.sim.initial if use_seed is None else None,
                name=self.sim.name,
            )
        except ValidationError as exc:
            raise ConfigError(f"sim: {_first_error(exc)}", {"section": "sim"}) from None


def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    where = ".".join(str(p) for p in err["loc"])
    return f"{where}: {err['msg']}" if where else err["msg"]


def _line_of(text: str, section: str, key: str) -> Optional[int]:
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
        elif current == section and line.split("=", 1)[0].strip() == key:
            return no
    return None


def parse_scenario(text: str) -> ScenarioFile:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        where = f"line {lineno}: " if lineno else ""
        raise ConfigError(f"{where}{exc.message.splitlines()[0]}", {"line": lineno}) from None

    known = {"graph", "kernel", "sim", "checks"}
    raw: dict = {"edge_kernels": {}}
    for section in parser.sections():
        values = dict(parser[section])
        override = _KERNEL_OVERRIDE.match(section)
        if section == "kernel" or override:
            name = values.pop("name", None)
            entry = {"name": name, "params": values} if name is not None else {"params": values}
            if override:
                raw["edge_kernels"][int(override.group(1))] = entry
            else:
                raw["kernel"] = entry
        elif section in known:
            raw[section] = values
        else:
            line = next(
                (no for no, raw_line in enumerate(text.splitlines(), start=1) if raw_line.strip() == f"[{section}]"),
                None,
            )
            raise ConfigError(f"line {line}: unknown section [{section}]", {"section": section, "line": line})

    try:
        scenario = ScenarioFile.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = [str(p) for p in err["loc"]]
        if loc[:1] == ["edge_kernels"] and len(loc) > 1:
            loc = [f"kernel:{loc[1]}", *loc[2:]]
        if len(loc) > 2 and loc[1] == "params":
            loc = [loc[0], *loc[2:]]
        # model-level validators report under the section only
        field = loc[1] if len(loc) > 1 else None
        line = _line_of(text, loc[0], field) if field else None
        where = f"line {line}: " if line else ""
        raise ConfigError(f"{where}{'.'.join(loc)}: {err['msg']}", {"loc": loc, "line": line}) from None
    _check_kernel_params(scenario, text)
    return scenario


def _check_kernel_params(scenario: ScenarioFile, text: str) -> None:
    sections = [("kernel", scenario.kernel), *((f"kernel:{k}", s) for k, s in sorted(scenario.edge_kernels.items()))]
    for section, kernel in sections:
        try:
            kernel.build(section)
        except ConfigError as exc:
            param = exc.details.get("param")
            line = _line_of(text, section, param) if param else None
            if line is None:
                raise
            raise ConfigError(f"line {line}: {exc.message}", {**exc.details, "line": line}) from None


def load_scenario(path: str | Path) -> ScenarioFile:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _kernel_lines(kernel: KernelSection) -> List[str]:
    return [f"name = {kernel.name}"] + [f"{k} = {_fmt_float(v)}" for k, v in sorted(kernel.params.items())]


def format_scenario(scenario: ScenarioFile) -> str:
    g = scenario.graph
    lines = ["[graph]"]
    if g.file is not None:
        lines.append(f"file = {g.file}")
    else:
        lines.append(f"n_nodes = {g.n_nodes}")
        lines.append("edges = " + ", ".join(f"{i}-{j}" for i, j in g.edges))
    lines += ["", "[kernel]", *_kernel_lines(scenario.kernel)]
    for k in sorted(scenario.edge_kernels):
        lines += ["", f"[kernel:{k}]", *_kernel_lines(scenario.edge_kernels[k])]
    s = scenario.sim
    lines += [
        "",
        "[sim]",
        f"name = {s.name}",
        f"t_end = {_fmt_float(s.t_end)}",
        f"dt = {_fmt_float(s.dt)}",
        f"record_every = {s.record_every}",
    ]
    if s.seed is not None:
        lines.append(f"seed = {s.seed}")
    else:
        lines.append("initial = " + "; ".join(", ".join(_fmt_float(c) for c in row) for row in s.initial))
    if scenario.checks:
        lines += ["", "[checks]", *(f"{k} = {_fmt_float(v)}" for k, v in sorted(scenario.checks.items()))]
    return "\n".join(lines) + "\n"
