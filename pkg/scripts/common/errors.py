"""
Error taxonomy for spheresync.
Exceptions carry a stable error type, exit code and stage so the CLI can
report every failure in one structured format.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Dict, Optional

from pydantic import BaseModel


# Stable process exit codes.
EXIT_SUCCESS = 0
EXIT_CHECK_FAILED = 1
EXIT_VALIDATION_ERROR = 2
EXIT_INVALID_TRACE = 3


STAGE_PARSE = "parse"
STAGE_GRAPH = "graph"
STAGE_KERNEL = "kernel"
STAGE_SIMULATION = "simulation"
STAGE_DIAGNOSTICS = "diagnostics"
STAGE_ACCEPTANCE = "acceptance"


DEFAULT_STAGE_HINTS = {
    STAGE_PARSE: "Check the scenario file sections ([graph], [kernel], [sim], [checks]) and required fields.",
    STAGE_GRAPH: "Edges must be distinct pairs i<j within 1..N and the graph must be connected.",
    STAGE_KERNEL: "Use a built-in kernel name (linear_cos, arccos_sqrt, quadratic, power, log_barrier) with valid parameters.",
    STAGE_SIMULATION: "Reduce dt or inspect the kernel derivative near s=0 and s=2.",
    STAGE_DIAGNOSTICS: "Lengthen the run or widen the fit window so enough samples stay above the floor.",
    STAGE_ACCEPTANCE: "Run the failing criterion alone and compare its observed value with the threshold.",
}


@dataclass(frozen=True)
class HintPattern:
    needle: str
    hint: str


ROOT_CAUSE_HINT_PATTERNS: list[HintPattern] = [
    HintPattern("connected", "The edge list leaves some agents unreachable. Add edges until the graph is connected."),
    HintPattern("duplicate", "An edge appears twice. Remove the repeated pair."),
    HintPattern("self-loop", "An edge joins a node to itself. Remove it."),
    HintPattern("non-finite", "A state or kernel value became NaN/inf. Guard the kernel near s=2 or shrink dt."),
    HintPattern("lyapunov increase", "V rose between samples. The step is too large for this kernel; shrink dt."),
    HintPattern("unknown kernel", "Kernel name not recognised. Run `spheresync kernel --help` for the built-ins."),
    HintPattern("too few", "Not enough samples above the 1e-14 floor. Use a longer run or smaller record_every."),
]


def infer_root_cause_hint(stage: str, output_text: str | None) -> str:
    text = (output_text or "").lower()
    for pattern in ROOT_CAUSE_HINT_PATTERNS:
        if pattern.needle in text:
            return pattern.hint
    return DEFAULT_STAGE_HINTS.get(stage, DEFAULT_STAGE_HINTS[STAGE_ACCEPTANCE])


class SphereSyncError(Exception):
    error_type = "internal_error"
    exit_code = EXIT_CHECK_FAILED
    stage = STAGE_ACCEPTANCE

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ConfigError(SphereSyncError, ValueError):
    error_type = "validation_error"
    exit_code = EXIT_VALIDATION_ERROR
    stage = STAGE_PARSE


class GraphValidationError(SphereSyncError, ValueError):
    error_type = "validation_error"
    exit_code = EXIT_VALIDATION_ERROR
    stage = STAGE_GRAPH

    def __init__(self, invariant: str, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(f"graph invariant '{invariant}' violated: {message}", details)
        self.invariant = invariant


class GraphFormatError(SphereSyncError, ValueError):
    error_type = "validation_error"
    exit_code = EXIT_VALIDATION_ERROR
    stage = STAGE_GRAPH


class UnknownKernelError(SphereSyncError, KeyError):
    error_type = "not_found_error"
    exit_code = EXIT_VALIDATION_ERROR
    stage = STAGE_KERNEL

    def __str__(self) -> str:
        return self.message


class KernelParameterError(SphereSyncError, ValueError):
    """A built-in kernel parameter outside its admissible range; `details["param"]` names it."""

    error_type = "validation_error"
    exit_code = EXIT_VALIDATION_ERROR
    stage = STAGE_KERNEL


class KernelEvaluationError(SphereSyncError, ArithmeticError):
    error_type = "kernel_error"
    stage = STAGE_KERNEL


class DegenerateKernelError(SphereSyncError, ArithmeticError):
    error_type = "kernel_error"
    stage = STAGE_KERNEL


class NetworkSizeMismatchError(SphereSyncError, ValueError):
    error_type = "validation_error"
    exit_code = EXIT_VALIDATION_ERROR
    stage = STAGE_SIMULATION


class NonFiniteStateError(SphereSyncError, ArithmeticError):
    error_type = "simulation_error"
    exit_code = EXIT_INVALID_TRACE
    stage = STAGE_SIMULATION


class InsufficientSamplesError(SphereSyncError, ValueError):
    error_type = "diagnostics_error"
    stage = STAGE_DIAGNOSTICS


class EmptyWindowError(SphereSyncError, ValueError):
    error_type = "diagnostics_error"
    stage = STAGE_DIAGNOSTICS


class ErrorDetail(BaseModel):
    """Standard error report format"""
    timestamp: str
    exit_code: int
    error_type: str
    stage: str
    message: str
    hint: str
    details: Optional[Dict[str, Any]] = None


def create_error_report(exc: BaseException) -> ErrorDetail:
    """
    Build the structured report printed by the CLI for a failed command.

    Args:
        exc: the exception that stopped the command

    Returns:
        ErrorDetail with exit code, stage and a remediation hint
    """
    if isinstance(exc, SphereSyncError):
        stage, exit_code, error_type = exc.stage, exc.exit_code, exc.error_type
        message, details = exc.message, exc.details or None
    else:
        stage, exit_code, error_type = STAGE_ACCEPTANCE, EXIT_CHECK_FAILED, "internal_error"
        message, details = str(exc) or type(exc).__name__, None
    return ErrorDetail(
        timestamp=datetime.now(timezone.utc).isoformat(),
        exit_code=exit_code,
        error_type=error_type,
        stage=stage,
        message=message,
        hint=infer_root_cause_hint(stage, message),
        details=details,
    )
