"""Typed action registry: eleven JSON-schema tool contracts dispatching to
the simulation stack, plus the solver-backend registry.

Every execution path returns a ToolResult (never an unhandled crash);
assessment and capacity results are persisted to study memory before the
result is returned to the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import jsonschema

from . import capacity as capacity_mod
from .inspector import LimitSet, default_limits, inspect
from .memory import StudyMemory, StudyMemoryIOError, new_study
from .model import (
    BUILTIN_CASES,
    CaseError,
    ConnectionRequest,
    GridCase,
    UnknownBusError,
    case_to_dict,
    load_case,
)
from .pipeline import (
    CiaReport,
    PipelineConfig,
    contingency_labels,
    run_cia,
    run_cia_with_mitigation,
    run_n1_sweep,
)
from .powerflow import PowerFlowError, redispatch, solve_ac_powerflow

REFERENCE_BACKEND = "reference"

# tools whose outputs ground numeric claims; metadata queries do not exempt
# a response from grounding scrutiny
NON_ANALYTIC_TOOLS = frozenset({"list_backends", "list_cases", "set_backend"})


class ToolError(Exception):
    pass


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameter_schema: dict

    def to_openai(self) -> dict:
        """Render as an OpenAI-format function specification."""
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.parameter_schema,
            },
        }


@dataclass(frozen=True)
class ToolResult:
    tool_name: str
    ok: bool
    payload: Any = None
    error: str | None = None
    grounding: bool = False
    warnings: tuple[str, ...] = ()
    report: CiaReport | None = None  # assessment reports ride along

    def to_dict(self) -> dict:
        return {
            "tool_name": self.tool_name,
            "ok": self.ok,
            "payload": self.payload,
            "error": self.error,
            "grounding": self.grounding,
            "warnings": list(self.warnings),
        }


class BackendRegistry:
    """Named solver backends; only the built-in reference backend ships."""

    def __init__(self):
        self._backends = [REFERENCE_BACKEND]
        self.active = REFERENCE_BACKEND

    def names(self) -> list[str]:
        return list(self._backends)

    def set_active(self, name: str) -> None:
        if name not in self._backends:
            raise ToolError(
                f"unknown backend {name!r}; registered backends: "
                f"{', '.join(self._backends)}"
            )
        self.active = name


@dataclass
class ToolSession:
    """Execution context handed to the registry: memory, backends, and a
    per-session case cache so repeated tool calls reuse parsed cases."""

    memory: StudyMemory | None = None
    backends: BackendRegistry = field(default_factory=BackendRegistry)
    session_id: str = "local"
    pipeline_config: PipelineConfig = field(default_factory=PipelineConfig)
    _case_cache: dict[str, GridCase] = field(default_factory=dict)
    _baseline_cache: dict[str, dict] = field(default_factory=dict)

    def case(self, case_path: str) -> GridCase:
        if case_path not in self._case_cache:
            self._case_cache[case_path] = load_case(case_path)
        return self._case_cache[case_path]

    def baseline_outcomes(self, case_path: str):
        """Baseline N-1 sweep, cached per case for reuse across assessments."""
        if case_path not in self._baseline_cache:
            case = self.case(case_path)
            base_sol = solve_ac_powerflow(case)
            if not base_sol.converged:
                raise PowerFlowError(
                    f"baseline case does not converge: {base_sol.diagnostic}"
                )
            self._baseline_cache[case_path] = run_n1_sweep(
                case,
                contingency_labels(case),
                default_limits("EMERGENCY"),
                self.pipeline_config.bands,
            )
        return self._baseline_cache[case_path]


_CONNECTION_SCHEMA = {
    "type": "object",
    "properties": {
        "bus": {"type": "integer", "description": "Point-of-interconnection bus id"},
        "capacity_mw": {"type": "number", "minimum": 0,
                        "description": "Active power in MW"},
        "type": {
            "type": "string",
            "enum": ["load", "solar", "wind", "bess", "hybrid", "synchronous"],
            "description": "Resource type",
        },
    },
    "required": ["bus", "capacity_mw", "type"],
    "additionalProperties": False,
}

_CASE_PATH = {
    "type": "string",
    "description": "Builtin case alias (ieee14/ieee30/ieee57/ieee118) or a case-file path",
}

_MITIGATIONS_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "bus": {"type": "integer"},
            "q_mvar": {"type": "number", "description": "Capacitive positive, MVAr"},
        },
        "required": ["bus", "q_mvar"],
        "additionalProperties": False,
    },
}


def tool_specs() -> list[ToolSpec]:
    """The eleven tool contracts exposed to the language model."""
    return [
        ToolSpec(
            "list_backends",
            "List the registered solver backends and which one is active.",
            {"type": "object", "properties": {}, "additionalProperties": False},
        ),
        ToolSpec(
            "list_cases",
            "List the available builtin test cases.",
            {"type": "object", "properties": {}, "additionalProperties": False},
        ),
        ToolSpec(
            "set_backend",
            "Select the active solver backend by name.",
            {
                "type": "object",
                "properties": {"backend": {"type": "string"}},
                "required": ["backend"],
                "additionalProperties": False,
            },
        ),
        ToolSpec(
            "run_powerflow",
            "Solve the AC power flow for a case and report convergence, bus "
            "voltages, branch flows, and NORMAL-limit violations.",
            {
                "type": "object",
                "properties": {"case_path": _CASE_PATH},
                "required": ["case_path"],
                "additionalProperties": False,
            },
        ),
        ToolSpec(
            "run_opf",
            "Run the redispatch heuristic to relieve thermal overloads and "
            "report the post-redispatch state and violations. Does not alter "
            "topology, taps, or shunts.",
            {
                "type": "object",
                "properties": {"case_path": _CASE_PATH},
                "required": ["case_path"],
                "additionalProperties": False,
            },
        ),
        ToolSpec(
            "inspect_violations",
            "Scan a solved case for voltage and thermal violations. The "
            "angle-difference check is disabled unless a limit is given.",
            {
                "type": "object",
                "properties": {
                    "case_path": _CASE_PATH,
                    "regime": {"type": "string", "enum": ["NORMAL", "EMERGENCY"]},
                    "angle_diff_max_deg": {"type": "number"},
                },
                "required": ["case_path"],
                "additionalProperties": False,
            },
        ),
        ToolSpec(
            "run_contingency",
            "Run an N-1 contingency sweep (baseline power flow first) and "
            "report the failing contingencies under EMERGENCY limits.",
            {
                "type": "object",
                "properties": {"case_path": _CASE_PATH},
                "required": ["case_path"],
                "additionalProperties": False,
            },
        ),
        ToolSpec(
            "run_cia",
            "Run the full connection impact assessment cascade for a proposed "
            "connection and return stage reports, the decision, and reasons.",
            {
                "type": "object",
                "properties": {
                    "case_path": _CASE_PATH,
                    "connection": _CONNECTION_SCHEMA,
                },
                "required": ["case_path", "connection"],
                "additionalProperties": False,
            },
        ),
        ToolSpec(
            "run_cia_with_mitigation",
            "Run the impact assessment with shunt mitigations pre-installed "
            "at the given buses.",
            {
                "type": "object",
                "properties": {
                    "case_path": _CASE_PATH,
                    "connection": _CONNECTION_SCHEMA,
                    "mitigations": _MITIGATIONS_SCHEMA,
                },
                "required": ["case_path", "connection", "mitigations"],
                "additionalProperties": False,
            },
        ),
        ToolSpec(
            "find_max_capacity",
            "Bisect the maximum MW a bus can accept for a connection type "
            "before the assessment rejects; returns the boundary, samples, "
            "and a structured rejection explanation.",
            {
                "type": "object",
                "properties": {
                    "case_path": _CASE_PATH,
                    "bus": {"type": "integer"},
                    "connection_type": {
                        "type": "string",
                        "enum": ["load", "solar", "wind", "bess", "hybrid",
                                 "synchronous"],
                    },
                    "mw_min": {"type": "number", "minimum": 0},
                    "mw_max": {"type": "number", "exclusiveMinimum": 0},
                    "tol_mw": {"type": "number", "exclusiveMinimum": 0},
                },
                "required": ["case_path", "bus", "connection_type"],
                "additionalProperties": False,
            },
        ),
        ToolSpec(
            "query_network_data",
            "Return the raw network model (buses, branches with impedances "
            "and ratings, generators with limits, loads, shunts). No solved "
            "operating point is implied.",
            {
                "type": "object",
                "properties": {"case_path": _CASE_PATH},
                "required": ["case_path"],
                "additionalProperties": False,
            },
        ),
    ]


_SPECS_BY_NAME = {s.name: s for s in tool_specs()}


def _summarize_cia(report: CiaReport, case_name: str) -> str:
    c = report.connection
    reasons = f" ({', '.join(report.reason_codes)})" if report.reason_codes else ""
    return (
        f"{report.decision}: {c.p_mw:g} MW {c.ctype} at bus {c.bus} "
        f"on {case_name}{reasons}"
    )


def _study_from_report(session: ToolSession, report: CiaReport) -> Any:
    f1 = report.stage("f1")
    f2 = report.stage("f2")
    hard = f1.violations.hard_count if f1 and f1.violations else 0
    borderline = f1.violations.borderline_count if f1 and f1.violations else 0
    if f2 is not None:
        hard += len(f2.new_failures)
    return new_study(
        session_id=session.session_id,
        case_name=report.case_name,
        bus=report.connection.bus,
        p_mw=report.connection.p_mw,
        ctype=report.connection.ctype,
        status=report.decision,
        hard_count=hard,
        borderline_count=borderline,
        kind="cia",
        summary=_summarize_cia(report, report.case_name),
    )


def _persist(session: ToolSession, record) -> tuple[str, ...]:
    if session.memory is None:
        return ()
    try:
        session.memory.append_study(record)
        return ()
    except StudyMemoryIOError as exc:
        return (f"study memory persistence failed: {exc}",)


def _capacity_seeds(session: ToolSession, case_name: str, bus: int, ctype: str):
    """Earlier exact-MW assessments at this connection point, recalled from
    memory; they feed the monotonicity-contradiction check."""
    if session.memory is None:
        return []
    records = session.memory.recall("by_bus", case_name=case_name, bus=bus)
    return [
        (r.p_mw, r.status)
        for r in records
        if r.kind == "cia" and r.ctype == ctype and r.status in ("approve", "reject")
    ]


def execute(name: str, args: dict, session: ToolSession) -> ToolResult:
    """Validate ``args`` against the tool's schema and dispatch.

    Always returns a ToolResult; downstream errors are captured with the
    tool context attached.
    """
    spec = _SPECS_BY_NAME.get(name)
    grounding = name not in NON_ANALYTIC_TOOLS
    if spec is None:
        return ToolResult(
            tool_name=name,
            ok=False,
            error=f"unknown tool {name!r}; registered tools: "
            + ", ".join(sorted(_SPECS_BY_NAME)),
        )
    try:
        jsonschema.validate(args, spec.parameter_schema)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "(root)"
        return ToolResult(
            tool_name=name,
            ok=False,
            error=f"invalid arguments at {path}: {exc.message}",
            grounding=grounding,
        )
    try:
        return _dispatch(name, args, session, grounding)
    except (CaseError, PowerFlowError, ToolError, UnknownBusError,
            capacity_mod.CapacitySearchError, ValueError) as exc:
        return ToolResult(
            tool_name=name, ok=False, error=f"{name}: {exc}", grounding=grounding
        )


def _dispatch(name: str, args: dict, session: ToolSession, grounding: bool) -> ToolResult:
    if name == "list_backends":
        return ToolResult(
            name,
            True,
            payload={
                "backends": session.backends.names(),
                "active": session.backends.active,
            },
            grounding=False,
        )
    if name == "list_cases":
        return ToolResult(
            name, True, payload={"cases": list(BUILTIN_CASES)}, grounding=False
        )
    if name == "set_backend":
        session.backends.set_active(args["backend"])
        return ToolResult(
            name,
            True,
            payload={"ok": True, "active": session.backends.active},
            grounding=False,
        )

    case = session.case(args["case_path"])

    if name == "run_powerflow":
        sol = solve_ac_powerflow(case)
        payload = sol.to_dict()
        if sol.converged:
            payload["violations"] = inspect(
                sol, default_limits("NORMAL"), session.pipeline_config.bands
            ).to_dict()
        return ToolResult(name, True, payload=payload, grounding=True)

    if name == "run_opf":
        result = redispatch(case, default_limits("NORMAL"))
        payload = result.to_dict()
        payload["violations"] = inspect(
            result.post_solution, default_limits("NORMAL"), session.pipeline_config.bands
        ).to_dict()
        return ToolResult(name, True, payload=payload, grounding=True)

    if name == "inspect_violations":
        sol = solve_ac_powerflow(case)
        if not sol.converged:
            return ToolResult(
                name,
                False,
                error=f"power flow did not converge: {sol.diagnostic}",
                grounding=True,
            )
        regime = args.get("regime", "NORMAL")
        limits = default_limits(regime)
        if args.get("angle_diff_max_deg") is not None:
            limits = LimitSet(
                v_min=limits.v_min,
                v_max=limits.v_max,
                loading_max=limits.loading_max,
                angle_diff_max=args["angle_diff_max_deg"],
                regime=regime,
            )
        report = inspect(sol, limits, session.pipeline_config.bands)
        return ToolResult(name, True, payload=report.to_dict(), grounding=True)

    if name == "run_contingency":
        base_sol = solve_ac_powerflow(case)
        if not base_sol.converged:
            return ToolResult(
                name,
                False,
                error=f"baseline power flow did not converge: {base_sol.diagnostic}",
                grounding=True,
            )
        outcomes = session.baseline_outcomes(args["case_path"])
        failing = [o.label for o in outcomes.values() if o.failed]
        return ToolResult(
            name,
            True,
            payload={
                "contingencies": len(outcomes),
                "failing": sorted(failing),
                "fail_count": len(failing),
                "pass_count": len(outcomes) - len(failing),
            },
            grounding=True,
        )

    if name in ("run_cia", "run_cia_with_mitigation"):
        conn = args["connection"]
        req = ConnectionRequest(
            bus=conn["bus"], p_mw=conn["capacity_mw"], ctype=conn["type"]
        )
        if name == "run_cia":
            baseline = (
                session.baseline_outcomes(args["case_path"])
                if session.pipeline_config.enable_contingency
                else None
            )
            report = run_cia(case, req, session.pipeline_config, baseline)
        else:
            mitigations = [(m["bus"], m["q_mvar"]) for m in args["mitigations"]]
            report = run_cia_with_mitigation(case, req, mitigations, session.pipeline_config)
        warnings = _persist(session, _study_from_report(session, report))
        return ToolResult(
            name,
            True,
            payload=report.to_dict(),
            grounding=True,
            warnings=warnings,
            report=report,
        )

    if name == "find_max_capacity":
        seeds = _capacity_seeds(
            session, case.name, args["bus"], args["connection_type"]
        )
        result = capacity_mod.find_max_capacity(
            case,
            bus=args["bus"],
            ctype=args["connection_type"],
            mw_min=args.get("mw_min", 0.0),
            mw_max=args.get("mw_max", 500.0),
            tol_mw=args.get("tol_mw", 1.0),
            cfg=session.pipeline_config,
            seed_samples=seeds,
        )
        record = new_study(
            session_id=session.session_id,
            case_name=case.name,
            bus=result.bus,
            p_mw=result.max_approved_mw,
            ctype=result.ctype,
            status="approve" if result.max_approved_mw > 0 else "reject",
            kind="max_capacity",
            max_mw=result.max_approved_mw,
            summary=(
                f"max capacity at bus {result.bus} on {case.name}: "
                f"{result.max_approved_mw:g} MW ({result.ctype})"
            ),
        )
        warnings = _persist(session, record)
        return ToolResult(
            name, True, payload=result.to_dict(), grounding=True, warnings=warnings
        )

    if name == "query_network_data":
        return ToolResult(name, True, payload=case_to_dict(case), grounding=True)

    raise ToolError(f"no dispatcher for {name}")  # pragma: no cover
