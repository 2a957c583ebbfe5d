"""Four-stage connection impact assessment cascade.

Stage 1 screens the connected case under NORMAL limits, stage 2 runs a
baseline-aware N-1 sweep under EMERGENCY limits, stage 3 is the transient
screen for inverter-based requests, and stage 4 the short-circuit-ratio
screen.  Escalation past a hard failure stops; the decision aggregates the
executed stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone

from .inspector import (
    LimitSet,
    ToleranceBands,
    ViolationReport,
    default_limits,
    inspect,
)
from .model import (
    ConnectionRequest,
    GridCase,
    UnknownBusError,
    apply_connection,
    apply_shunt_mitigation,
)
from .powerflow import (
    FaultSpec,
    PowerFlowError,
    TransientResult,
    apply_outage,
    islanding_info,
    redispatch,
    run_transient,
    short_circuit_proxy,
    solve_ac_powerflow,
)

STAGES = ("f1", "f2", "f3", "f4")

# reason codes
CONVERGENCE_DIVERGENCE = "convergence_divergence"
STEADY_STATE_VIOLATION = "steady_state_violation"
BORDERLINE_STEADY_STATE = "borderline_steady_state"
OPF_ESCALATED = "opf_escalated"
NEW_CONTINGENCY_FAILURES = "new_contingency_failures"
CONTINGENCY_WORSENING = "contingency_worsening"
TRANSIENT_INSTABILITY = "transient_instability"
TRANSIENT_INCOMPLETE = "transient_incomplete"
LOW_SCR = "low_scr"


@dataclass(frozen=True)
class PipelineConfig:
    enable_contingency: bool = True
    enable_transient: bool = True
    enable_emt: bool = True
    scr_min: float = 3.0
    worsening_threshold_pct: float = 2.0
    fail_on_worsening: bool = False
    enable_opf_escalation: bool = False
    transient_horizon_s: float = 10.0
    transient_dt_s: float = 0.005
    fault_t_on_s: float = 0.1
    fault_t_off_s: float = 0.2
    angle_spread_max_rad: float = 2.0 * math.pi
    bands: ToleranceBands = ToleranceBands()

    def __post_init__(self):
        if self.scr_min <= 0:
            raise ValueError("scr_min must be positive")
        if self.worsening_threshold_pct < 0:
            raise ValueError("worsening_threshold_pct must be >= 0")

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["bands"] = vars(self.bands).copy()
        return d


@dataclass(frozen=True)
class ContingencyOutcome:
    """Result of one N-1 case: element label, failure flag and severity."""

    label: str
    failed: bool
    reason: str = ""  # islanding | divergence | violations | ""
    worst_margin_pct: float | None = None
    worst_violation: tuple | None = None  # (kind, id, vtype, observed, limit)


@dataclass(frozen=True)
class StageReport:
    stage: str
    outcome: str  # pass | fail | borderline | skipped
    reasons: tuple[str, ...] = ()
    violations: ViolationReport | None = None  # f1
    new_violations: tuple = ()  # f1 violations absent from the baseline
    failing_contingencies: tuple[str, ...] = ()  # f2
    new_failures: tuple[str, ...] = ()  # f2
    new_failure_details: tuple = ()  # f2 (label, worst_violation)
    worsened: tuple = ()  # f2 (label, erosion_pct)
    transient: TransientResult | None = None  # f3
    scr_readings: tuple[tuple[int, float], ...] = ()  # f4
    redispatch_mw: tuple[tuple[int, float], ...] = ()  # opf escalation

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "outcome": self.outcome,
            "reasons": list(self.reasons),
            "violations": self.violations.to_dict() if self.violations else None,
            "new_violations": [list(v) for v in self.new_violations],
            "failing_contingencies": list(self.failing_contingencies),
            "new_failures": list(self.new_failures),
            "new_failure_details": [list(d) for d in self.new_failure_details],
            "worsened": [list(w) for w in self.worsened],
            "transient": self.transient.to_dict() if self.transient else None,
            "scr_readings": [list(r) for r in self.scr_readings],
            "redispatch_mw": [list(r) for r in self.redispatch_mw],
        }


@dataclass(frozen=True)
class CiaReport:
    connection: ConnectionRequest
    case_name: str
    stages: tuple[StageReport, ...]
    decision: str  # approve | reject | borderline
    reason_codes: tuple[str, ...]
    mitigations_applied: tuple[tuple[int, float], ...] = ()
    timestamp: str = ""

    def stage(self, name: str) -> StageReport | None:
        return next((s for s in self.stages if s.stage == name), None)

    def to_dict(self) -> dict:
        return {
            "connection": {
                "bus": self.connection.bus,
                "p_mw": self.connection.p_mw,
                "ctype": self.connection.ctype,
                "is_ibr": self.connection.is_ibr,
            },
            "case_name": self.case_name,
            "stages": [s.to_dict() for s in self.stages],
            "decision": self.decision,
            "reason_codes": list(self.reason_codes),
            "mitigations_applied": [list(m) for m in self.mitigations_applied],
            "timestamp": self.timestamp,
        }


def escalation_level(req: ConnectionRequest, cfg: PipelineConfig) -> int:
    """Highest stage whose escalation predicate holds for this request."""
    level = 1
    if cfg.enable_contingency:
        level = 2
    if cfg.enable_transient and req.is_ibr:
        level = 3
    if cfg.enable_emt and req.is_ibr:
        level = 4
    return level


def _stage_predicates(req: ConnectionRequest, cfg: PipelineConfig) -> dict[str, bool]:
    return {
        "f1": True,
        "f2": cfg.enable_contingency,
        "f3": cfg.enable_transient and req.is_ibr,
        "f4": cfg.enable_emt and req.is_ibr,
    }


def contingency_labels(case: GridCase) -> list[str]:
    """N-1 candidate set: in-service branches plus in-service generators,
    excluding units at the slack bus."""
    labels = [f"branch:{b.id}" for b in case.branches if b.in_service]
    slack = case.slack_bus.id
    labels += [
        f"gen:{g.id}"
        for g in case.generators
        if g.in_service and g.bus != slack
    ]
    return labels


def run_n1_sweep(
    case: GridCase,
    labels: list[str],
    limits: LimitSet,
    bands: ToleranceBands,
) -> dict[str, ContingencyOutcome]:
    """Outage every element in ``labels`` and classify each post-contingency
    state.  Islanding that strands load or generation and divergence both
    count as failures (divergence is never read as compliance)."""
    outcomes: dict[str, ContingencyOutcome] = {}
    for label in labels:
        outaged = apply_outage(case, label)
        island = islanding_info(outaged)
        if island and island.get("non_solvable"):
            outcomes[label] = ContingencyOutcome(label, True, reason="islanding")
            continue
        sol = solve_ac_powerflow(outaged)
        if not sol.converged:
            outcomes[label] = ContingencyOutcome(label, True, reason="divergence")
            continue
        report = inspect(sol, limits, bands)
        hard = [v for v in report.violations if v.severity == "hard"]
        if hard:
            worst = min(hard, key=lambda v: v.margin_pct)
            outcomes[label] = ContingencyOutcome(
                label,
                True,
                reason="violations",
                worst_margin_pct=report.worst_margin_pct(),
                worst_violation=(
                    worst.element_kind,
                    worst.element_id,
                    worst.vtype,
                    worst.observed,
                    worst.limit,
                ),
            )
        else:
            outcomes[label] = ContingencyOutcome(
                label, False, worst_margin_pct=report.worst_margin_pct()
            )
    return outcomes


def stage_contingency(
    base: GridCase,
    connected: GridCase,
    cfg: PipelineConfig,
    baseline_outcomes: dict[str, ContingencyOutcome] | None = None,
) -> StageReport:
    """Baseline-aware N-1 stage: fail on contingencies that fail for the
    connected case but not the baseline; optionally fail when a commonly
    failing contingency's worst margin erodes beyond the threshold."""
    limits = default_limits("EMERGENCY")
    labels = contingency_labels(base)
    if baseline_outcomes is None:
        base_solution = solve_ac_powerflow(base)
        if not base_solution.converged:
            raise PowerFlowError(
                f"baseline case does not converge: {base_solution.diagnostic}"
            )
        baseline_outcomes = run_n1_sweep(base, labels, limits, cfg.bands)
    connected_outcomes = run_n1_sweep(connected, labels, limits, cfg.bands)

    base_failing = {l for l, o in baseline_outcomes.items() if o.failed}
    conn_failing = {l for l, o in connected_outcomes.items() if o.failed}
    new_failures = sorted(conn_failing - base_failing)
    details = tuple(
        (l, connected_outcomes[l].worst_violation) for l in new_failures
    )

    worsened: list[tuple[str, float]] = []
    for label in sorted(conn_failing & base_failing):
        b, c = baseline_outcomes[label], connected_outcomes[label]
        if b.worst_margin_pct is None or c.worst_margin_pct is None:
            continue
        erosion = b.worst_margin_pct - c.worst_margin_pct
        if erosion > cfg.worsening_threshold_pct:
            worsened.append((label, erosion))

    reasons = []
    if new_failures:
        reasons.append(NEW_CONTINGENCY_FAILURES)
    if cfg.fail_on_worsening and worsened:
        reasons.append(CONTINGENCY_WORSENING)
    return StageReport(
        stage="f2",
        outcome="fail" if reasons else "pass",
        reasons=tuple(reasons),
        failing_contingencies=tuple(sorted(conn_failing)),
        new_failures=tuple(new_failures),
        new_failure_details=details,
        worsened=tuple(worsened),
    )


def _stage_steady_state(
    base: GridCase, connected: GridCase, cfg: PipelineConfig
) -> StageReport:
    limits = default_limits("NORMAL")
    sol = solve_ac_powerflow(connected)
    if not sol.converged:
        return StageReport(
            stage="f1", outcome="fail", reasons=(CONVERGENCE_DIVERGENCE,)
        )
    report = inspect(sol, limits, cfg.bands)
    new_violations: tuple = ()
    if report.violations:
        base_sol = solve_ac_powerflow(base)
        base_keys = set()
        if base_sol.converged:
            base_keys = {v.key() for v in inspect(base_sol, limits, cfg.bands).violations}
        new_violations = tuple(
            (v.element_kind, v.element_id, v.vtype, v.observed, v.limit)
            for v in report.violations
            if v.key() not in base_keys
        )
    if report.hard_count:
        return StageReport(
            stage="f1",
            outcome="fail",
            reasons=(STEADY_STATE_VIOLATION,),
            violations=report,
            new_violations=new_violations,
        )
    if report.borderline_count:
        if cfg.enable_opf_escalation:
            rr = redispatch(connected, limits)
            post = inspect(rr.post_solution, limits, cfg.bands)
            if post.clean:
                return StageReport(
                    stage="f1",
                    outcome="pass",
                    reasons=(OPF_ESCALATED,),
                    violations=post,
                    redispatch_mw=rr.dispatch_changes,
                )
            outcome = "fail" if post.hard_count else "borderline"
            reason = STEADY_STATE_VIOLATION if post.hard_count else BORDERLINE_STEADY_STATE
            return StageReport(
                stage="f1",
                outcome=outcome,
                reasons=(reason, OPF_ESCALATED),
                violations=post,
                new_violations=new_violations,
                redispatch_mw=rr.dispatch_changes,
            )
        return StageReport(
            stage="f1",
            outcome="borderline",
            reasons=(BORDERLINE_STEADY_STATE,),
            violations=report,
            new_violations=new_violations,
        )
    return StageReport(stage="f1", outcome="pass", violations=report)


def _stage_transient(connected: GridCase, req: ConnectionRequest, cfg: PipelineConfig) -> StageReport:
    fault = FaultSpec(bus=req.bus, t_on_s=cfg.fault_t_on_s, t_off_s=cfg.fault_t_off_s)
    try:
        result = run_transient(
            connected, fault, horizon_s=cfg.transient_horizon_s, dt_s=cfg.transient_dt_s
        )
    except PowerFlowError:
        return StageReport(stage="f3", outcome="fail", reasons=(TRANSIENT_INCOMPLETE,))
    if not result.completed:
        return StageReport(
            stage="f3",
            outcome="fail",
            reasons=(TRANSIENT_INCOMPLETE,),
            transient=result,
        )
    if result.final_angle_spread_rad > cfg.angle_spread_max_rad:
        return StageReport(
            stage="f3",
            outcome="fail",
            reasons=(TRANSIENT_INSTABILITY,),
            transient=result,
        )
    return StageReport(stage="f3", outcome="pass", transient=result)


def _stage_scr(connected: GridCase, req: ConnectionRequest, cfg: PipelineConfig) -> StageReport:
    s_sc = short_circuit_proxy(connected, req.bus)
    scr = math.inf if req.p_mw == 0 else s_sc / req.p_mw
    if scr < cfg.scr_min:
        return StageReport(
            stage="f4",
            outcome="fail",
            reasons=(LOW_SCR,),
            scr_readings=((req.bus, scr),),
        )
    return StageReport(stage="f4", outcome="pass", scr_readings=((req.bus, scr),))


def run_cia(
    case: GridCase,
    req: ConnectionRequest,
    cfg: PipelineConfig = PipelineConfig(),
    baseline_outcomes: dict[str, ContingencyOutcome] | None = None,
) -> CiaReport:
    """Run the assessment cascade for a proposed connection.

    ``baseline_outcomes`` may carry a precomputed baseline N-1 sweep so that
    repeated assessments of the same base case (capacity search) do not
    re-run it.
    """
    if not case.has_bus(req.bus):
        raise UnknownBusError(req.bus, case)
    connected = apply_connection(case, req)
    predicates = _stage_predicates(req, cfg)

    stages: list[StageReport] = []
    failed = False
    for name in STAGES:
        if failed:
            break
        if not predicates[name]:
            stages.append(StageReport(stage=name, outcome="skipped"))
            continue
        if name == "f1":
            report = _stage_steady_state(case, connected, cfg)
        elif name == "f2":
            report = stage_contingency(case, connected, cfg, baseline_outcomes)
        elif name == "f3":
            report = _stage_transient(connected, req, cfg)
        else:
            report = _stage_scr(connected, req, cfg)
        stages.append(report)
        failed = report.outcome == "fail"

    if any(s.outcome == "fail" for s in stages):
        decision = "reject"
    elif any(s.outcome == "borderline" for s in stages):
        decision = "borderline"
    else:
        decision = "approve"
    reason_codes = tuple(dict.fromkeys(r for s in stages for r in s.reasons))
    mitigations = tuple(
        (m["bus"], m["q_mvar"]) for m in case.metadata_entries("mitigation")
    )
    return CiaReport(
        connection=req,
        case_name=case.name,
        stages=tuple(stages),
        decision=decision,
        reason_codes=reason_codes,
        mitigations_applied=mitigations,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def run_cia_with_mitigation(
    case: GridCase,
    req: ConnectionRequest,
    mitigations: list[tuple[int, float]],
    cfg: PipelineConfig = PipelineConfig(),
) -> CiaReport:
    """Install shunt mitigations, then assess.  Unknown mitigation buses are
    rejected before any simulation runs."""
    for bus, _ in mitigations:
        if not case.has_bus(bus):
            raise UnknownBusError(bus, case)
    mitigated = case
    for bus, q_mvar in mitigations:
        mitigated = apply_shunt_mitigation(mitigated, bus, q_mvar)
    return run_cia(mitigated, req, cfg)
