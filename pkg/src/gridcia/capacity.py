"""Binary-search hosting-capacity operator with contradiction detection.

Bisection assumes feasibility is monotone in injected MW.  Every sample is a
full assessment; if the sample history (including any seeded results from
earlier studies) ever shows an approval above a rejection, the search
records diagnostics and falls back to a coarse scan, reporting the highest
feasible point it actually sampled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ConnectionRequest, GridCase
from .pipeline import (
    CONVERGENCE_DIVERGENCE,
    LOW_SCR,
    CiaReport,
    PipelineConfig,
    contingency_labels,
    default_limits,
    run_cia,
    run_n1_sweep,
)
from .powerflow import solve_ac_powerflow

COARSE_SCAN_POINTS = 11

LIMITING_FACTORS = (
    "steady_state_violation",
    "contingency_failure",
    "convergence_divergence",
    "transient_instability",
    "low_scr",
)


class CapacitySearchError(Exception):
    pass


@dataclass(frozen=True)
class CapacitySample:
    mw: float
    decision: str  # approve | reject | borderline

    @property
    def approved(self) -> bool:
        return self.decision == "approve"

    def to_dict(self) -> dict:
        return {"mw": self.mw, "decision": self.decision}


@dataclass(frozen=True)
class RejectionExplanation:
    limiting_factor: str
    failing_stages: tuple[str, ...]
    project_caused: tuple[tuple, ...]  # (element, vtype, observed, limit)

    def to_dict(self) -> dict:
        return {
            "limiting_factor": self.limiting_factor,
            "failing_stages": list(self.failing_stages),
            "project_caused": [list(p) for p in self.project_caused],
        }


@dataclass(frozen=True)
class CapacityResult:
    bus: int
    ctype: str
    max_approved_mw: float
    iterations: int  # number of full assessments executed
    samples: tuple[CapacitySample, ...]
    boundary_reject: CiaReport | None
    rejection_explanation: RejectionExplanation | None
    fallback_used: bool
    diagnostics: tuple[str, ...]
    mw_min: float
    mw_max: float
    tol_mw: float

    def to_dict(self) -> dict:
        return {
            "bus": self.bus,
            "ctype": self.ctype,
            "max_approved_mw": self.max_approved_mw,
            "iterations": self.iterations,
            "samples": [s.to_dict() for s in self.samples],
            "boundary_reject": self.boundary_reject.to_dict() if self.boundary_reject else None,
            "rejection_explanation": (
                self.rejection_explanation.to_dict() if self.rejection_explanation else None
            ),
            "fallback_used": self.fallback_used,
            "diagnostics": list(self.diagnostics),
            "mw_min": self.mw_min,
            "mw_max": self.mw_max,
            "tol_mw": self.tol_mw,
        }


def explain_rejection(report: CiaReport) -> RejectionExplanation:
    """Condense a rejecting assessment into its limiting factor, the failing
    stages, and the project-caused violations (relative to baseline)."""
    if report.decision != "reject":
        raise CapacitySearchError(
            f"explain_rejection requires a rejecting report, got {report.decision!r}"
        )
    failing = [s for s in report.stages if s.outcome == "fail"]
    first = failing[0]
    if first.stage == "f1":
        factor = (
            CONVERGENCE_DIVERGENCE
            if CONVERGENCE_DIVERGENCE in first.reasons
            else "steady_state_violation"
        )
        project_caused = tuple(
            (f"{kind}:{eid}", vtype, observed, limit)
            for kind, eid, vtype, observed, limit in first.new_violations
        )
    elif first.stage == "f2":
        factor = "contingency_failure"
        project_caused = tuple(
            (label, *(detail[2:] if detail else ("post_contingency", None, None)))
            for label, detail in first.new_failure_details
        )
    elif first.stage == "f3":
        factor = "transient_instability"
        spread = first.transient.final_angle_spread_rad if first.transient else None
        project_caused = ((f"bus:{report.connection.bus}", "angle_spread", spread, None),)
    else:
        factor = LOW_SCR
        project_caused = tuple(
            (f"bus:{bus}", "scr", scr, None) for bus, scr in first.scr_readings
        )
    return RejectionExplanation(
        limiting_factor=factor,
        failing_stages=tuple(s.stage for s in failing),
        project_caused=project_caused,
    )


def _contradiction(samples: Sequence[CapacitySample]) -> tuple[str, ...]:
    """Report (as diagnostics) any approval at a higher MW than a rejection."""
    approved = [s.mw for s in samples if s.approved]
    rejected = [s.mw for s in samples if not s.approved]
    if not approved or not rejected:
        return ()
    hi_approve, lo_reject = max(approved), min(rejected)
    if hi_approve > lo_reject:
        return (
            f"monotonicity contradiction: approval at {hi_approve:g} MW above "
            f"rejection at {lo_reject:g} MW",
        )
    return ()


def find_max_capacity(
    case: GridCase,
    bus: int,
    ctype: str,
    mw_min: float = 0.0,
    mw_max: float = 500.0,
    tol_mw: float = 1.0,
    cfg: PipelineConfig = PipelineConfig(),
    seed_samples: Sequence[tuple[float, str]] = (),
    cia_fn: Callable[[float], CiaReport] | None = None,
) -> CapacityResult:
    """Bisect the feasible MW range for a connection at ``bus``.

    ``seed_samples`` are (mw, decision) pairs from earlier assessments of the
    same connection point (e.g. recalled from study memory); they join the
    contradiction check so a prior approval that conflicts with the search
    triggers the coarse-scan fallback.  ``cia_fn`` substitutes the assessment
    itself and exists for calibration and tests.
    """
    if mw_min >= mw_max:
        raise CapacitySearchError("mw_min must be below mw_max")
    if tol_mw <= 0:
        raise CapacitySearchError("tol_mw must be positive")
    if cia_fn is None:
        if not case.has_bus(bus):
            from .model import UnknownBusError

            raise UnknownBusError(bus, case)
        baseline = None
        if cfg.enable_contingency:
            labels = contingency_labels(case)
            base_sol = solve_ac_powerflow(case)
            if not base_sol.converged:
                raise CapacitySearchError(
                    f"baseline case does not converge: {base_sol.diagnostic}"
                )
            baseline = run_n1_sweep(
                case, labels, default_limits("EMERGENCY"), cfg.bands
            )

        def cia_fn(mw: float) -> CiaReport:
            req = ConnectionRequest(bus=bus, p_mw=mw, ctype=ctype)
            return run_cia(case, req, cfg, baseline_outcomes=baseline)

    samples: list[CapacitySample] = []
    history: list[CapacitySample] = [
        CapacitySample(mw=m, decision=d) for m, d in seed_samples
    ]
    rejections: list[tuple[float, CiaReport]] = []
    diagnostics: list[str] = []
    evaluations = 0

    def evaluate(mw: float) -> CapacitySample:
        nonlocal evaluations
        report = cia_fn(mw)
        evaluations += 1
        sample = CapacitySample(mw=mw, decision=report.decision)
        samples.append(sample)
        history.append(sample)
        if report.decision == "reject":
            rejections.append((mw, report))
        return sample

    def finish(max_mw: float, fallback: bool) -> CapacityResult:
        boundary = None
        for mw, report in sorted(rejections, key=lambda t: t[0]):
            if mw >= max_mw:
                boundary = report
                break
        explanation = explain_rejection(boundary) if boundary else None
        return CapacityResult(
            bus=bus,
            ctype=ctype,
            max_approved_mw=max_mw,
            iterations=evaluations,
            samples=tuple(samples),
            boundary_reject=boundary,
            rejection_explanation=explanation,
            fallback_used=fallback,
            diagnostics=tuple(diagnostics),
            mw_min=mw_min,
            mw_max=mw_max,
            tol_mw=tol_mw,
        )

    def coarse_scan() -> CapacityResult:
        for mw in np.linspace(mw_min, mw_max, COARSE_SCAN_POINTS):
            evaluate(float(mw))
        approved = [s.mw for s in samples if s.approved]
        return finish(max(approved) if approved else 0.0, fallback=True)

    lo, hi = mw_min, mw_max
    while hi - lo > tol_mw:
        mid = (lo + hi) / 2.0
        sample = evaluate(mid)
        conflict = _contradiction(history)
        if conflict:
            diagnostics.extend(conflict)
            diagnostics.append("reverting to coarse range scan")
            return coarse_scan()
        if sample.approved:
            lo = mid
        else:
            hi = mid

    approved = [s.mw for s in samples if s.approved]
    if approved:
        return finish(max(approved), fallback=False)
    # nothing in the interior approved: settle the lower endpoint explicitly
    sample = evaluate(mw_min)
    return finish(mw_min if sample.approved else 0.0, fallback=False)


def find_best_bus_capacity(
    case: GridCase,
    ctype: str,
    mw_min: float = 0.0,
    mw_max: float = 500.0,
    tol_mw: float = 1.0,
    cfg: PipelineConfig = PipelineConfig(),
    buses: Sequence[int] | None = None,
    search_fn: Callable[[int], CapacityResult] | None = None,
) -> tuple[int, CapacityResult, dict[int, float]]:
    """Sweep candidate buses (all load-serving buses by default) and return
    the one with the largest approved capacity."""
    if buses is None:
        buses = sorted({l.bus for l in case.loads})
    if not buses:
        raise CapacitySearchError("no candidate buses to sweep")
    if search_fn is None:
        def search_fn(b: int) -> CapacityResult:
            return find_max_capacity(
                case, b, ctype, mw_min=mw_min, mw_max=mw_max, tol_mw=tol_mw, cfg=cfg
            )

    results = {b: search_fn(b) for b in buses}
    best_bus = max(results, key=lambda b: (results[b].max_approved_mw, -b))
    summary = {b: r.max_approved_mw for b, r in results.items()}
    return best_bus, results[best_bus], summary
