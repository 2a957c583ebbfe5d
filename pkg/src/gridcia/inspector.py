"""Solver-agnostic violation detection against configurable limit sets.

Every bus voltage is screened against the regime's band and every in-service
branch against the regime's thermal rating (normal rating under NORMAL,
emergency rating under EMERGENCY).  Violations within the tolerance band of
the limit are classified borderline rather than hard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .powerflow import PowerFlowSolution

REGIMES = ("NORMAL", "EMERGENCY")


class InspectionError(Exception):
    """Raised when a violation scan would be meaningless (e.g. diverged PF)."""


@dataclass(frozen=True)
class ToleranceBands:
    """Half-width of the borderline classification band around each limit."""

    voltage_pu: float = 0.01
    loading_pct: float = 5.0


@dataclass(frozen=True)
class LimitSet:
    v_min: float
    v_max: float
    loading_max: float  # percent of the applicable rating
    angle_diff_max: float | None = None  # degrees; None disables the check
    regime: str = "NORMAL"

    def __post_init__(self):
        if self.v_min >= self.v_max:
            raise ValueError("v_min must be below v_max")
        if self.loading_max <= 0:
            raise ValueError("loading_max must be positive")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")

    def to_dict(self) -> dict:
        return {
            "v_min": self.v_min,
            "v_max": self.v_max,
            "loading_max": self.loading_max,
            "angle_diff_max": self.angle_diff_max,
            "regime": self.regime,
        }


def default_limits(regime: str) -> LimitSet:
    """Planning screening limits: 0.95-1.05 pu / 100% normal,
    0.90-1.10 pu / 110% emergency; angle screening disabled."""
    if regime == "NORMAL":
        return LimitSet(v_min=0.95, v_max=1.05, loading_max=100.0, regime="NORMAL")
    if regime == "EMERGENCY":
        return LimitSet(v_min=0.90, v_max=1.10, loading_max=110.0, regime="EMERGENCY")
    raise ValueError(f"regime must be one of {REGIMES}")


@dataclass(frozen=True)
class Violation:
    element_kind: str  # "bus" | "branch"
    element_id: int
    vtype: str  # undervoltage | overvoltage | thermal | angle_difference
    observed: float
    limit: float
    margin_pct: float  # negative means violated
    severity: str  # "hard" | "borderline"

    def key(self) -> tuple[str, int, str]:
        return (self.element_kind, self.element_id, self.vtype)

    def to_dict(self) -> dict:
        return vars(self).copy()


@dataclass(frozen=True)
class ViolationReport:
    violations: tuple[Violation, ...]
    hard_count: int
    borderline_count: int
    limits_used: LimitSet
    buses_checked: int = 0
    branches_checked: int = 0

    @property
    def clean(self) -> bool:
        return not self.violations

    def worst_margin_pct(self) -> float | None:
        if not self.violations:
            return None
        return min(v.margin_pct for v in self.violations)

    def to_dict(self) -> dict:
        return {
            "violations": [v.to_dict() for v in self.violations],
            "hard_count": self.hard_count,
            "borderline_count": self.borderline_count,
            "limits_used": self.limits_used.to_dict(),
            "buses_checked": self.buses_checked,
            "branches_checked": self.branches_checked,
        }


def _make_report(violations: list[Violation], limits: LimitSet,
                 buses: int, branches: int) -> ViolationReport:
    hard = sum(1 for v in violations if v.severity == "hard")
    return ViolationReport(
        violations=tuple(violations),
        hard_count=hard,
        borderline_count=len(violations) - hard,
        limits_used=limits,
        buses_checked=buses,
        branches_checked=branches,
    )


def inspect(
    solution: "PowerFlowSolution",
    limits: LimitSet,
    bands: ToleranceBands = ToleranceBands(),
) -> ViolationReport:
    """Evaluate a converged power-flow solution against a limit set."""
    if not solution.converged:
        raise InspectionError(
            "cannot inspect a non-converged solution; report the divergence "
            "instead of an empty violation list"
        )
    violations: list[Violation] = []

    for bv in solution.bus_voltages:
        if bv.vm_pu < limits.v_min:
            gap = limits.v_min - bv.vm_pu
            violations.append(
                Violation(
                    element_kind="bus",
                    element_id=bv.bus,
                    vtype="undervoltage",
                    observed=bv.vm_pu,
                    limit=limits.v_min,
                    margin_pct=(bv.vm_pu - limits.v_min) / limits.v_min * 100.0,
                    severity="borderline" if gap <= bands.voltage_pu else "hard",
                )
            )
        elif bv.vm_pu > limits.v_max:
            gap = bv.vm_pu - limits.v_max
            violations.append(
                Violation(
                    element_kind="bus",
                    element_id=bv.bus,
                    vtype="overvoltage",
                    observed=bv.vm_pu,
                    limit=limits.v_max,
                    margin_pct=(limits.v_max - bv.vm_pu) / limits.v_max * 100.0,
                    severity="borderline" if gap <= bands.voltage_pu else "hard",
                )
            )

    for bf in solution.branch_flows:
        rating = bf.rate_a if limits.regime == "NORMAL" else (bf.rate_b or bf.rate_a)
        if rating > 0:
            loading = bf.mva / rating * 100.0
            if loading > limits.loading_max:
                over = loading - limits.loading_max
                violations.append(
                    Violation(
                        element_kind="branch",
                        element_id=bf.branch,
                        vtype="thermal",
                        observed=loading,
                        limit=limits.loading_max,
                        margin_pct=(limits.loading_max - loading) / limits.loading_max * 100.0,
                        severity="borderline" if over <= bands.loading_pct else "hard",
                    )
                )

    if limits.angle_diff_max is not None:
        by_bus = {bv.bus: bv.va_rad for bv in solution.bus_voltages}
        for bf in solution.branch_flows:
            spread = abs(math.degrees(by_bus[bf.from_bus] - by_bus[bf.to_bus]))
            if spread > limits.angle_diff_max:
                violations.append(
                    Violation(
                        element_kind="branch",
                        element_id=bf.branch,
                        vtype="angle_difference",
                        observed=spread,
                        limit=limits.angle_diff_max,
                        margin_pct=(limits.angle_diff_max - spread)
                        / limits.angle_diff_max * 100.0,
                        severity="hard",
                    )
                )

    return _make_report(
        violations,
        limits,
        buses=len(solution.bus_voltages),
        branches=len(solution.branch_flows),
    )
