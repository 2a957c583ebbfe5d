"""Reference solver: AC power flow, outages, short-circuit proxy, redispatch,
and classical transient simulation.

The power flow is a full Newton-Raphson in polar form with PV->PQ switching
for generator reactive limits.  Non-convergence is always surfaced as a
result flag with the last iterate; a solved state is never fabricated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .model import (
    Branch,
    Generator,
    GridCase,
    build_ybus,
    connected_generator_ids,
)

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .inspector import LimitSet


class PowerFlowError(Exception):
    """Unrecoverable solver-contract violation (not mere non-convergence)."""


@dataclass(frozen=True)
class BusVoltage:
    bus: int
    vm_pu: float
    va_rad: float


@dataclass(frozen=True)
class BranchFlow:
    branch: int
    from_bus: int
    to_bus: int
    p_from_mw: float
    q_from_mvar: float
    p_to_mw: float
    q_to_mvar: float
    mva: float  # max of the two ends
    rate_a: float
    rate_b: float
    loading_pct: float  # vs rate_a; 0.0 when the branch is unrated

    def loading_vs(self, rating: float) -> float:
        return 0.0 if rating <= 0 else self.mva / rating * 100.0


@dataclass(frozen=True)
class PowerFlowSolution:
    converged: bool
    iterations: int
    bus_voltages: tuple[BusVoltage, ...]
    branch_flows: tuple[BranchFlow, ...]
    max_mismatch: float  # pu power
    diagnostic: str = ""
    slack_p_mw: float = 0.0
    slack_q_mvar: float = 0.0

    def voltage(self, bus: int) -> BusVoltage:
        return next(v for v in self.bus_voltages if v.bus == bus)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "max_mismatch": self.max_mismatch,
            "diagnostic": self.diagnostic,
            "bus_voltages": [vars(v).copy() for v in self.bus_voltages],
            "branch_flows": [vars(f).copy() for f in self.branch_flows],
        }


def _bus_injections(case: GridCase) -> np.ndarray:
    """Specified complex injections per bus (pu), generation minus load."""
    n = len(case.buses)
    s = np.zeros(n, dtype=complex)
    idx = case.bus_index
    for g in case.generators:
        if g.in_service:
            s[idx[g.bus]] += complex(g.p_mw, g.q_mvar)
    for l in case.loads:
        s[idx[l.bus]] -= complex(l.p_mw, l.q_mvar)
    return s / case.base_mva


def _gen_q_ranges(case: GridCase) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate reactive capability per bus (pu) over in-service units."""
    n = len(case.buses)
    qmin = np.zeros(n)
    qmax = np.zeros(n)
    idx = case.bus_index
    for g in case.generators:
        if g.in_service:
            qmin[idx[g.bus]] += g.q_min
            qmax[idx[g.bus]] += g.q_max
    return qmin / case.base_mva, qmax / case.base_mva


def _effective_kinds(case: GridCase) -> np.ndarray:
    """Bus kind codes (0=PQ, 1=PV, 2=slack); PV without a unit demotes to PQ."""
    has_gen = {g.bus for g in case.generators if g.in_service}
    codes = np.zeros(len(case.buses), dtype=int)
    for i, b in enumerate(case.buses):
        if b.kind == "slack":
            codes[i] = 2
        elif b.kind == "PV" and b.id in has_gen:
            codes[i] = 1
    return codes


def _branch_flows(case: GridCase, v: np.ndarray) -> tuple[BranchFlow, ...]:
    idx = case.bus_index
    flows = []
    for br in case.branches:
        if not br.in_service:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charging / 2.0
        vf, vt = v[i], v[j]
        i_from = (ys + bc) / br.tap**2 * vf - ys / br.tap * vt
        i_to = (ys + bc) * vt - ys / br.tap * vf
        s_from = vf * np.conj(i_from) * case.base_mva
        s_to = vt * np.conj(i_to) * case.base_mva
        mva = max(abs(s_from), abs(s_to))
        flows.append(
            BranchFlow(
                branch=br.id,
                from_bus=br.from_bus,
                to_bus=br.to_bus,
                p_from_mw=s_from.real,
                q_from_mvar=s_from.imag,
                p_to_mw=s_to.real,
                q_to_mvar=s_to.imag,
                mva=mva,
                rate_a=br.rate_a,
                rate_b=br.rate_b,
                loading_pct=0.0 if br.rate_a <= 0 else mva / br.rate_a * 100.0,
            )
        )
    return tuple(flows)


def solve_ac_powerflow(
    case: GridCase,
    tol: float = 1e-8,
    max_iter: int = 30,
    enforce_q_limits: bool = True,
) -> PowerFlowSolution:
    """Newton-Raphson AC power flow in polar coordinates.

    Returns a converged solution or a converged=False result carrying the
    last iterate and a diagnostic; it never raises on non-convergence.
    """
    if tol <= 0:
        raise PowerFlowError("tolerance must be positive")
    n = len(case.buses)
    ybus = sp.csr_matrix(build_ybus(case).matrix)
    s_spec = _bus_injections(case)
    kinds = _effective_kinds(case)
    qmin, qmax = _gen_q_ranges(case)
    q_load = np.zeros(n)
    for l in case.loads:
        q_load[case.bus_index[l.bus]] += l.q_mvar / case.base_mva

    vm = np.array([b.v_setpoint for b in case.buses], dtype=float)
    va = np.zeros(n)
    setpoints = vm.copy()

    # one PQ->PV restoration permitted per bus to avoid switch cycling
    switched_to_pq = np.zeros(n, dtype=bool)
    restored_once = np.zeros(n, dtype=bool)
    q_clamped = np.zeros(n)

    total_iters = 0
    diagnostic = ""

    for _outer in range(6):
        pv = np.flatnonzero((kinds == 1) & ~switched_to_pq)
        pq = np.flatnonzero((kinds == 0) | switched_to_pq)
        pvpq = np.concatenate([pv, pq])
        vm[pv] = setpoints[pv]
        vm[kinds == 2] = setpoints[kinds == 2]

        spec = s_spec.copy()
        clamped = np.flatnonzero(switched_to_pq)
        spec[clamped] = spec[clamped].real + 1j * (q_clamped[clamped] - q_load[clamped])

        converged = False
        for _it in range(max_iter):
            v = vm * np.exp(1j * va)
            mis = v * np.conj(ybus @ v) - spec
            f = np.concatenate([mis[pvpq].real, mis[pq].imag])
            max_mis = float(np.max(np.abs(f))) if f.size else 0.0
            if max_mis < tol:
                converged = True
                break
            total_iters += 1

            ibus = ybus @ v
            diag_v = sp.diags(v)
            diag_i = sp.diags(ibus)
            diag_vnorm = sp.diags(v / np.abs(v))
            ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
            ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
            j11 = ds_dva[np.ix_(pvpq, pvpq)].real
            j12 = ds_dvm[np.ix_(pvpq, pq)].real
            j21 = ds_dva[np.ix_(pq, pvpq)].imag
            j22 = ds_dvm[np.ix_(pq, pq)].imag
            jac = sp.vstack(
                [sp.hstack([j11, j12]), sp.hstack([j21, j22])], format="csc"
            )
            try:
                dx = spsolve(jac, -f)
            except RuntimeError as exc:
                diagnostic = f"singular Jacobian: {exc}"
                dx = None
            if dx is None or not np.all(np.isfinite(dx)):
                diagnostic = diagnostic or "singular Jacobian (non-finite step)"
                converged = False
                break
            va[pvpq] += dx[: len(pvpq)]
            vm[pq] += dx[len(pvpq):]

        if not converged:
            break
        if not enforce_q_limits:
            break

        # reactive-limit check on regulating PV buses
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(ybus @ v)
        q_gen = s_calc.imag + q_load
        changed = False
        for b in np.flatnonzero(kinds == 1):
            if not switched_to_pq[b]:
                if q_gen[b] > qmax[b] + 1e-7:
                    switched_to_pq[b] = True
                    q_clamped[b] = qmax[b]
                    changed = True
                elif q_gen[b] < qmin[b] - 1e-7:
                    switched_to_pq[b] = True
                    q_clamped[b] = qmin[b]
                    changed = True
            elif not restored_once[b]:
                # clamped high but voltage above setpoint (or vice versa):
                # the limit no longer binds, restore regulation once
                if (q_clamped[b] == qmax[b] and vm[b] > setpoints[b] + 1e-7) or (
                    q_clamped[b] == qmin[b] and vm[b] < setpoints[b] - 1e-7
                ):
                    switched_to_pq[b] = False
                    restored_once[b] = True
                    changed = True
        if not changed:
            break

    v = vm * np.exp(1j * va)
    mis = v * np.conj(ybus @ v) - spec
    pv = np.flatnonzero((kinds == 1) & ~switched_to_pq)
    pq = np.flatnonzero((kinds == 0) | switched_to_pq)
    pvpq = np.concatenate([pv, pq])
    f = np.concatenate([mis[pvpq].real, mis[pq].imag])
    max_mis = float(np.max(np.abs(f))) if f.size else 0.0
    if not converged and not diagnostic:
        diagnostic = f"no convergence after {max_iter} iterations (mismatch {max_mis:.3e} pu)"

    flows = _branch_flows(case, v)
    slack_i = int(np.flatnonzero(kinds == 2)[0])
    s_slack = (v * np.conj(ybus @ v))[slack_i] * case.base_mva
    # slack generation = net injection plus local load
    p_load = sum(l.p_mw for l in case.loads if l.bus == case.buses[slack_i].id)
    q_load_sl = sum(l.q_mvar for l in case.loads if l.bus == case.buses[slack_i].id)
    return PowerFlowSolution(
        converged=converged,
        iterations=total_iters,
        bus_voltages=tuple(
            BusVoltage(bus=b.id, vm_pu=float(vm[i]), va_rad=float(va[i]))
            for i, b in enumerate(case.buses)
        ),
        branch_flows=flows,
        max_mismatch=max_mis,
        diagnostic=diagnostic,
        slack_p_mw=float(s_slack.real + p_load),
        slack_q_mvar=float(s_slack.imag + q_load_sl),
    )


def residual_mismatch(case: GridCase, solution: PowerFlowSolution) -> float:
    """Independent oracle: recompute injections from the returned voltages
    and compare against the specified injections (pu).

    Active power is checked at every non-slack bus and reactive power at
    unregulated (PQ) buses; regulated buses supply whatever reactive power
    the solution requires, so their Q is not a specified quantity.
    """
    idx = case.bus_index
    y = build_ybus(case).matrix
    v = np.zeros(len(case.buses), dtype=complex)
    for bv in solution.bus_voltages:
        v[idx[bv.bus]] = bv.vm_pu * np.exp(1j * bv.va_rad)
    s_calc = v * np.conj(y @ v)
    s_spec = _bus_injections(case)
    kinds = _effective_kinds(case)

    worst = 0.0
    for i in range(len(case.buses)):
        if kinds[i] == 2:
            continue
        worst = max(worst, abs(s_calc[i].real - s_spec[i].real))
        if kinds[i] == 0:
            worst = max(worst, abs(s_calc[i].imag - s_spec[i].imag))
    return worst


# ---------------------------------------------------------------------------
# Outages
# ---------------------------------------------------------------------------

def parse_element_ref(element: str) -> tuple[str, int]:
    try:
        kind, num = element.split(":")
        return {"branch": "branch", "gen": "generator", "generator": "generator"}[kind], int(num)
    except (ValueError, KeyError):
        raise PowerFlowError(
            f"bad element reference {element!r}; expected 'branch:<id>' or 'gen:<id>'"
        ) from None


def _connected_from_slack(case: GridCase) -> set[int]:
    adj: dict[int, set[int]] = {b.id: set() for b in case.buses}
    for br in case.branches:
        if br.in_service:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    seen = {case.slack_bus.id}
    stack = [case.slack_bus.id]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def apply_outage(case: GridCase, element: str) -> GridCase:
    """Return a new case with the referenced element out of service.

    element is 'branch:<id>' or 'gen:<id>'.  Islanding caused by a branch
    outage is recorded in the case metadata; an island that strands load or
    generation marks the case non-solvable.
    """
    kind, num = parse_element_ref(element)
    if kind == "branch":
        target = next((b for b in case.branches if b.id == num), None)
        if target is None:
            raise PowerFlowError(f"unknown branch id {num}")
        if not target.in_service:
            raise PowerFlowError(f"branch {num} is already out of service")
        new = replace(
            case,
            branches=tuple(
                replace(b, in_service=False) if b.id == num else b for b in case.branches
            ),
        )
    else:
        target = next((g for g in case.generators if g.id == num), None)
        if target is None:
            raise PowerFlowError(f"unknown generator id {num}")
        if not target.in_service:
            raise PowerFlowError(f"generator {num} is already out of service")
        new = replace(
            case,
            generators=tuple(
                replace(g, in_service=False) if g.id == num else g for g in case.generators
            ),
        )
    new = new.with_metadata("outage", element=element)

    reachable = _connected_from_slack(new)
    islanded = [b.id for b in new.buses if b.id not in reachable]
    if islanded:
        strands = any(l.bus in islanded for l in new.loads) or any(
            g.bus in islanded and g.in_service for g in new.generators
        )
        new = new.with_metadata(
            "islanding", buses=islanded, non_solvable=strands
        )
    return new


def islanding_info(case: GridCase) -> dict | None:
    entries = case.metadata_entries("islanding")
    return entries[-1] if entries else None


# ---------------------------------------------------------------------------
# Short-circuit proxy
# ---------------------------------------------------------------------------

def short_circuit_proxy(case: GridCase, bus: int) -> float:
    """Screening-level short-circuit MVA: |Y_bb| * S_base (assumes ~1 pu)."""
    if not case.has_bus(bus):
        raise PowerFlowError(f"unknown bus {bus}")
    return build_ybus(case).diagonal_magnitude(bus) * case.base_mva


# ---------------------------------------------------------------------------
# Redispatch heuristic (the run_opf role)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RedispatchResult:
    converged: bool
    dispatch_changes: tuple[tuple[int, float], ...]  # (generator id, delta MW)
    post_solution: PowerFlowSolution
    residual_overloads: tuple[int, ...] = ()  # branch ids still over limit
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "dispatch_changes": [list(c) for c in self.dispatch_changes],
            "residual_overloads": list(self.residual_overloads),
            "post_solution": self.post_solution.to_dict(),
        }


def _dc_angle_sensitivities(case: GridCase, branch: Branch) -> dict[int, float]:
    """PTDF row: MW flow sensitivity of ``branch`` to injections at each bus
    (balanced at the slack)."""
    n = len(case.buses)
    idx = case.bus_index
    b_mat = np.zeros((n, n))
    for br in case.branches:
        if not br.in_service or br.x == 0:
            continue
        bb = 1.0 / br.x
        i, j = idx[br.from_bus], idx[br.to_bus]
        b_mat[i, i] += bb
        b_mat[j, j] += bb
        b_mat[i, j] -= bb
        b_mat[j, i] -= bb
    slack = idx[case.slack_bus.id]
    keep = [i for i in range(n) if i != slack]
    rhs = np.zeros(n)
    rhs[idx[branch.from_bus]] += 1.0 / branch.x
    rhs[idx[branch.to_bus]] -= 1.0 / branch.x
    theta_sens = np.zeros(n)
    try:
        theta_sens[keep] = np.linalg.solve(b_mat[np.ix_(keep, keep)], rhs[keep])
    except np.linalg.LinAlgError:
        return {}
    return {case.buses[i].id: float(theta_sens[i]) for i in range(n)}


def _thermal_overloads(
    solution: PowerFlowSolution, loading_max: float, regime: str
) -> list[tuple[BranchFlow, float]]:
    out = []
    for bf in solution.branch_flows:
        rate = bf.rate_a if regime == "NORMAL" else (bf.rate_b or bf.rate_a)
        if rate <= 0:
            continue
        loading = bf.mva / rate * 100.0
        if loading > loading_max:
            out.append((bf, loading))
    return out


def redispatch(case: GridCase, limits: "LimitSet", max_rounds: int = 20) -> RedispatchResult:
    """Sensitivity-guided pairwise generation shifts to clear thermal
    overloads; AC-verified each round.  Topology, taps and shunts are never
    touched, and no unit leaves its [p_min, p_max] window.
    """
    base = solve_ac_powerflow(case)
    if not base.converged:
        raise PowerFlowError(f"redispatch base case does not converge: {base.diagnostic}")

    current = case
    solution = base
    changes: dict[int, float] = {}
    rounds = 0
    slack_bus = case.slack_bus.id

    for _ in range(max_rounds):
        overloads = _thermal_overloads(solution, limits.loading_max, limits.regime)
        if not overloads:
            break
        rounds += 1
        worst_flow, worst_loading = max(overloads, key=lambda t: t[1])
        branch = next(b for b in current.branches if b.id == worst_flow.branch)
        sens = _dc_angle_sensitivities(current, branch)
        if not sens:
            break

        movable = [
            g
            for g in current.generators
            if g.in_service and g.bus != slack_bus and g.p_max > g.p_min
        ]
        direction = 1.0 if worst_flow.p_from_mw >= 0 else -1.0
        best: tuple[float, Generator, Generator] | None = None
        for g_up in movable:
            for g_dn in movable:
                if g_up.id == g_dn.id:
                    continue
                up_room = g_up.p_max - g_up.p_mw
                dn_room = g_dn.p_mw - g_dn.p_min
                if up_room < 1e-6 or dn_room < 1e-6:
                    continue
                eff = -direction * (sens.get(g_up.bus, 0.0) - sens.get(g_dn.bus, 0.0))
                if eff > 1e-4 and (best is None or eff > best[0]):
                    best = (eff, g_up, g_dn)
        if best is None:
            break
        eff, g_up, g_dn = best
        rate = worst_flow.rate_a if limits.regime == "NORMAL" else (
            worst_flow.rate_b or worst_flow.rate_a
        )
        target_mva = 0.98 * rate * limits.loading_max / 100.0
        needed = max(worst_flow.mva - target_mva, 0.0) / eff
        step = min(needed, g_up.p_max - g_up.p_mw, g_dn.p_mw - g_dn.p_min)
        if step < 1e-6:
            break

        def shifted(g: Generator) -> Generator:
            if g.id == g_up.id:
                return replace(g, p_mw=g.p_mw + step)
            if g.id == g_dn.id:
                return replace(g, p_mw=g.p_mw - step)
            return g

        candidate = replace(current, generators=tuple(shifted(g) for g in current.generators))
        cand_solution = solve_ac_powerflow(candidate)
        if not cand_solution.converged:
            break
        cand_over = _thermal_overloads(cand_solution, limits.loading_max, limits.regime)
        cand_worst = max((l for _, l in cand_over), default=0.0)
        if cand_worst >= worst_loading - 1e-9:
            break  # no progress; stop with residual overloads
        current = candidate
        solution = cand_solution
        changes[g_up.id] = changes.get(g_up.id, 0.0) + step
        changes[g_dn.id] = changes.get(g_dn.id, 0.0) - step

    residual = tuple(
        bf.branch for bf, _ in _thermal_overloads(solution, limits.loading_max, limits.regime)
    )
    return RedispatchResult(
        converged=solution.converged,
        dispatch_changes=tuple(sorted(changes.items())),
        post_solution=solution,
        residual_overloads=residual,
        iterations=rounds,
    )


# ---------------------------------------------------------------------------
# Classical transient simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FaultSpec:
    bus: int
    t_on_s: float = 0.1
    t_off_s: float = 0.2
    kind: str = "three_phase_ground"

    def __post_init__(self):
        if self.t_on_s < 0 or self.t_off_s < self.t_on_s:
            raise ValueError("fault window must satisfy 0 <= t_on <= t_off")


@dataclass(frozen=True)
class MachineParams:
    """Classical-model constants applied to every synchronous unit
    (the bundled cases carry no dynamic data)."""

    inertia_h_s: float = 4.0
    damping_pu: float = 1.0
    xd_prime_pu: float = 0.2  # on machine base
    fault_susceptance_pu: float = -1000.0


@dataclass(frozen=True)
class TransientResult:
    completed: bool
    horizon_s: float
    final_angle_spread_rad: float
    machine_ids: tuple[int, ...]
    t_s: tuple[float, ...]
    angles_rad: tuple[tuple[float, ...], ...]  # per sample, per machine
    speeds_rad_s: tuple[tuple[float, ...], ...]
    failure_time_s: float | None = None

    def to_dict(self) -> dict:
        return {
            "completed": self.completed,
            "horizon_s": self.horizon_s,
            "final_angle_spread_rad": self.final_angle_spread_rad,
            "machine_ids": list(self.machine_ids),
            "failure_time_s": self.failure_time_s,
        }


def _kron_reduce(y_full: np.ndarray, internal: np.ndarray) -> np.ndarray:
    keep = internal
    elim = np.setdiff1d(np.arange(y_full.shape[0]), keep)
    y_ii = y_full[np.ix_(keep, keep)]
    y_ib = y_full[np.ix_(keep, elim)]
    y_bb = y_full[np.ix_(elim, elim)]
    y_bi = y_full[np.ix_(elim, keep)]
    return y_ii - y_ib @ np.linalg.solve(y_bb, y_bi)


def run_transient(
    case: GridCase,
    fault: FaultSpec,
    horizon_s: float = 10.0,
    dt_s: float = 0.005,
    params: MachineParams = MachineParams(),
) -> TransientResult:
    """Swing-equation screen: classical machines behind x'd, constant
    impedance loads, three-phase fault applied as a large shunt admittance.

    Inverter-based connections recorded in the case metadata are treated as
    static injections, not swing machines.
    """
    if not case.has_bus(fault.bus):
        raise PowerFlowError(f"unknown fault bus {fault.bus}")
    if fault.t_off_s > horizon_s:
        raise PowerFlowError("fault clearing time exceeds the horizon")
    sol = solve_ac_powerflow(case)
    if not sol.converged:
        raise PowerFlowError(f"transient base case does not converge: {sol.diagnostic}")

    idx = case.bus_index
    n = len(case.buses)
    v = np.zeros(n, dtype=complex)
    for bv in sol.bus_voltages:
        v[idx[bv.bus]] = bv.vm_pu * np.exp(1j * bv.va_rad)

    ibr_ids = connected_generator_ids(case, ibr_only=True)
    machines = [
        g
        for g in case.generators
        if g.in_service and g.id not in ibr_ids and g.mva_rating > 0
    ]
    if not machines:
        raise PowerFlowError("case has no synchronous machines to simulate")

    # net complex injection at each bus, then split: machine buses keep the
    # machine output; everything else converts to constant shunt admittance
    s_calc = v * np.conj(build_ybus(case).matrix @ v)
    q_load = np.zeros(n)
    p_load = np.zeros(n)
    for l in case.loads:
        p_load[idx[l.bus]] += l.p_mw / case.base_mva
        q_load[idx[l.bus]] += l.q_mvar / case.base_mva

    machine_bus_idx = np.array(sorted({idx[g.bus] for g in machines}))
    # allocate bus-level reactive output among co-located units by rating
    bus_gen_q = {}
    gen_p = {}
    for i in machine_bus_idx:
        bus_gen_q[i] = float(s_calc[i].imag + q_load[i])
    for g in machines:
        gen_p[g.id] = g.p_mw / case.base_mva
    non_machine_inj = s_calc.copy()
    # injections attributable to machines are removed before load conversion
    for i in machine_bus_idx:
        at_bus = [g for g in machines if idx[g.bus] == i]
        p_here = sum(gen_p[g.id] for g in at_bus)
        non_machine_inj[i] -= complex(p_here, bus_gen_q[i])

    m = len(machines)
    y_aug = np.zeros((n + m, n + m), dtype=complex)
    y_aug[:n, :n] = build_ybus(case).matrix
    for i in range(n):
        if abs(v[i]) > 0:
            y_aug[i, i] += np.conj(-non_machine_inj[i]) / abs(v[i]) ** 2

    e_mag = np.zeros(m)
    delta0 = np.zeros(m)
    p_m = np.zeros(m)
    h_sys = np.zeros(m)
    for k, g in enumerate(machines):
        i = idx[g.bus]
        xd = params.xd_prime_pu * case.base_mva / g.mva_rating
        rating_here = sum(x.mva_rating for x in machines if idx[x.bus] == i)
        q_share = bus_gen_q[i] * g.mva_rating / rating_here
        s_g = complex(gen_p[g.id], q_share)
        i_g = np.conj(s_g / v[i])
        e = v[i] + 1j * xd * i_g
        e_mag[k] = abs(e)
        delta0[k] = np.angle(e)
        p_m[k] = gen_p[g.id]
        h_sys[k] = params.inertia_h_s * g.mva_rating / case.base_mva
        y_m = 1.0 / (1j * xd)
        y_aug[i, i] += y_m
        y_aug[n + k, n + k] += y_m
        y_aug[i, n + k] -= y_m
        y_aug[n + k, i] -= y_m

    internal = np.arange(n, n + m)
    y_pre = _kron_reduce(y_aug, internal)
    y_flt_full = y_aug.copy()
    y_flt_full[idx[fault.bus], idx[fault.bus]] += 1j * params.fault_susceptance_pu
    y_fault = _kron_reduce(y_flt_full, internal)

    omega_s = 2 * math.pi * 60.0
    m_coef = 2 * h_sys / omega_s

    def derivs(delta: np.ndarray, dw: np.ndarray, y_red: np.ndarray):
        e = e_mag * np.exp(1j * delta)
        p_e = np.real(e * np.conj(y_red @ e))
        return dw, (p_m - p_e - params.damping_pu * dw / omega_s) / m_coef

    steps = int(round(horizon_s / dt_s))
    delta = delta0.copy()
    dw = np.zeros(m)
    sample_every = max(1, steps // 400)
    t_samples = [0.0]
    angle_samples = [tuple(delta)]
    speed_samples = [tuple(dw)]
    failure_time = None

    for step in range(steps):
        t = step * dt_s
        in_fault = fault.t_on_s <= t < fault.t_off_s and fault.t_off_s > fault.t_on_s
        y_red = y_fault if in_fault else y_pre
        k1d, k1w = derivs(delta, dw, y_red)
        k2d, k2w = derivs(delta + 0.5 * dt_s * k1d, dw + 0.5 * dt_s * k1w, y_red)
        k3d, k3w = derivs(delta + 0.5 * dt_s * k2d, dw + 0.5 * dt_s * k2w, y_red)
        k4d, k4w = derivs(delta + dt_s * k3d, dw + dt_s * k3w, y_red)
        delta = delta + dt_s / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
        dw = dw + dt_s / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
        if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(dw))):
            failure_time = t + dt_s
            break
        if (step + 1) % sample_every == 0 or step == steps - 1:
            t_samples.append(t + dt_s)
            angle_samples.append(tuple(float(d) for d in delta))
            speed_samples.append(tuple(float(w) for w in dw))

    completed = failure_time is None
    spread = float(np.max(delta) - np.min(delta)) if completed else math.inf
    return TransientResult(
        completed=completed,
        horizon_s=horizon_s,
        final_angle_spread_rad=spread,
        machine_ids=tuple(g.id for g in machines),
        t_s=tuple(t_samples),
        angles_rad=tuple(angle_samples),
        speeds_rad_s=tuple(speed_samples),
        failure_time_s=failure_time,
    )
