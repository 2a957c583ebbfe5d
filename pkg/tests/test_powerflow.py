"""Power-flow engine: solver, outages, short-circuit proxy, redispatch,
transient simulation."""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from gridcia.inspector import default_limits
from gridcia.model import (
    Branch,
    Bus,
    Generator,
    Load,
    builtin_case,
    case_to_dict,
)
from gridcia.powerflow import (
    FaultSpec,
    PowerFlowError,
    apply_outage,
    islanding_info,
    redispatch,
    residual_mismatch,
    run_transient,
    short_circuit_proxy,
    solve_ac_powerflow,
)

from conftest import (
    independent_injection_residual,
    independent_ybus,
    make_case,
    two_bus_closed_form,
)


class TestSolve:
    def test_no_load_network_is_flat(self, two_bus):
        unloaded = replace(two_bus, loads=())
        sol = solve_ac_powerflow(unloaded)
        assert sol.converged
        assert sol.iterations <= 2
        v2 = sol.voltage(2)
        assert v2.vm_pu == pytest.approx(1.0, abs=1e-10)
        assert v2.va_rad == pytest.approx(0.0, abs=1e-10)
        assert all(abs(f.p_from_mw) < 1e-7 for f in sol.branch_flows)

    def test_two_bus_matches_closed_form(self, two_bus):
        sol = solve_ac_powerflow(two_bus)
        vm_ref, va_ref = two_bus_closed_form(1.0, 0.0, 0.1, 100.0, 0.0)
        v2 = sol.voltage(2)
        assert sol.converged
        assert v2.vm_pu == pytest.approx(vm_ref, abs=1e-8)
        assert v2.va_rad == pytest.approx(va_ref, abs=1e-8)

    @pytest.mark.parametrize("name", ["ieee14", "ieee30", "ieee57", "ieee118"])
    def test_builtin_cases_converge(self, name):
        case = builtin_case(name)
        start = time.perf_counter()
        sol = solve_ac_powerflow(case)
        elapsed = time.perf_counter() - start
        assert sol.converged
        assert elapsed < 1.0
        assert residual_mismatch(case, sol) < 1e-6
        # second, independent derivation of the same residual
        assert independent_injection_residual(case, sol) < 1e-6

    def test_determinism(self):
        case = builtin_case("ieee57")
        a = solve_ac_powerflow(case)
        b = solve_ac_powerflow(case)
        assert a == b

    def test_infeasible_load_reports_divergence(self, two_bus):
        heavy = replace(
            two_bus, loads=(Load(1, 2, p_mw=2000.0, q_mvar=500.0),)
        )
        sol = solve_ac_powerflow(heavy)
        assert not sol.converged
        assert sol.diagnostic
        assert sol.max_mismatch > 0

    def test_loading_percent_definition(self, two_corridor):
        sol = solve_ac_powerflow(two_corridor)
        for bf in sol.branch_flows:
            assert bf.loading_pct == pytest.approx(bf.mva / bf.rate_a * 100.0)


class TestQLimits:
    def test_pv_switches_to_pq_at_limit(self):
        # tiny Q window forces the PV bus off its setpoint
        case = make_case(
            "qlim",
            buses=[Bus(1, "slack", 1.0), Bus(2, "PV", 1.05), Bus(3, "PQ", 1.0)],
            branches=[
                Branch(1, 1, 3, r=0.01, x=0.1),
                Branch(2, 2, 3, r=0.01, x=0.1),
            ],
            generators=[
                Generator(1, 1, 0.0, p_max=500.0, q_min=-500, q_max=500),
                Generator(2, 2, 50.0, p_max=100.0, q_min=-5.0, q_max=5.0),
            ],
            loads=[Load(1, 3, p_mw=80.0, q_mvar=40.0)],
        )
        sol = solve_ac_powerflow(case)
        assert sol.converged
        assert sol.voltage(2).vm_pu < 1.05 - 1e-6
        unlimited = solve_ac_powerflow(case, enforce_q_limits=False)
        assert unlimited.voltage(2).vm_pu == pytest.approx(1.05)


class TestOutage:
    def test_radial_outage_islands(self, two_bus):
        out = apply_outage(two_bus, "branch:1")
        info = islanding_info(out)
        assert info is not None
        assert info["buses"] == [2]
        assert info["non_solvable"] is True

    def test_parallel_outage_keeps_connectivity(self, two_corridor):
        out = apply_outage(two_corridor, "branch:1")
        assert islanding_info(out) is None
        assert solve_ac_powerflow(out).converged

    def test_unknown_element(self, two_bus):
        with pytest.raises(PowerFlowError, match="unknown branch"):
            apply_outage(two_bus, "branch:42")
        with pytest.raises(PowerFlowError, match="element reference"):
            apply_outage(two_bus, "line-1")

    def test_restore_roundtrip(self, two_corridor):
        out = apply_outage(two_corridor, "branch:2")
        restored = replace(
            out,
            branches=tuple(
                replace(b, in_service=True) if b.id == 2 else b for b in out.branches
            ),
            metadata=(),
        )
        assert case_to_dict(restored) == case_to_dict(two_corridor)

    def test_generator_outage(self, two_machine):
        out = apply_outage(two_machine, "gen:2")
        assert not out.generators[1].in_service
        assert solve_ac_powerflow(out).converged


class TestShortCircuitProxy:
    def test_direct_product(self):
        case = make_case(
            "sc",
            buses=[Bus(1, "slack", 1.0), Bus(2, "PQ", 1.0)],
            branches=[Branch(1, 1, 2, r=0.0, x=0.05)],
            generators=[Generator(1, 1, 0.0, p_max=10.0)],
        )
        assert short_circuit_proxy(case, 2) == pytest.approx(2000.0)

    def test_isolated_bus_is_zero(self):
        case = make_case(
            "isolated",
            buses=[Bus(1, "slack", 1.0), Bus(2, "PQ", 1.0), Bus(3, "PQ", 1.0)],
            branches=[Branch(1, 1, 2, r=0.0, x=0.1, in_service=True),
                      Branch(2, 2, 3, r=0.0, x=0.1, in_service=False)],
            generators=[Generator(1, 1, 0.0, p_max=10.0)],
        )
        assert short_circuit_proxy(case, 3) == 0.0

    def test_ieee14_matches_independent_accumulation(self):
        case = builtin_case("ieee14")
        oracle = independent_ybus(case)
        assert short_circuit_proxy(case, 1) == pytest.approx(
            abs(oracle[0, 0]) * 100.0, rel=1e-12
        )


class TestRedispatch:
    def test_no_overload_is_fixed_point(self, two_corridor):
        result = redispatch(two_corridor, default_limits("NORMAL"))
        assert result.converged
        assert result.dispatch_changes == ()
        assert result.residual_overloads == ()

    def test_overload_relief_is_monotone(self, redispatch_pair):
        limits = default_limits("NORMAL")
        base = solve_ac_powerflow(redispatch_pair)
        base_worst = max(f.loading_pct for f in base.branch_flows)
        assert base_worst > 100.0  # fixture starts overloaded
        result = redispatch(redispatch_pair, limits)
        post_worst = max(f.loading_pct for f in result.post_solution.branch_flows)
        assert post_worst < base_worst
        assert result.residual_overloads == ()
        # pairwise shifts balance and respect generator windows
        total = sum(d for _, d in result.dispatch_changes)
        assert total == pytest.approx(0.0, abs=1e-9)
        moved = dict(result.dispatch_changes)
        for gen in redispatch_pair.generators:
            final = gen.p_mw + moved.get(gen.id, 0.0)
            assert gen.p_min - 1e-9 <= final <= gen.p_max + 1e-9

    def test_non_converged_base_raises(self, two_bus):
        heavy = replace(two_bus, loads=(Load(1, 2, p_mw=2000.0, q_mvar=500.0),))
        with pytest.raises(PowerFlowError, match="converge"):
            redispatch(heavy, default_limits("NORMAL"))


class TestTransient:
    def test_no_fault_stays_at_equilibrium(self, two_machine):
        fault = FaultSpec(bus=3, t_on_s=0.1, t_off_s=0.1)
        result = run_transient(two_machine, fault, horizon_s=2.0)
        assert result.completed
        first = np.array(result.angles_rad[0])
        spread0 = float(first.max() - first.min())
        assert abs(result.final_angle_spread_rad - spread0) < 1e-6

    def test_cleared_fault_on_ieee14_passes(self):
        case = builtin_case("ieee14")
        fault = FaultSpec(bus=14, t_on_s=0.1, t_off_s=0.2)
        result = run_transient(case, fault, horizon_s=10.0, dt_s=0.005)
        assert result.completed
        assert result.final_angle_spread_rad <= 2 * math.pi
        # pass/fail agrees with a half-step rerun
        finer = run_transient(case, fault, horizon_s=10.0, dt_s=0.0025)
        assert finer.completed
        assert (finer.final_angle_spread_rad <= 2 * math.pi) == (
            result.final_angle_spread_rad <= 2 * math.pi
        )

    def test_sustained_fault_loses_synchronism(self, two_machine):
        fault = FaultSpec(bus=2, t_on_s=0.1, t_off_s=5.0)
        result = run_transient(two_machine, fault, horizon_s=5.0)
        spread = result.final_angle_spread_rad
        assert (not result.completed) or spread > 2 * math.pi
        # long-integration oracle: the verdict persists over a longer run
        longer = run_transient(two_machine, FaultSpec(bus=2, t_on_s=0.1, t_off_s=8.0),
                               horizon_s=8.0)
        assert (not longer.completed) or longer.final_angle_spread_rad > 2 * math.pi

    def test_unknown_fault_bus(self, two_machine):
        with pytest.raises(PowerFlowError, match="unknown fault bus"):
            run_transient(two_machine, FaultSpec(bus=99), horizon_s=1.0)

    def test_bad_fault_window(self):
        with pytest.raises(ValueError):
            FaultSpec(bus=1, t_on_s=0.3, t_off_s=0.2)
