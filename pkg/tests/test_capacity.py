"""Capacity bisection: boundary accuracy, budgets, fallback, explanations."""

import math
import random

import pytest

from gridcia.capacity import (
    CapacitySearchError,
    explain_rejection,
    find_best_bus_capacity,
    find_max_capacity,
)
from gridcia.model import ConnectionRequest, builtin_case
from gridcia.pipeline import CiaReport, PipelineConfig, StageReport, run_cia


def mock_cia(boundary, bus=1, ctype="load"):
    """Monotone assessment stub: approve iff mw <= boundary (closed set)."""

    def fn(mw):
        decision = "approve" if mw <= boundary else "reject"
        stages = (
            StageReport(stage="f1", outcome="pass"),
            StageReport(
                stage="f2",
                outcome="pass" if decision == "approve" else "fail",
                reasons=() if decision == "approve" else ("new_contingency_failures",),
                new_failures=() if decision == "approve" else ("branch:1",),
                new_failure_details=()
                if decision == "approve"
                else (("branch:1", ("branch", 1, "thermal", 120.0, 110.0)),),
            ),
        )
        return CiaReport(
            connection=ConnectionRequest(bus=bus, p_mw=mw, ctype=ctype),
            case_name="mock",
            stages=stages if decision == "reject" else stages[:1],
            decision=decision,
            reason_codes=() if decision == "approve" else ("new_contingency_failures",),
        )

    return fn


class TestBisection:
    def test_mock_boundary_137(self):
        result = find_max_capacity(
            None, bus=1, ctype="load", mw_min=0, mw_max=500, tol_mw=1.0,
            cia_fn=mock_cia(137.0),
        )
        assert abs(result.max_approved_mw - 137.0) <= 1.0
        assert result.iterations <= 9
        assert not result.fallback_used
        assert result.boundary_reject is not None
        assert result.boundary_reject.decision == "reject"

    def test_budget_on_default_range(self):
        result = find_max_capacity(
            None, bus=1, ctype="load", cia_fn=mock_cia(300.0)
        )
        assert result.iterations <= 9

    def test_twenty_randomized_monotone_oracles(self):
        rng = random.Random(20240817)
        for _ in range(20):
            boundary = rng.uniform(0.0, 500.0)
            result = find_max_capacity(
                None, bus=1, ctype="load", mw_min=0, mw_max=500, tol_mw=1.0,
                cia_fn=mock_cia(boundary),
            )
            assert abs(result.max_approved_mw - boundary) <= 1.0, boundary
            budget = math.ceil(math.log2(500.0 / 1.0)) + 2
            assert result.iterations <= budget

    def test_everything_rejected_returns_zero(self):
        result = find_max_capacity(
            None, bus=1, ctype="load", cia_fn=mock_cia(-1.0)
        )
        assert result.max_approved_mw == 0.0
        assert result.boundary_reject is not None
        assert result.rejection_explanation is not None

    def test_fully_feasible_range(self):
        result = find_max_capacity(
            None, bus=1, ctype="load", mw_min=0, mw_max=500, tol_mw=1.0,
            cia_fn=mock_cia(10_000.0),
        )
        assert result.max_approved_mw >= 499.0
        assert result.boundary_reject is None

    def test_interval_width_at_termination(self):
        result = find_max_capacity(
            None, bus=1, ctype="load", mw_min=0, mw_max=500, tol_mw=1.0,
            cia_fn=mock_cia(222.0),
        )
        approved = [s.mw for s in result.samples if s.approved]
        rejected = [s.mw for s in result.samples if not s.approved]
        assert min(rejected) - max(approved) <= 1.0

    def test_invalid_range(self):
        with pytest.raises(CapacitySearchError):
            find_max_capacity(None, 1, "load", mw_min=10, mw_max=5, cia_fn=mock_cia(1))
        with pytest.raises(CapacitySearchError):
            find_max_capacity(None, 1, "load", tol_mw=0, cia_fn=mock_cia(1))


class TestContradictionFallback:
    def test_seeded_approval_above_rejection_triggers_fallback(self):
        # an earlier study approved 30 MW; the fresh assessment rejects 20
        fn = mock_cia(10.0)
        result = find_max_capacity(
            None, bus=1, ctype="load", mw_min=0, mw_max=40, tol_mw=1.0,
            cia_fn=fn, seed_samples=[(30.0, "approve")],
        )
        assert result.fallback_used
        assert result.diagnostics
        assert any("contradiction" in d for d in result.diagnostics)
        # the fallback answer is a sampled, approved point, never interpolated
        approved = {s.mw for s in result.samples if s.approved}
        assert result.max_approved_mw in approved

    def test_ten_constructed_non_monotone_cases(self):
        rng = random.Random(7)
        for i in range(10):
            lo_boundary = rng.uniform(5, 15)
            seed_mw = rng.uniform(25, 39)
            result = find_max_capacity(
                None, bus=1, ctype="load", mw_min=0, mw_max=40, tol_mw=1.0,
                cia_fn=mock_cia(lo_boundary),
                seed_samples=[(seed_mw, "approve")],
            )
            assert result.fallback_used, i
            approved = {s.mw for s in result.samples if s.approved}
            assert result.max_approved_mw in approved

    def test_consistent_seed_never_falls_back(self):
        result = find_max_capacity(
            None, bus=1, ctype="load", mw_min=0, mw_max=40, tol_mw=1.0,
            cia_fn=mock_cia(10.0), seed_samples=[(5.0, "approve")],
        )
        assert not result.fallback_used


class TestRealCase:
    def test_two_bus_capacity_matches_linear_scan(self, two_bus):
        cfg = PipelineConfig(enable_contingency=False)
        result = find_max_capacity(
            two_bus, bus=2, ctype="load", mw_min=0, mw_max=200, tol_mw=1.0, cfg=cfg
        )
        # independent oracle: 1 MW linear scan over the same assessment
        boundary = 0.0
        mw = 0.0
        while mw <= 200.0:
            rep = run_cia(two_bus, ConnectionRequest(bus=2, p_mw=mw, ctype="load"), cfg)
            if rep.decision != "approve":
                break
            boundary = mw
            mw += 1.0
        assert abs(result.max_approved_mw - boundary) <= 1.0
        # the feasibility edge here is a borderline strip: the narrowing
        # samples are borderline, not hard rejections, so no boundary report
        assert any(s.decision == "borderline" for s in result.samples)
        assert (result.rejection_explanation is None) == (result.boundary_reject is None)

    def test_ieee14_search_runs_full_pipeline(self):
        case = builtin_case("ieee14")
        result = find_max_capacity(case, bus=14, ctype="load", mw_min=0,
                                   mw_max=100, tol_mw=1.0)
        assert 0.0 <= result.max_approved_mw <= 100.0
        assert result.iterations <= math.ceil(math.log2(100.0)) + 2
        for sample in result.samples:
            assert sample.decision in ("approve", "reject", "borderline")


class TestExplainRejection:
    def test_requires_rejection(self):
        report = mock_cia(100.0)(5.0)
        with pytest.raises(CapacitySearchError):
            explain_rejection(report)

    def test_f1_undervoltage_mapping(self, two_bus):
        cfg = PipelineConfig(enable_contingency=False)
        report = run_cia(two_bus, ConnectionRequest(bus=2, p_mw=250.0, ctype="load"), cfg)
        assert report.decision == "reject"
        exp = explain_rejection(report)
        assert exp.limiting_factor == "steady_state_violation"
        assert exp.failing_stages == ("f1",)
        assert any(el.startswith("bus:") and vtype == "undervoltage"
                   for el, vtype, *_ in exp.project_caused)

    def test_f2_new_failure_mapping(self, two_corridor):
        from gridcia.model import apply_connection

        cfg = PipelineConfig()
        # +35 MW keeps the base corridor inside its normal rating (f1 clean)
        # while the N-1 survivor overloads, so f2 is the first failing stage
        report = run_cia(
            two_corridor, ConnectionRequest(bus=3, p_mw=35.0, ctype="load"), cfg
        )
        assert report.decision == "reject"
        exp = explain_rejection(report)
        assert exp.limiting_factor == "contingency_failure"
        assert "f2" in exp.failing_stages
        assert exp.project_caused  # names the contingency

    def test_divergence_mapping(self, two_bus):
        cfg = PipelineConfig(enable_contingency=False)
        report = run_cia(two_bus, ConnectionRequest(bus=2, p_mw=5000.0, ctype="load"), cfg)
        exp = explain_rejection(report)
        assert exp.limiting_factor == "convergence_divergence"
        assert exp.project_caused == ()


class TestBestBus:
    def test_sweep_picks_strongest_bus(self, two_corridor):
        results = {2: 120.0, 3: 60.0}

        def fake_search(bus):
            return find_max_capacity(
                None, bus=bus, ctype="solar", mw_min=0, mw_max=200, tol_mw=1.0,
                cia_fn=mock_cia(results[bus], bus=bus, ctype="solar"),
            )

        best_bus, best, summary = find_best_bus_capacity(
            two_corridor, "solar", buses=[2, 3], search_fn=fake_search
        )
        assert best_bus == 2
        assert abs(best.max_approved_mw - 120.0) <= 1.0
        assert set(summary) == {2, 3}

    def test_defaults_to_load_serving_buses(self, two_corridor):
        seen = []

        def fake_search(bus):
            seen.append(bus)
            return find_max_capacity(
                None, bus=bus, ctype="load", mw_min=0, mw_max=10, tol_mw=1.0,
                cia_fn=mock_cia(5.0, bus=bus),
            )

        find_best_bus_capacity(two_corridor, "load", search_fn=fake_search)
        assert seen == [3]  # the only load-serving bus
