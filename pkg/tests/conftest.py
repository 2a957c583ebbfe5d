"""Shared fixtures: synthetic networks and independent oracles.

The oracle helpers here deliberately avoid the package's own matrix
construction so that tests check the implementation against a second,
element-by-element derivation.
"""

from __future__ import annotations

import cmath
import math

import numpy as np
import pytest

from gridcia.model import (
    Branch,
    Bus,
    Generator,
    GridCase,
    Load,
    Shunt,
    validate_case,
)


def make_case(name, buses, branches, generators=(), loads=(), shunts=(), base_mva=100.0):
    return validate_case(
        GridCase(
            name=name,
            base_mva=base_mva,
            buses=tuple(buses),
            branches=tuple(branches),
            generators=tuple(generators),
            loads=tuple(loads),
            shunts=tuple(shunts),
        )
    )


def independent_ybus(case) -> np.ndarray:
    """Per-branch scalar accumulation of the admittance matrix, written
    independently of gridcia.model.build_ybus."""
    n = len(case.buses)
    index = {b.id: i for i, b in enumerate(case.buses)}
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        z = complex(br.r, br.x)
        series = 1.0 / z
        shunt_half = complex(0.0, br.b_charging / 2.0)
        a = br.tap
        f, t = index[br.from_bus], index[br.to_bus]
        y[f, f] += (series + shunt_half) / (a * a)
        y[t, t] += series + shunt_half
        y[f, t] -= series / a
        y[t, f] -= series / a
    for sh in case.shunts:
        i = index[sh.bus]
        y[i, i] += complex(0.0, sh.q_mvar / case.base_mva)
    return y


def independent_injection_residual(case, solution) -> float:
    """Second derivation of the recomputed-injection mismatch (pu)."""
    y = independent_ybus(case)
    index = {b.id: i for i, b in enumerate(case.buses)}
    v = np.zeros(len(case.buses), dtype=complex)
    for bv in solution.bus_voltages:
        v[index[bv.bus]] = cmath.rect(bv.vm_pu, bv.va_rad)
    s_calc = v * np.conj(y @ v)
    spec = np.zeros(len(case.buses), dtype=complex)
    for g in case.generators:
        if g.in_service:
            spec[index[g.bus]] += complex(g.p_mw, g.q_mvar)
    for l in case.loads:
        spec[index[l.bus]] -= complex(l.p_mw, l.q_mvar)
    spec /= case.base_mva

    worst = 0.0
    regulated = {g.bus for g in case.generators if g.in_service}
    for i, bus in enumerate(case.buses):
        if bus.kind == "slack":
            continue
        worst = max(worst, abs(s_calc[i].real - spec[i].real))
        if not (bus.kind == "PV" and bus.id in regulated):
            worst = max(worst, abs(s_calc[i].imag - spec[i].imag))
    return worst


def two_bus_closed_form(v1, r, x, p_mw, q_mvar, base_mva=100.0):
    """Closed-form solution of the two-bus feeder: returns (vm2, va2_rad).

    With sending voltage v1 fixed and complex load S at the receiving end,
    the receiving-end voltage satisfies a quadratic in |V2|^2.
    """
    if r != 0:
        raise ValueError("closed form implemented for reactive branches only")
    p = p_mw / base_mva
    q = q_mvar / base_mva
    # |V2|^4 + (2Qx - V1^2)|V2|^2 + (P^2 + Q^2)x^2 = 0
    b = 2 * q * x - v1 * v1
    c = (p * p + q * q) * x * x
    disc = b * b - 4 * c
    if disc < 0:
        raise ValueError("no real solution; load beyond maximum transfer")
    a2 = (-b + math.sqrt(disc)) / 2.0
    vm2 = math.sqrt(a2)
    va2 = -math.asin(p * x / (v1 * vm2))
    return vm2, va2


@pytest.fixture
def two_bus():
    """Slack feeding one PQ load bus over a purely reactive branch."""
    return make_case(
        "two_bus",
        buses=[Bus(1, "slack", 1.0), Bus(2, "PQ", 1.0)],
        branches=[Branch(1, 1, 2, r=0.0, x=0.1)],
        generators=[Generator(1, 1, p_mw=0.0, p_max=1000.0, q_min=-1000, q_max=1000)],
        loads=[Load(1, 2, p_mw=100.0, q_mvar=0.0)],
    )


@pytest.fixture
def two_corridor():
    """Load served over two parallel corridors; rated so the base case
    survives any single outage but added load at bus 3 makes the outage of
    one corridor overload the survivor."""
    return make_case(
        "two_corridor",
        buses=[Bus(1, "slack", 1.0), Bus(2, "PQ", 1.0), Bus(3, "PQ", 1.0)],
        branches=[
            Branch(1, 1, 3, r=0.01, x=0.05, rate_a=80.0, rate_b=88.0),
            Branch(2, 1, 2, r=0.01, x=0.05, rate_a=80.0, rate_b=88.0),
            Branch(3, 2, 3, r=0.01, x=0.05, rate_a=80.0, rate_b=88.0),
        ],
        generators=[Generator(1, 1, p_mw=0.0, p_max=1000.0, q_min=-1000, q_max=1000)],
        loads=[Load(1, 3, p_mw=70.0, q_mvar=10.0)],
    )


@pytest.fixture
def redispatch_pair():
    """Two dispatchable units with opposing corridor sensitivities and one
    overloaded line at the starting dispatch."""
    return make_case(
        "redispatch_pair",
        buses=[
            Bus(1, "slack", 1.0),
            Bus(2, "PV", 1.0),
            Bus(3, "PV", 1.0),
            Bus(4, "PQ", 1.0),
        ],
        branches=[
            Branch(1, 2, 4, r=0.005, x=0.05, rate_a=60.0, rate_b=66.0),
            Branch(2, 3, 4, r=0.005, x=0.05, rate_a=160.0, rate_b=176.0),
            Branch(3, 1, 4, r=0.005, x=0.05, rate_a=200.0, rate_b=220.0),
        ],
        generators=[
            Generator(1, 1, p_mw=0.0, p_max=500.0, q_min=-500, q_max=500),
            Generator(2, 2, p_mw=100.0, p_min=0.0, p_max=120.0, q_min=-100, q_max=100),
            Generator(3, 3, p_mw=20.0, p_min=0.0, p_max=150.0, q_min=-100, q_max=100),
        ],
        loads=[Load(1, 4, p_mw=150.0, q_mvar=20.0)],
    )


@pytest.fixture
def weak_bus():
    """Remote load pocket behind a weak tie (|Y_22| = 1/x = 2.5 pu, so the
    short-circuit proxy is 250 MVA); local demand keeps the steady state
    healthy while the ratio screen stays binding for a 100 MW plant."""
    return make_case(
        "weak_bus",
        buses=[Bus(1, "slack", 1.0), Bus(2, "PQ", 1.0)],
        branches=[Branch(1, 1, 2, r=0.0, x=0.4)],
        generators=[Generator(1, 1, p_mw=0.0, p_max=1000.0, q_min=-1000, q_max=1000)],
        loads=[Load(1, 2, p_mw=95.0, q_mvar=10.0)],
    )


@pytest.fixture
def two_machine():
    """Small machine tied to a stiff system machine; a sustained fault at
    its terminal drives the pair out of step."""
    return make_case(
        "two_machine",
        buses=[Bus(1, "slack", 1.0), Bus(2, "PV", 1.0), Bus(3, "PQ", 1.0)],
        branches=[
            Branch(1, 1, 3, r=0.0, x=0.05),
            Branch(2, 2, 3, r=0.0, x=0.4),
        ],
        generators=[
            Generator(1, 1, p_mw=80.0, p_max=1000.0, q_min=-1000, q_max=1000,
                      mva_rating=1000.0),
            Generator(2, 2, p_mw=20.0, p_max=100.0, q_min=-100, q_max=100,
                      mva_rating=20.0),
        ],
        loads=[Load(1, 3, p_mw=100.0, q_mvar=5.0)],
    )
