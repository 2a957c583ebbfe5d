"""Network data model: case parsing, admittance construction, case mutation.

The case format is a plain-text subset of the MATPOWER format covering the
``baseMVA``, ``bus``, ``gen`` and ``branch`` tables.  ``gencost`` tables are
ignored with a warning; phase-shifting transformers and conductance shunts
are rejected as unsupported.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources

import numpy as np

CONNECTION_TYPES = ("load", "solar", "wind", "bess", "hybrid", "synchronous")
IBR_TYPES = frozenset({"solar", "wind", "bess", "hybrid"})
BUILTIN_CASES = ("ieee14", "ieee30", "ieee57", "ieee118")

# Reactive power assumed for load connections (planning convention; the
# request carries MW only).
LOAD_POWER_FACTOR = 0.95


class CaseError(Exception):
    """Base error for case construction and parsing."""


class CaseSyntaxError(CaseError):
    """Malformed case text. Carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class CaseSemanticError(CaseError):
    """Structurally valid text describing an inconsistent network."""


class CaseFormatWarning(UserWarning):
    """Recoverable case-file oddity (e.g. an ignored gencost table)."""


class UnknownBusError(CaseError):
    """An operation referenced a bus id that is not part of the case."""

    def __init__(self, bus: int, case: "GridCase"):
        ids = case.bus_ids
        super().__init__(
            f"bus {bus} not present in case '{case.name}' "
            f"(valid ids: {ids[0]}..{ids[-1]}, {len(ids)} buses)"
        )
        self.bus = bus


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # "slack" | "PV" | "PQ"
    v_setpoint: float
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    rate_a: float = 0.0  # MVA, 0 = unlimited
    rate_b: float = 0.0  # MVA, 0 = unlimited
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_mw: float
    q_mvar: float = 0.0
    p_min: float = 0.0
    p_max: float = 0.0
    q_min: float = 0.0
    q_max: float = 0.0
    mva_rating: float = 100.0
    in_service: bool = True


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p_mw: float
    q_mvar: float = 0.0


@dataclass(frozen=True)
class Shunt:
    id: int
    bus: int
    q_mvar: float  # capacitive positive


@dataclass(frozen=True)
class ConnectionRequest:
    """A proposed connection: bus, active power, resource type, IBR flag."""

    bus: int
    p_mw: float
    ctype: str
    is_ibr: bool = field(init=False)

    def __post_init__(self):
        if self.ctype not in CONNECTION_TYPES:
            raise ValueError(
                f"unknown connection type {self.ctype!r}; "
                f"expected one of {', '.join(CONNECTION_TYPES)}"
            )
        if self.p_mw < 0:
            raise ValueError("connection p_mw must be >= 0")
        object.__setattr__(self, "is_ibr", self.ctype in IBR_TYPES)


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Dense bus admittance matrix with external-id lookup helpers."""

    bus_ids: tuple[int, ...]
    matrix: np.ndarray  # complex, dimension x dimension

    @property
    def dimension(self) -> int:
        return len(self.bus_ids)

    @cached_property
    def _index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.bus_ids)}

    def entry(self, from_bus: int, to_bus: int) -> complex:
        return complex(self.matrix[self._index[from_bus], self._index[to_bus]])

    def diagonal_magnitude(self, bus: int) -> float:
        i = self._index[bus]
        return float(abs(self.matrix[i, i]))


@dataclass(frozen=True)
class GridCase:
    """Immutable network model. All mutation helpers return new cases."""

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    shunts: tuple[Shunt, ...]
    metadata: tuple[tuple[str, str], ...] = ()

    @cached_property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        """External bus id -> dense matrix index (file order)."""
        return {b.id: i for i, b in enumerate(self.buses)}

    def bus(self, bus_id: int) -> Bus:
        try:
            return self.buses[self.bus_index[bus_id]]
        except KeyError:
            raise UnknownBusError(bus_id, self) from None

    def has_bus(self, bus_id: int) -> bool:
        return bus_id in self.bus_index

    @property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind == "slack")

    def with_metadata(self, kind: str, **payload) -> "GridCase":
        entry = (kind, json.dumps(payload, sort_keys=True))
        return replace(self, metadata=self.metadata + (entry,))

    def metadata_entries(self, kind: str) -> list[dict]:
        return [json.loads(p) for k, p in self.metadata if k == kind]


def validate_case(case: GridCase) -> GridCase:
    """Check the GridCase invariants; returns the case for chaining."""
    if case.base_mva <= 0:
        raise CaseSemanticError("base_mva must be positive")
    seen = set()
    for bus in case.buses:
        if bus.id in seen:
            raise CaseSemanticError(f"duplicate bus id {bus.id}")
        seen.add(bus.id)
        if bus.v_setpoint <= 0:
            raise CaseSemanticError(f"bus {bus.id}: v_setpoint must be > 0")
        if bus.kind not in ("slack", "PV", "PQ"):
            raise CaseSemanticError(f"bus {bus.id}: unknown kind {bus.kind!r}")
    slack = [b for b in case.buses if b.kind == "slack"]
    if len(slack) != 1:
        raise CaseSemanticError(f"expected exactly one slack bus, found {len(slack)}")
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                raise CaseSemanticError(
                    f"branch {br.id} references unknown bus {end}"
                )
        if br.r == 0 and br.x == 0:
            raise CaseSemanticError(f"branch {br.id}: r and x are both zero")
        if not (math.isfinite(br.r) and math.isfinite(br.x)):
            raise CaseSemanticError(f"branch {br.id}: non-finite impedance")
        if br.rate_a < 0 or (br.rate_b != 0 and br.rate_b < br.rate_a):
            raise CaseSemanticError(f"branch {br.id}: invalid thermal ratings")
        if br.tap <= 0:
            raise CaseSemanticError(f"branch {br.id}: tap ratio must be > 0")
    for gen in case.generators:
        if gen.bus not in seen:
            raise CaseSemanticError(f"generator {gen.id} references unknown bus {gen.bus}")
        if gen.in_service and not (gen.p_min - 1e-9 <= gen.p_mw <= gen.p_max + 1e-9):
            raise CaseSemanticError(
                f"generator {gen.id}: dispatch {gen.p_mw} MW outside "
                f"[{gen.p_min}, {gen.p_max}]"
            )
    for el in list(case.loads) + list(case.shunts):
        if el.bus not in seen:
            raise CaseSemanticError(
                f"{type(el).__name__.lower()} {el.id} references unknown bus {el.bus}"
            )
    return case


# ---------------------------------------------------------------------------
# MATPOWER-subset parsing
# ---------------------------------------------------------------------------

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[]+);")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_tables(text: str) -> tuple[dict[str, list[list[float]]], dict[str, str], dict[str, int]]:
    """Split case text into named matrices and scalars, tracking line numbers."""
    tables: dict[str, list[list[float]]] = {}
    scalars: dict[str, str] = {}
    table_lines: dict[str, int] = {}
    current: str | None = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is None:
            m = _TABLE_RE.search(line)
            if m:
                name = m.group(1)
                tables[name] = []
                table_lines[name] = line_no
                current = name
                line = line[m.end():].strip()
                if not line:
                    continue
            else:
                m = _SCALAR_RE.search(line)
                if m:
                    scalars[m.group(1)] = m.group(2).strip()
                continue
        # inside a table: rows are whitespace-separated numbers ending in ';'
        closing = line.endswith("];")
        body = line[:-2] if closing else line
        for row_text in body.split(";"):
            row_text = row_text.strip()
            if not row_text:
                continue
            try:
                tables[current].append([float(tok) for tok in row_text.split()])
            except ValueError as exc:
                raise CaseSyntaxError(f"bad numeric row in mpc.{current}: {exc}", line_no)
        if closing:
            current = None
    if current is not None:
        raise CaseSyntaxError(f"unterminated table mpc.{current}", table_lines[current])
    return tables, scalars, table_lines


def parse_matpower_case(text: str, name: str = "case") -> GridCase:
    """Parse the supported MATPOWER subset into a validated GridCase."""
    tables, scalars, table_lines = _parse_tables(text)
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseSyntaxError(f"missing mpc.{required} table")
    if "gencost" in tables:
        warnings.warn("mpc.gencost present; generator costs are ignored", CaseFormatWarning)
    try:
        base_mva = float(scalars.get("baseMVA", "100"))
    except ValueError:
        raise CaseSyntaxError(f"invalid mpc.baseMVA value {scalars['baseMVA']!r}")

    buses: list[Bus] = []
    loads: list[Load] = []
    shunts: list[Shunt] = []
    kinds = {1: "PQ", 2: "PV", 3: "slack"}
    for row_i, row in enumerate(tables["bus"]):
        if len(row) < 13:
            raise CaseSyntaxError(
                f"bus row {row_i + 1} has {len(row)} columns, expected 13",
                table_lines["bus"],
            )
        bus_i, bus_type, pd, qd, gs, bs = row[0], int(row[1]), row[2], row[3], row[4], row[5]
        vm, base_kv = row[7], row[9]
        if bus_type not in kinds:
            raise CaseSemanticError(f"bus {int(bus_i)}: unsupported bus type {bus_type}")
        if gs != 0:
            raise CaseSemanticError(f"bus {int(bus_i)}: conductance shunts are unsupported")
        buses.append(Bus(id=int(bus_i), kind=kinds[bus_type], v_setpoint=vm, base_kv=base_kv))
        if pd != 0 or qd != 0:
            loads.append(Load(id=len(loads) + 1, bus=int(bus_i), p_mw=pd, q_mvar=qd))
        if bs != 0:
            shunts.append(Shunt(id=len(shunts) + 1, bus=int(bus_i), q_mvar=bs))

    bus_by_id = {b.id: b for b in buses}
    generators: list[Generator] = []
    for row_i, row in enumerate(tables["gen"]):
        if len(row) < 10:
            raise CaseSyntaxError(
                f"gen row {row_i + 1} has {len(row)} columns, expected >= 10",
                table_lines["gen"],
            )
        bus_i = int(row[0])
        if bus_i not in bus_by_id:
            raise CaseSemanticError(f"gen row {row_i + 1} references unknown bus {bus_i}")
        generators.append(
            Generator(
                id=row_i + 1,
                bus=bus_i,
                p_mw=row[1],
                q_mvar=row[2],
                q_max=row[3],
                q_min=row[4],
                mva_rating=row[6] if row[6] > 0 else base_mva,
                in_service=row[7] > 0,
                p_max=row[8],
                p_min=row[9],
            )
        )
        # regulated buses take their setpoint from the generator voltage
        vg = row[5]
        bus = bus_by_id[bus_i]
        if bus.kind in ("PV", "slack") and vg > 0 and row[7] > 0:
            bus_by_id[bus_i] = replace(bus, v_setpoint=vg)
    buses = [bus_by_id[b.id] for b in buses]

    branches: list[Branch] = []
    for row_i, row in enumerate(tables["branch"]):
        if len(row) < 11:
            raise CaseSyntaxError(
                f"branch row {row_i + 1} has {len(row)} columns, expected >= 11",
                table_lines["branch"],
            )
        f_bus, t_bus = int(row[0]), int(row[1])
        for end in (f_bus, t_bus):
            if end not in bus_by_id:
                raise CaseSemanticError(f"branch row {row_i + 1} references unknown bus {end}")
        if len(row) > 9 and row[9] != 0:
            raise CaseSemanticError(
                f"branch row {row_i + 1}: phase-shifting transformers are unsupported"
            )
        rate_a, rate_b = row[5], row[6]
        if rate_b < rate_a:  # emergency rating defaults to the normal rating
            rate_b = rate_a
        branches.append(
            Branch(
                id=row_i + 1,
                from_bus=f_bus,
                to_bus=t_bus,
                r=row[2],
                x=row[3],
                b_charging=row[4],
                rate_a=rate_a,
                rate_b=rate_b,
                tap=row[8] if row[8] != 0 else 1.0,
                in_service=row[10] > 0,
            )
        )

    case = GridCase(
        name=name,
        base_mva=base_mva,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
        shunts=tuple(shunts),
    )
    return validate_case(case)


def serialize_matpower_case(case: GridCase) -> str:
    """Render a GridCase back to the supported MATPOWER subset.

    Loads and shunts fold back into the bus table; parse(serialize(c)) is
    element-wise identical to c for parser-produced cases.
    """
    kind_codes = {"PQ": 1, "PV": 2, "slack": 3}
    load_at: dict[int, tuple[float, float]] = {}
    for ld in case.loads:
        p, q = load_at.get(ld.bus, (0.0, 0.0))
        load_at[ld.bus] = (p + ld.p_mw, q + ld.q_mvar)
    shunt_at: dict[int, float] = {}
    for sh in case.shunts:
        shunt_at[sh.bus] = shunt_at.get(sh.bus, 0.0) + sh.q_mvar

    out = [f"function mpc = {case.name}", f"mpc.baseMVA = {case.base_mva:g};"]
    out.append("mpc.bus = [")
    for b in case.buses:
        pd, qd = load_at.get(b.id, (0.0, 0.0))
        bs = shunt_at.get(b.id, 0.0)
        out.append(
            f"\t{b.id}\t{kind_codes[b.kind]}\t{pd:g}\t{qd:g}\t0\t{bs:g}\t1"
            f"\t{b.v_setpoint:g}\t0\t{b.base_kv:g}\t1\t1.1\t0.9;"
        )
    out.append("];")
    out.append("mpc.gen = [")
    for g in case.generators:
        vg = case.bus(g.bus).v_setpoint
        out.append(
            f"\t{g.bus}\t{g.p_mw:g}\t{g.q_mvar:g}\t{g.q_max:g}\t{g.q_min:g}\t{vg:g}"
            f"\t{g.mva_rating:g}\t{1 if g.in_service else 0}\t{g.p_max:g}\t{g.p_min:g};"
        )
    out.append("];")
    out.append("mpc.branch = [")
    for br in case.branches:
        tap = 0.0 if br.tap == 1.0 else br.tap
        out.append(
            f"\t{br.from_bus}\t{br.to_bus}\t{br.r:.6g}\t{br.x:.6g}\t{br.b_charging:.6g}"
            f"\t{br.rate_a:g}\t{br.rate_b:g}\t{br.rate_b:g}\t{tap:g}\t0"
            f"\t{1 if br.in_service else 0}\t-360\t360;"
        )
    out.append("];")
    return "\n".join(out) + "\n"


_BUILTIN_CACHE: dict[str, GridCase] = {}


def builtin_case(name: str) -> GridCase:
    """Load one of the bundled planning cases by alias."""
    if name not in BUILTIN_CASES:
        raise CaseError(
            f"unknown case alias {name!r}; valid aliases: {', '.join(BUILTIN_CASES)}"
        )
    if name not in _BUILTIN_CACHE:
        text = resources.files("gridcia.cases").joinpath(f"{name}.m").read_text()
        _BUILTIN_CACHE[name] = parse_matpower_case(text, name=name)
    return _BUILTIN_CACHE[name]


def load_case(case_path: str) -> GridCase:
    """Resolve a builtin alias or a filesystem path to a case file."""
    if case_path in BUILTIN_CASES:
        return builtin_case(case_path)
    try:
        with open(case_path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CaseError(
            f"{case_path!r} is neither a builtin alias "
            f"({', '.join(BUILTIN_CASES)}) nor a readable case file: {exc}"
        ) from None
    stem = re.sub(r"\.m$", "", case_path.rsplit("/", 1)[-1])
    return parse_matpower_case(text, name=stem)


# ---------------------------------------------------------------------------
# Admittance construction
# ---------------------------------------------------------------------------

def build_ybus(case: GridCase) -> AdmittanceMatrix:
    """Standard bus admittance matrix with taps, charging and bus shunts."""
    n = len(case.buses)
    idx = case.bus_index
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charging / 2.0
        tap = br.tap
        y[i, i] += (ys + bc) / (tap * tap)
        y[j, j] += ys + bc
        y[i, j] += -ys / tap
        y[j, i] += -ys / tap
    for sh in case.shunts:
        y[idx[sh.bus], idx[sh.bus]] += 1j * sh.q_mvar / case.base_mva
    return AdmittanceMatrix(bus_ids=case.bus_ids, matrix=y)


# ---------------------------------------------------------------------------
# Case mutation
# ---------------------------------------------------------------------------

def apply_connection(case: GridCase, req: ConnectionRequest) -> GridCase:
    """Return a new case with the proposed connection installed.

    Loads consume at a 0.95 lagging power factor; generating resources are
    injected as PQ elements with zero reactive dispatch.
    """
    if not case.has_bus(req.bus):
        raise UnknownBusError(req.bus, case)
    if req.ctype == "load":
        q_mvar = req.p_mw * math.tan(math.acos(LOAD_POWER_FACTOR))
        new_id = max((l.id for l in case.loads), default=0) + 1
        new = replace(
            case,
            loads=case.loads + (Load(id=new_id, bus=req.bus, p_mw=req.p_mw, q_mvar=q_mvar),),
        )
        element = {"load_id": new_id}
    else:
        new_id = max((g.id for g in case.generators), default=0) + 1
        gen = Generator(
            id=new_id,
            bus=req.bus,
            p_mw=req.p_mw,
            q_mvar=0.0,
            p_min=0.0,
            p_max=req.p_mw,
            mva_rating=max(req.p_mw, 1.0),
        )
        new = replace(case, generators=case.generators + (gen,))
        element = {"generator_id": new_id}
    return new.with_metadata(
        "connection",
        bus=req.bus,
        p_mw=req.p_mw,
        ctype=req.ctype,
        is_ibr=req.is_ibr,
        **element,
    )


def apply_shunt_mitigation(case: GridCase, bus: int, q_mvar: float) -> GridCase:
    """Return a new case with a reactive shunt added at ``bus``."""
    if not case.has_bus(bus):
        raise UnknownBusError(bus, case)
    new_id = max((s.id for s in case.shunts), default=0) + 1
    new = replace(case, shunts=case.shunts + (Shunt(id=new_id, bus=bus, q_mvar=q_mvar),))
    return new.with_metadata("mitigation", bus=bus, q_mvar=q_mvar, shunt_id=new_id)


def connected_generator_ids(case: GridCase, ibr_only: bool = False) -> set[int]:
    """Generator ids added by apply_connection, optionally IBR-typed only."""
    ids = set()
    for entry in case.metadata_entries("connection"):
        gid = entry.get("generator_id")
        if gid is not None and (entry.get("is_ibr") or not ibr_only):
            ids.add(gid)
    return ids


# ---------------------------------------------------------------------------
# JSON serialization (service layer)
# ---------------------------------------------------------------------------

def case_to_dict(case: GridCase) -> dict:
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [vars(b).copy() for b in case.buses],
        "branches": [vars(b).copy() for b in case.branches],
        "generators": [vars(g).copy() for g in case.generators],
        "loads": [vars(l).copy() for l in case.loads],
        "shunts": [vars(s).copy() for s in case.shunts],
        "metadata": [list(m) for m in case.metadata],
    }


def case_from_dict(data: dict) -> GridCase:
    def strip(d: dict) -> dict:
        return {k: v for k, v in d.items() if not k.startswith("_")}

    case = GridCase(
        name=data["name"],
        base_mva=data["base_mva"],
        buses=tuple(Bus(**strip(b)) for b in data["buses"]),
        branches=tuple(Branch(**strip(b)) for b in data["branches"]),
        generators=tuple(Generator(**strip(g)) for g in data["generators"]),
        loads=tuple(Load(**strip(l)) for l in data["loads"]),
        shunts=tuple(Shunt(**strip(s)) for s in data["shunts"]),
        metadata=tuple((k, v) for k, v in data.get("metadata", [])),
    )
    return validate_case(case)
