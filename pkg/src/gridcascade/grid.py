"""Network case data: loading, validation, admittance assembly and partitioning.

Network quantities in the case file are per-unit (impedances) or MW/MVar
(demands, DG limits); smart-building quantities are kW/kWh.  Internally the
network side is per-unit on ``base_mva`` and the building side stays in kW.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BUS_KINDS = ("slack", "load", "mg-boundary-dist-side", "mg-boundary-mg-side")

DATA_DIR = Path(__file__).parent / "data"


class CaseError(ValueError):
    """Raised when a case file cannot be parsed or violates an invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = "load"
    p_demand: float = 0.0  # MW
    q_demand: float = 0.0  # MVar
    v_min: float = 0.95
    v_max: float = 1.05


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    resistance: float  # pu
    reactance: float  # pu
    s_max: float  # MVA
    shunt_susceptance: float = 0.0  # pu, total (split half per end)

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.resistance, self.reactance)


@dataclass(frozen=True)
class DgUnit:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: float  # $/MWh


@dataclass(frozen=True)
class BessSpec:
    e_capacity: float  # kWh
    e_min: float
    e_initial: float
    rate_max: float  # kW
    efficiency: float = 1.0


@dataclass(frozen=True)
class SmartBuildingSpec:
    bus: int
    total_load: float  # kW
    controllable_fraction: float
    pv_forecast: float  # kW
    bess: BessSpec
    pb_min: float | None = None  # kW; None -> -(load + rate + pv)
    pb_max: float | None = None

    @property
    def p_load_min(self) -> float:
        return (1.0 - self.controllable_fraction) * self.total_load

    @property
    def p_load_max(self) -> float:
        return self.total_load

    @property
    def pb_limit(self) -> float:
        return self.total_load + self.bess.rate_max + self.pv_forecast

    @property
    def pb_bounds(self) -> tuple[float, float]:
        lo = -self.pb_limit if self.pb_min is None else self.pb_min
        hi = self.pb_limit if self.pb_max is None else self.pb_max
        return lo, hi

    @property
    def base_exchange(self) -> float:
        """Net draw with full load, full PV and the battery idle (kW)."""
        return self.total_load - self.pv_forecast


@dataclass(frozen=True)
class MicrogridSpec:
    id: str
    member_buses: frozenset[int]
    tie_line: int
    boundary_bus_dist: int
    boundary_bus_mg: int


@dataclass(frozen=True)
class CaseData:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    dg_units: tuple[DgUnit, ...] = ()
    smart_buildings: tuple[SmartBuildingSpec, ...] = ()
    microgrids: tuple[MicrogridSpec, ...] = ()
    price: float = 50.0  # $/MWh
    lambda_: float = 1.0
    base_mva: float = 100.0
    base_kv: float = 12.66
    load_scale: float = 1.0

    def bus(self, bus_id: int) -> Bus:
        return self._bus_map()[bus_id]

    def line(self, line_id: int) -> Line:
        for ln in self.lines:
            if ln.id == line_id:
                return ln
        raise KeyError(line_id)

    def _bus_map(self) -> dict[int, Bus]:
        return {b.id: b for b in self.buses}

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.kind == "slack")

    def microgrid_of(self, bus_id: int) -> MicrogridSpec | None:
        for mg in self.microgrids:
            if bus_id in mg.member_buses:
                return mg
        return None

    def total_demand(self) -> tuple[float, float]:
        """Bus demand plus full building load, in MW / MVar."""
        p = sum(b.p_demand for b in self.buses) * self.load_scale
        q = sum(b.q_demand for b in self.buses) * self.load_scale
        p += sum(sb.total_load for sb in self.smart_buildings) / 1000.0
        return p, q

    def replace(self, **changes) -> CaseData:
        from dataclasses import replace

        return replace(self, **changes)


# --------------------------------------------------------------------------
# (de)serialization


def _parse_bess(d: dict) -> BessSpec:
    return BessSpec(
        e_capacity=float(d["e_capacity"]),
        e_min=float(d.get("e_min", 0.0)),
        e_initial=float(d["e_initial"]),
        rate_max=float(d["rate_max"]),
        efficiency=float(d.get("efficiency", 1.0)),
    )


def case_from_dict(d: dict) -> CaseData:
    try:
        buses = tuple(
            Bus(
                id=int(b["id"]),
                kind=str(b.get("kind", "load")),
                p_demand=float(b.get("p_demand", 0.0)),
                q_demand=float(b.get("q_demand", 0.0)),
                v_min=float(b.get("v_min", 0.95)),
                v_max=float(b.get("v_max", 1.05)),
            )
            for b in d["buses"]
        )
        lines = tuple(
            Line(
                id=int(ln.get("id", k + 1)),
                from_bus=int(ln["from_bus"]),
                to_bus=int(ln["to_bus"]),
                resistance=float(ln["resistance"]),
                reactance=float(ln["reactance"]),
                s_max=float(ln["s_max"]),
                shunt_susceptance=float(ln.get("shunt_susceptance", 0.0)),
            )
            for k, ln in enumerate(d["lines"])
        )
        dgs = tuple(
            DgUnit(
                bus=int(g["bus"]),
                p_min=float(g["p_min"]),
                p_max=float(g["p_max"]),
                q_min=float(g["q_min"]),
                q_max=float(g["q_max"]),
                cost=float(g["cost"]),
            )
            for g in d.get("dg_units", [])
        )
        sbs = tuple(
            SmartBuildingSpec(
                bus=int(s["bus"]),
                total_load=float(s["total_load"]),
                controllable_fraction=float(s["controllable_fraction"]),
                pv_forecast=float(s["pv_forecast"]),
                bess=_parse_bess(s["bess"]),
                pb_min=None if s.get("pb_min") is None else float(s["pb_min"]),
                pb_max=None if s.get("pb_max") is None else float(s["pb_max"]),
            )
            for s in d.get("smart_buildings", [])
        )
        mgs = tuple(
            MicrogridSpec(
                id=str(m["id"]),
                member_buses=frozenset(int(b) for b in m["member_buses"]),
                tie_line=int(m["tie_line"]),
                boundary_bus_dist=int(m["boundary_bus_dist"]),
                boundary_bus_mg=int(m["boundary_bus_mg"]),
            )
            for m in d.get("microgrids", [])
        )
        case = CaseData(
            buses=buses,
            lines=lines,
            dg_units=dgs,
            smart_buildings=sbs,
            microgrids=mgs,
            price=float(d.get("price", 50.0)),
            lambda_=float(d.get("lambda", 1.0)),
            base_mva=float(d.get("base_mva", 100.0)),
            base_kv=float(d.get("base_kv", 12.66)),
            load_scale=float(d.get("load_scale", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseError(f"malformed case data: {exc!r}") from exc
    validate_case(case)
    return case


def case_to_dict(case: CaseData) -> dict:
    def sb_dict(sb: SmartBuildingSpec) -> dict:
        out = asdict(sb)
        return out

    return {
        "buses": [asdict(b) for b in case.buses],
        "lines": [asdict(ln) for ln in case.lines],
        "dg_units": [asdict(g) for g in case.dg_units],
        "smart_buildings": [sb_dict(sb) for sb in case.smart_buildings],
        "microgrids": [
            {
                "id": mg.id,
                "member_buses": sorted(mg.member_buses),
                "tie_line": mg.tie_line,
                "boundary_bus_dist": mg.boundary_bus_dist,
                "boundary_bus_mg": mg.boundary_bus_mg,
            }
            for mg in case.microgrids
        ],
        "price": case.price,
        "lambda": case.lambda_,
        "base_mva": case.base_mva,
        "base_kv": case.base_kv,
        "load_scale": case.load_scale,
    }


def resolve_case_path(path: str | Path) -> Path:
    """Return ``path`` if it exists, otherwise look it up among the bundled cases."""
    p = Path(path)
    if p.exists():
        return p
    bundled = DATA_DIR / p.name
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"case file not found: {path}")


def load_case(path: str | Path) -> CaseData:
    p = resolve_case_path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise CaseError(f"cannot parse {p}: top level must be an object")
    return case_from_dict(data)


def save_case(case: CaseData, path: str | Path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=2))


# --------------------------------------------------------------------------
# validation


def _connected(nodes: set[int], edges: Iterable[tuple[int, int]]) -> bool:
    if not nodes:
        return True
    adj: dict[int, list[int]] = {n: [] for n in nodes}
    for a, b in edges:
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)
    start = next(iter(nodes))
    seen = {start}
    queue = deque([start])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return seen == nodes


def validate_case(case: CaseData) -> None:
    """Raise :class:`CaseError` naming the first violated invariant."""
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseError("duplicate bus id")
    bus_set = set(ids)
    for b in case.buses:
        if b.kind not in BUS_KINDS:
            raise CaseError(f"bus {b.id}: unknown kind {b.kind!r}")
        if not (0.0 < b.v_min < b.v_max):
            raise CaseError(f"bus {b.id}: voltage limits must satisfy 0 < v_min < v_max")
        if not (math.isfinite(b.p_demand) and math.isfinite(b.q_demand)):
            raise CaseError(f"bus {b.id}: non-finite demand")
        if b.kind == "load" and (b.p_demand < 0.0 or b.q_demand < 0.0):
            raise CaseError(f"bus {b.id}: negative demand at load bus")
    if sum(b.kind == "slack" for b in case.buses) != 1:
        raise CaseError("case must have exactly one slack bus")

    line_ids = [ln.id for ln in case.lines]
    if len(set(line_ids)) != len(line_ids):
        raise CaseError("duplicate line id")
    for ln in case.lines:
        if ln.from_bus == ln.to_bus:
            raise CaseError(f"line {ln.id}: from_bus equals to_bus")
        for end in (ln.from_bus, ln.to_bus):
            if end not in bus_set:
                raise CaseError(f"line {ln.id}: dangling bus id {end}")
        if ln.resistance == 0.0 and ln.reactance == 0.0:
            raise CaseError(f"line {ln.id}: zero-impedance branch")
        if not ln.s_max > 0.0:
            raise CaseError(f"line {ln.id}: s_max must be positive")

    for g in case.dg_units:
        if g.bus not in bus_set:
            raise CaseError(f"DG: dangling bus id {g.bus}")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseError(f"DG at bus {g.bus}: min limit exceeds max limit")
        if g.cost < 0.0:
            raise CaseError(f"DG at bus {g.bus}: negative cost")

    sb_buses = [sb.bus for sb in case.smart_buildings]
    if len(set(sb_buses)) != len(sb_buses):
        raise CaseError("duplicate smart building bus")
    for sb in case.smart_buildings:
        if sb.bus not in bus_set:
            raise CaseError(f"smart building: dangling bus id {sb.bus}")
        if sb.total_load < 0.0 or sb.pv_forecast < 0.0:
            raise CaseError(f"smart building at bus {sb.bus}: negative load or PV forecast")
        if not 0.0 <= sb.controllable_fraction <= 1.0:
            raise CaseError(f"smart building at bus {sb.bus}: controllable_fraction outside [0, 1]")
        lo, hi = sb.pb_bounds
        if lo > hi:
            raise CaseError(f"smart building at bus {sb.bus}: pb_min exceeds pb_max")
        e = sb.bess
        if not 0.0 <= e.e_min <= e.e_initial <= e.e_capacity:
            raise CaseError(f"smart building at bus {sb.bus}: need 0 <= e_min <= e_initial <= e_capacity")
        if not e.rate_max > 0.0:
            raise CaseError(f"smart building at bus {sb.bus}: rate_max must be positive")
        if not 0.0 < e.efficiency <= 1.0:
            raise CaseError(f"smart building at bus {sb.bus}: efficiency outside (0, 1]")

    if not case.price >= 0.0:
        raise CaseError("price must be non-negative")
    if not case.lambda_ >= 0.0:
        raise CaseError("lambda must be non-negative")
    if not case.base_mva > 0.0:
        raise CaseError("base_mva must be positive")
    if not case.load_scale >= 0.0:
        raise CaseError("load_scale must be non-negative")

    claimed: set[int] = set()
    line_by_id = {ln.id: ln for ln in case.lines}
    for mg in case.microgrids:
        if mg.member_buses & claimed:
            raise CaseError("overlapping microgrid membership")
        claimed |= mg.member_buses
    for mg in case.microgrids:
        if not mg.member_buses <= bus_set:
            raise CaseError(f"microgrid {mg.id}: dangling member bus")
        if mg.boundary_bus_mg not in mg.member_buses:
            raise CaseError(f"microgrid {mg.id}: boundary_bus_mg must be a member")
        if mg.boundary_bus_dist in mg.member_buses:
            raise CaseError(f"microgrid {mg.id}: boundary_bus_dist must not be a member")
        if case.slack_bus in mg.member_buses:
            raise CaseError(f"microgrid {mg.id}: slack bus cannot be a member")
        tie = line_by_id.get(mg.tie_line)
        if tie is None:
            raise CaseError(f"microgrid {mg.id}: dangling tie line {mg.tie_line}")
        if {tie.from_bus, tie.to_bus} != {mg.boundary_bus_dist, mg.boundary_bus_mg}:
            raise CaseError(f"microgrid {mg.id}: tie line does not join the boundary buses")
        for ln in case.lines:
            crosses = (ln.from_bus in mg.member_buses) != (ln.to_bus in mg.member_buses)
            if crosses and ln.id != mg.tie_line:
                raise CaseError(f"microgrid {mg.id}: line {ln.id} crosses the boundary besides the tie line")

    edges = [(ln.from_bus, ln.to_bus) for ln in case.lines]
    if not _connected(bus_set, edges):
        raise CaseError("network is disconnected")
    dist_buses = bus_set - claimed
    if not _connected(dist_buses, edges):
        raise CaseError("distribution partition is disconnected")
    for mg in case.microgrids:
        if not _connected(set(mg.member_buses), edges):
            raise CaseError(f"microgrid {mg.id}: partition is disconnected")


# --------------------------------------------------------------------------
# admittance


def branch_admittances(line: Line) -> tuple[complex, complex, complex, complex]:
    """Pi-model two-port entries (y_ff, y_ft, y_tf, y_tt)."""
    y = line.series_admittance
    half_b = 0.5j * line.shunt_susceptance
    return y + half_b, -y, -y, y + half_b


def admittance_from_lines(bus_ids: Sequence[int], lines: Iterable[Line]) -> np.ndarray:
    pos = {b: k for k, b in enumerate(bus_ids)}
    n = len(bus_ids)
    Y = np.zeros((n, n), dtype=complex)
    for ln in lines:
        if ln.from_bus not in pos or ln.to_bus not in pos:
            continue
        f, t = pos[ln.from_bus], pos[ln.to_bus]
        yff, yft, ytf, ytt = branch_admittances(ln)
        Y[f, f] += yff
        Y[f, t] += yft
        Y[t, f] += ytf
        Y[t, t] += ytt
    return Y


def build_admittance(case: CaseData, bus_subset: Iterable[int]) -> np.ndarray:
    """Dense bus admittance matrix over ``bus_subset``.

    A set is ordered ascending; any other sequence keeps its order.  Every line
    with both endpoints inside the subset is included.
    """
    buses = sorted(bus_subset) if isinstance(bus_subset, (set, frozenset)) else list(bus_subset)
    if not buses:
        raise ValueError("bus_subset must be non-empty")
    return admittance_from_lines(buses, case.lines)


# --------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class BoundaryCopy:
    """A bus owned by a neighbouring subsystem, present here as a copy.

    In the distribution subcase the copy is the MG-side bus and carries the
    exchange as a withdrawal; in a microgrid subcase it is the distribution-side
    bus and acts as the source.
    """

    bus: int
    mg_id: str
    tie_line: int


@dataclass(frozen=True)
class Subcase:
    name: str
    kind: str  # "dist" | "mg" | "full"
    bus_ids: tuple[int, ...]
    lines: tuple[Line, ...]
    dg_units: tuple[DgUnit, ...]
    smart_buildings: tuple[SmartBuildingSpec, ...]
    slack_bus: int
    p_demand: np.ndarray = field(repr=False)  # pu, zero at copy buses
    q_demand: np.ndarray = field(repr=False)
    v_min: np.ndarray = field(repr=False)
    v_max: np.ndarray = field(repr=False)
    base_mva: float = 100.0
    boundaries: tuple[BoundaryCopy, ...] = ()
    mg_id: str | None = None
    fixed_angle: bool = True  # slack angle pinned at zero

    def __hash__(self) -> int:
        return hash((self.name, self.bus_ids))

    def __eq__(self, other: object) -> bool:
        return self is other

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    def index(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    @property
    def admittance(self) -> np.ndarray:
        return admittance_from_lines(self.bus_ids, self.lines)

    @property
    def copy_buses(self) -> tuple[int, ...]:
        return tuple(b.bus for b in self.boundaries)

    @property
    def interior_buses(self) -> tuple[int, ...]:
        copies = set(self.copy_buses)
        return tuple(b for b in self.bus_ids if b not in copies)


@dataclass(frozen=True)
class Partition:
    dist_subcase: Subcase
    mg_subcases: tuple[Subcase, ...]
    dist_sbs: tuple[SmartBuildingSpec, ...]
    mg_sbs: dict[str, tuple[SmartBuildingSpec, ...]]

    def subcase_for_mg(self, mg_id: str) -> Subcase:
        for sc in self.mg_subcases:
            if sc.mg_id == mg_id:
                return sc
        raise KeyError(mg_id)


def _make_subcase(
    case: CaseData,
    name: str,
    kind: str,
    bus_ids: list[int],
    copies: tuple[BoundaryCopy, ...],
    slack: int,
    mg_id: str | None = None,
    fixed_angle: bool = True,
) -> Subcase:
    copy_set = {c.bus for c in copies}
    interior = set(bus_ids) - copy_set
    bmap = case._bus_map()
    scale = case.load_scale / case.base_mva
    p_d = np.array([0.0 if b in copy_set else bmap[b].p_demand * scale for b in bus_ids])
    q_d = np.array([0.0 if b in copy_set else bmap[b].q_demand * scale for b in bus_ids])
    members = set(bus_ids)
    lines = tuple(ln for ln in case.lines if ln.from_bus in members and ln.to_bus in members)
    return Subcase(
        name=name,
        kind=kind,
        bus_ids=tuple(bus_ids),
        lines=lines,
        dg_units=tuple(g for g in case.dg_units if g.bus in interior),
        smart_buildings=tuple(sb for sb in case.smart_buildings if sb.bus in interior),
        slack_bus=slack,
        p_demand=p_d,
        q_demand=q_d,
        v_min=np.array([bmap[b].v_min for b in bus_ids]),
        v_max=np.array([bmap[b].v_max for b in bus_ids]),
        base_mva=case.base_mva,
        boundaries=copies,
        mg_id=mg_id,
        fixed_angle=fixed_angle,
    )


def full_subcase(case: CaseData) -> Subcase:
    """The unpartitioned network as a single subsystem (base case, oracle)."""
    return _make_subcase(case, "full", "full", list(case.bus_ids), (), case.slack_bus)


def partition_case(case: CaseData) -> Partition:
    mg_buses: set[int] = set()
    for mg in case.microgrids:
        mg_buses |= mg.member_buses
    dist_interior = [b for b in case.bus_ids if b not in mg_buses]
    dist_copies = tuple(BoundaryCopy(mg.boundary_bus_mg, mg.id, mg.tie_line) for mg in case.microgrids)
    dist = _make_subcase(
        case,
        "dsc",
        "dist",
        dist_interior + [c.bus for c in dist_copies],
        dist_copies,
        case.slack_bus,
    )
    mg_subcases = []
    mg_sbs = {}
    for mg in case.microgrids:
        members = [b for b in case.bus_ids if b in mg.member_buses]
        copy = BoundaryCopy(mg.boundary_bus_dist, mg.id, mg.tie_line)
        sc = _make_subcase(
            case,
            f"mg:{mg.id}",
            "mg",
            members + [copy.bus],
            (copy,),
            slack=copy.bus,
            mg_id=mg.id,
            fixed_angle=False,
        )
        mg_subcases.append(sc)
        mg_sbs[mg.id] = sc.smart_buildings
    return Partition(
        dist_subcase=dist,
        mg_subcases=tuple(mg_subcases),
        dist_sbs=dist.smart_buildings,
        mg_sbs=mg_sbs,
    )
