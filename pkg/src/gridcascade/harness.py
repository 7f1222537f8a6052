"""Scenario runner, centralized oracle and report tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .atc import AtcConfig, AtcResult, run_atc
from .grid import CaseData, full_subcase, load_case, partition_case, validate_case
from .nlp import Solution, solve
from .powerflow import residuals, scheduled_injections, slack_injection, solve_base_powerflow
from .subproblems import (
    build_joint_problem,
    compute_weights,
    network_start,
    network_state,
    sb_decision,
    sb_start,
    tie_flows,
    unpack,
)

CENTRAL_MAX_BUSES = 40
PU_TOLERANCE = 1e-6
KW_TOLERANCE = 1e-3
FORMATS = ("json", "csv")

TABLES = ("sb_dispatch", "dg_dispatch", "grid_exchange", "bus_table", "mg_exchange", "trace")
COLUMNS = {
    "sb_dispatch": ("bus", "p_l_kw", "p_ess_kw", "p_pv_kw", "p_b_kw"),
    "dg_dispatch": ("bus", "p_mw", "q_mvar"),
    "grid_exchange": ("p_mw", "q_mvar"),
    "bus_table": ("bus", "v_pu", "delta_rad"),
    "mg_exchange": ("mg", "p_mw", "q_mvar", "s_mva"),
}
TRACE_FIXED = ("k", "objective", "penalty", "max_mismatch")

CASE_KEYS = {"price": "price", "lambda": "lambda_", "load_scale": "load_scale"}
ATC_KEYS = {f.name: f.type for f in fields(AtcConfig) if f.name != "solver"}


class ValidationError(RuntimeError):
    """A reported solution violates its own constraints."""


class CentralizedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "case1"
    price: float | None = None
    lambda_: float | None = None
    load_scale: float | None = None
    atc: AtcConfig = field(default_factory=AtcConfig)
    out_dir: Path | None = None
    fmt: str = "json"

    def __post_init__(self):
        if self.scenario not in ("case1", "case2"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.fmt not in FORMATS:
            raise ValueError(f"unknown format {self.fmt!r}")
        for name in ("price", "lambda_", "load_scale"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and non-negative")

    @classmethod
    def from_overrides(cls, scenario: str, overrides: dict[str, str] | None = None, **kw) -> ScenarioConfig:
        """Build a config from ``key=value`` strings (case data or ATC fields)."""
        case_kw, atc_kw = {}, {}
        for key, raw in (overrides or {}).items():
            if key in CASE_KEYS:
                case_kw[CASE_KEYS[key]] = float(raw)
            elif key in ATC_KEYS:
                typ = ATC_KEYS[key]
                atc_kw[key] = raw if typ == "str" else int(raw) if typ == "int" else float(raw)
            else:
                raise ValueError(f"unknown override {key!r}")
        atc = kw.pop("atc", AtcConfig())
        return cls(scenario=scenario, atc=replace(atc, **atc_kw), **case_kw, **kw)

    def apply(self, case: CaseData) -> CaseData:
        changes = {k: getattr(self, k) for k in ("price", "lambda_", "load_scale") if getattr(self, k) is not None}
        if not changes:
            return case
        out = case.replace(**changes)
        validate_case(out)
        return out


@dataclass(frozen=True)
class Report:
    method: str  # "atc" | "centralized"
    scenario: str
    converged: bool
    iterations: int
    objective: float
    sb_dispatch: list[dict]
    dg_dispatch: list[dict]
    grid_exchange: list[dict]
    bus_table: list[dict]
    mg_exchange: list[dict]
    trace: list[dict]

    def table(self, name: str) -> list[dict]:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Report:
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    def mg(self, mg_id: str) -> dict:
        return next(r for r in self.mg_exchange if r["mg"] == mg_id)


# --------------------------------------------------------------------------
# tables


def _sb_rows(decisions) -> list[dict]:
    return [
        dict(bus=d.bus, p_l_kw=d.p_l, p_ess_kw=d.p_ess, p_pv_kw=d.p_pv, p_b_kw=d.p_b)
        for d in sorted(decisions, key=lambda d: d.bus)
    ]


def _exchange_row(mg_id: str, p: float, q: float) -> dict:
    return dict(mg=mg_id, p_mw=p, q_mvar=q, s_mva=float(np.hypot(p, q)))


def _trace_rows(result: AtcResult) -> list[dict]:
    rows = []
    for rec in result.trace:
        row = dict(
            k=rec.k,
            objective=sum(rec.f_star[n] for n in sorted(rec.f_star)),
            penalty=sum(rec.penalty[n] for n in sorted(rec.penalty)),
            max_mismatch=max(rec.max_mismatch.values(), default=0.0),
        )
        for n in sorted(rec.f_star):
            row[f"f:{n}"] = rec.f_star[n]
        for n in sorted(rec.max_mismatch):
            row[f"mismatch:{n}"] = rec.max_mismatch[n]
        rows.append(row)
    return rows


def report_from_atc(result: AtcResult) -> Report:
    return Report(
        method="atc",
        scenario=result.scenario,
        converged=result.converged,
        iterations=result.iterations,
        objective=result.objective,
        sb_dispatch=_sb_rows(result.sb.values()),
        dg_dispatch=[dict(bus=b, p_mw=p, q_mvar=q) for b, p, q in result.dg],
        grid_exchange=[dict(p_mw=result.grid[0], q_mvar=result.grid[1])],
        bus_table=[dict(bus=b, v_pu=result.bus_v[b], delta_rad=result.bus_delta[b]) for b in sorted(result.bus_v)],
        mg_exchange=[_exchange_row(m, p, q) for m, (p, q, _) in sorted(result.exchange.items())],
        trace=_trace_rows(result),
    )


# --------------------------------------------------------------------------
# validation


def validate_atc_result(result: AtcResult) -> None:
    """Re-check every stored subproblem solution against its own constraints."""
    last = result.trace[-1]
    for name, (problem, x) in sorted(last.solutions.items()):
        tol = KW_TOLERANCE if name.startswith("sb:") else PU_TOLERANCE
        viol = problem.max_violation(x)
        if viol > tol:
            raise ValidationError(f"{name}: constraint violation {viol:.3g} exceeds {tol:g}")
    for name, worst in last.audit.items():
        if worst > PU_TOLERANCE:
            raise ValidationError(f"{name}: power-flow residual {worst:.3g} exceeds {PU_TOLERANCE:g}")


def _load(case) -> CaseData:
    return case if isinstance(case, CaseData) else load_case(case)


def run_scenario(case_path, config: ScenarioConfig | None = None, executor=None) -> tuple[Report, AtcResult]:
    """Run ATC for one scenario, validate the outcome and write the report files."""
    cfg = config or ScenarioConfig()
    case = cfg.apply(_load(case_path))
    result = run_atc(case, cfg.scenario, cfg.atc, executor=executor)
    validate_atc_result(result)
    report = report_from_atc(result)
    if cfg.out_dir is not None:
        emit_report(report, cfg.fmt, cfg.out_dir)
    return report, result


# --------------------------------------------------------------------------
# centralized oracle


def solve_centralized(case_path, scenario: str = "case1", config: ScenarioConfig | None = None) -> tuple[Solution, Report]:
    """Solve every subsystem jointly in one problem with the ATC weights."""
    cfg = config or ScenarioConfig(scenario=scenario)
    case = cfg.apply(_load(case_path))
    if len(case.buses) > CENTRAL_MAX_BUSES:
        raise ValueError(f"centralized solve limited to {CENTRAL_MAX_BUSES} buses, case has {len(case.buses)}")
    full = full_subcase(case)
    base = solve_base_powerflow(full)
    weights = compute_weights(base, case, scenario)
    problem, sc = build_joint_problem(case, weights)
    flows = tie_flows(case, base)
    values = {"grid": slack_injection(base, full)}
    for sb in case.smart_buildings:
        values[f"sb:{sb.bus}"] = sb_start(sb)
    for mg in case.microgrids:
        p, q, ps, qs = flows[mg.id]
        values[f"mg_dsc:{mg.id}"] = (p, q)
        values[f"mg_mgc:{mg.id}"] = (ps, qs)
    sol = solve(problem, network_start(problem, sc, base, values), cfg.atc.solver)
    if sol.status != "optimal":
        raise CentralizedError(
            f"centralized solve ended with status {sol.status} (violation {sol.max_constraint_violation:.3g})"
        )
    x = sol.x_star
    u = unpack(problem, x)
    mva = case.base_mva
    # audit the joint solution in the magnitude/angle power-flow form
    exch = {}
    inj = scheduled_injections(
        sc,
        dg_p=u["p_dg"] * mva,
        dg_q=u["q_dg"] * mva,
        sb_pb_kw=[u[f"sb:{sb.bus}"][0] for sb in sc.smart_buildings],
        exchange=exch,
        grid=tuple(u["grid"]),
    )
    worst = residuals(network_state(problem, sc, x), sc, inj).max_abs
    if worst > PU_TOLERANCE or sol.max_constraint_violation > PU_TOLERANCE:
        raise ValidationError(f"centralized solution fails its audit (residual {worst:.3g})")
    report = Report(
        method="centralized",
        scenario=scenario,
        converged=True,
        iterations=sol.iterations,
        objective=float(sol.f_star),
        sb_dispatch=_sb_rows(sb_decision(sb, u[f"sb:{sb.bus}"]) for sb in case.smart_buildings),
        dg_dispatch=sorted(
            (dict(bus=g.bus, p_mw=float(p * mva), q_mvar=float(q * mva)) for g, p, q in zip(sc.dg_units, u["p_dg"], u["q_dg"])),
            key=lambda r: (r["bus"], r["p_mw"], r["q_mvar"]),
        ),
        grid_exchange=[dict(p_mw=float(u["grid"][0] * mva), q_mvar=float(u["grid"][1] * mva))],
        bus_table=sorted(
            (dict(bus=b, v_pu=float(v), delta_rad=float(d)) for b, v, d in zip(sc.bus_ids, u["v"], u["delta"])),
            key=lambda r: r["bus"],
        ),
        mg_exchange=[
            _exchange_row(mg.id, float(u[f"mg_dsc:{mg.id}"][0] * mva), float(u[f"mg_dsc:{mg.id}"][1] * mva))
            for mg in sorted(case.microgrids, key=lambda m: m.id)
        ],
        trace=[],
    )
    if cfg.out_dir is not None:
        emit_report(report, cfg.fmt, cfg.out_dir)
    return sol, report


# --------------------------------------------------------------------------
# output


def _columns(name: str, rows: list[dict]) -> list[str]:
    if name != "trace":
        return list(COLUMNS[name])
    extra = sorted({k for r in rows for k in r if k not in TRACE_FIXED})
    f_cols = [c for c in extra if c.startswith("f:")]
    return list(TRACE_FIXED) + f_cols + [c for c in extra if not c.startswith("f:")]


def _cell(v) -> str:
    if isinstance(v, bool) or isinstance(v, (int, np.integer)) or isinstance(v, str):
        return str(v)
    return f"{float(v):.6g}"


def emit_report(report: Report, fmt: str, out_dir) -> list[Path]:
    """Write one file per table; JSON keeps full precision, CSV 6 significant digits."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in TABLES:
        rows = report.table(name)
        cols = _columns(name, rows)
        path = out / f"{name}.{fmt}"
        if fmt == "json":
            ordered = [{c: r[c] for c in cols if c in r} for r in rows]
            path.write_text(json.dumps(ordered, indent=1) + "\n")
        else:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for r in rows:
                    w.writerow([_cell(r[c]) if c in r else "" for c in cols])
        written.append(path)
    if fmt == "json":
        path = out / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
        written.append(path)
    return written


def load_report(path) -> Report:
    return Report.from_dict(json.loads(Path(path).read_text()))


def summary(report: Report) -> str:
    head = f"{report.method} {report.scenario}: "
    head += ("converged" if report.converged else "NOT converged") + f" after {report.iterations} iterations"
    lines = [head, f"objective {report.objective:.6g}"]
    g = report.grid_exchange[0]
    lines.append(f"grid P {g['p_mw']:.4f} MW  Q {g['q_mvar']:.4f} MVar")
    for r in report.mg_exchange:
        lines.append(f"{r['mg']}: P {r['p_mw']:.4f} MW  Q {r['q_mvar']:.4f} MVar  S {r['s_mva']:.4f} MVA")
    vs = [r["v_pu"] for r in report.bus_table]
    lines.append(f"voltage range [{min(vs):.4f}, {max(vs):.4f}] pu over {len(vs)} buses")
    return "\n".join(lines)


def partition_summary(case: CaseData) -> str:
    part = partition_case(case)
    lines = [f"{len(case.buses)} buses, {len(case.lines)} lines, {len(case.dg_units)} DGs, "
             f"{len(case.smart_buildings)} smart buildings, {len(case.microgrids)} microgrids"]
    for sc in [part.dist_subcase, *part.mg_subcases]:
        lines.append(f"{sc.name}: {len(sc.interior_buses)} buses, {len(sc.smart_buildings)} SBs, {len(sc.dg_units)} DGs")
    return "\n".join(lines)
