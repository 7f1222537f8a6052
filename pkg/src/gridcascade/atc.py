"""Analytical target cascading over buildings, microgrids and the feeder.

Every iteration solves all building problems, then all microgrid problems,
then the distribution problem.  Each shared quantity is a
:class:`SharedVariableLink` with an upper copy ``t`` and a lower copy ``r``;
both owners see the same penalty with the opposite copy frozen.  After an
unconverged iteration ``alpha += 2 beta^2 (t - r)`` and ``beta *= sigma``.

The default penalty is the augmented-Lagrangian form
``alpha.(t - r) + ||beta*(t - r)||^2``, for which that update drives alpha
towards the consensus multiplier.  ``linear_term="absolute"`` uses
``alpha.|t - r|`` instead, with alpha grown by ``2 beta^2 |t - r|`` so it
stays non-negative; that variant can settle on a consensus that is not
jointly optimal, because a large enough alpha pins both copies wherever
they first meet.
"""

from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import CaseData, Partition, Subcase, full_subcase, partition_case
from .nlp import ProblemSpec, Solution, SolverOptions, solve, solve_linear
from .powerflow import (
    NetworkState,
    residuals,
    scheduled_injections,
    slack_injection,
    solve_base_powerflow,
)
from .subproblems import (
    LinkPenalty,
    PenaltyTerms,
    SbDecision,
    WeightSet,
    build_dsc_problem,
    build_mgc_problem,
    build_sbc_problem,
    compute_weights,
    network_start,
    network_state,
    sb_decision,
    sb_start,
    tie_flows,
    unpack,
)

log = logging.getLogger(__name__)

EPS_DIV = 1e-12
ACCEPT_VIOLATION = 1e-6
# building links carry P_B in MW; the subproblems work in kW
SB_LINK_SCALE = 1e-3


class AtcError(RuntimeError):
    """A subproblem could not be solved; carries the subsystem and iteration."""

    def __init__(self, subsystem: str, iteration: int, solution: Solution):
        super().__init__(
            f"{subsystem} failed at ATC iteration {iteration}: status={solution.status}, "
            f"violation={solution.max_constraint_violation:.3g}"
        )
        self.subsystem = subsystem
        self.iteration = iteration
        self.solution = solution
        self.trace: tuple = ()  # records of the iterations completed before the failure


@dataclass(frozen=True)
class SharedVariableLink:
    id: str
    kind: str  # "voltage" | "sb"
    upper: str
    lower: str
    t: np.ndarray
    r: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    signed: bool = True
    scale: float = 1.0  # link units per unit of the subproblem variable

    def __post_init__(self):
        n = 4 if self.kind == "voltage" else 1
        for name in ("t", "r", "alpha", "beta"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), float)).copy()
            if arr.shape != (n,):
                raise ValueError(f"link {self.id}: {name} must have length {n}")
            object.__setattr__(self, name, arr)
        if np.any(self.beta <= 0.0):
            raise ValueError(f"link {self.id}: beta must be positive")
        if not self.signed and np.any(self.alpha < 0.0):
            raise ValueError(f"link {self.id}: alpha must be non-negative for the absolute form")

    @property
    def mismatch(self) -> np.ndarray:
        return np.abs(self.t - self.r)

    def seen_from(self, other: np.ndarray) -> LinkPenalty:
        """The penalty as one owner sees it, with ``other`` frozen."""
        mg = self.id.split(":", 1)[1] if self.kind == "voltage" else None
        bus = int(self.id.split(":", 1)[1]) if self.kind == "sb" else None
        role = -1 if other is self.t else 1
        s = self.scale
        return LinkPenalty(
            self.id, self.kind, other / s, self.alpha * s, self.beta * s, mg_id=mg, sb_bus=bus, signed=self.signed, role=role
        )

    def penalty(self) -> float:
        """Exact penalty value at the current copies."""
        u = self.t - self.r
        lin = self.alpha @ u if self.signed else self.alpha @ np.abs(u)
        return float(lin + np.sum((self.beta * u) ** 2))


@dataclass(frozen=True)
class AtcConfig:
    eps1: float = 1e-3
    eps2: float = 1e-3
    sigma: float = 1.2
    alpha0: float = 0.0
    beta0: float = 1.0
    max_iterations: int = 100
    linear_term: str = "signed"  # "signed" | "absolute"
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if not (self.eps1 > 0 and self.eps2 > 0):
            raise ValueError("eps1 and eps2 must be positive")
        if not self.sigma >= 1.0:
            raise ValueError("sigma must be at least 1")
        if not self.beta0 > 0.0:
            raise ValueError("beta0 must be positive")
        if self.linear_term not in ("signed", "absolute"):
            raise ValueError("linear_term must be 'signed' or 'absolute'")
        if self.alpha0 < 0.0 and self.linear_term == "absolute":
            raise ValueError("alpha0 must be non-negative for the absolute form")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.sigma > 3.0:
            warnings.warn("sigma > 3 grows the penalty fast and tends to ill-condition the subproblems", stacklevel=2)


@dataclass(frozen=True)
class ConvergenceCheck:
    converged: bool
    objective_ok: bool
    links_ok: bool
    rel_change: dict[str, float]
    max_mismatch: dict[str, float]


def check_convergence(prev_f, curr_f, links, eps1: float, eps2: float) -> ConvergenceCheck:
    """Both tests must pass: relative objective change and elementwise mismatch."""
    rel = {}
    for name, f in curr_f.items():
        rel[name] = abs(f - prev_f[name]) / max(abs(f), EPS_DIV)
    mism = {ln.id: float(np.max(ln.mismatch)) for ln in links}
    f_ok = all(v <= eps1 for v in rel.values())
    l_ok = all(np.all(ln.mismatch <= eps2) for ln in links)
    return ConvergenceCheck(f_ok and l_ok, f_ok, l_ok, rel, mism)


def update_coefficients(link: SharedVariableLink, sigma: float, beta: float | None = None) -> SharedVariableLink:
    """``alpha += 2 beta^2 (t - r)``, ``beta *= sigma``.

    ``beta`` (optional) sets the new beta directly; the loop passes
    ``beta0 * sigma**k`` so the schedule is exact rather than a running product.
    """
    u = link.t - link.r
    # the absolute form grows alpha with the mismatch magnitude to keep it >= 0
    alpha = link.alpha + 2.0 * link.beta**2 * (u if link.signed else np.abs(u))
    new_beta = sigma * link.beta if beta is None else np.full_like(link.beta, beta)
    return replace(link, alpha=alpha, beta=new_beta)


@dataclass(frozen=True)
class AtcIterationRecord:
    k: int
    f_star: dict[str, float]
    penalty: dict[str, float]
    max_mismatch: dict[str, float]
    alpha: dict[str, list[float]]
    beta: dict[str, list[float]]
    status: dict[str, str]
    audit: dict[str, float]
    wall_time: float = field(default=0.0, compare=False)
    # per-subsystem (problem, x*) kept in memory for re-evaluation
    solutions: dict = field(default_factory=dict, repr=False, compare=False)


@dataclass(frozen=True)
class AtcResult:
    converged: bool
    iterations: int
    sb: dict[int, SbDecision]
    dg: tuple[tuple[int, float, float], ...]  # (bus, P MW, Q MVar)
    exchange: dict[str, tuple[float, float, float]]  # MG id -> (P MW, Q MVar, S MVA)
    grid: tuple[float, float]  # MW, MVar
    bus_v: dict[int, float]
    bus_delta: dict[int, float]
    objective: float  # sum of the subsystem objectives at the last iterate, penalties excluded
    trace: tuple[AtcIterationRecord, ...]
    links: tuple[SharedVariableLink, ...]
    weights: WeightSet
    scenario: str


# --------------------------------------------------------------------------


def _accept(name: str, k: int, sol: Solution) -> Solution:
    if sol.status == "optimal":
        return sol
    if (
        sol.status == "max-iter"
        and np.all(np.isfinite(sol.x_star))
        and sol.max_constraint_violation <= ACCEPT_VIOLATION
    ):
        log.warning("%s: iteration limit at ATC step %d, accepting feasible iterate", name, k)
        return sol
    raise AtcError(name, k, sol)


def _solve(problem: ProblemSpec, x0: np.ndarray, opts: SolverOptions) -> Solution:
    if problem.affine:
        return solve_linear(problem, x0)
    return solve(problem, x0, opts)


def _voltage_vector(state_at, dist_bus: int, mg_bus: int) -> np.ndarray:
    vd, dd = state_at(dist_bus)
    vm, dm = state_at(mg_bus)
    return np.array([vd, vm, dd, dm])


def _own_voltage(problem: ProblemSpec, subcase: Subcase, dist_bus: int, mg_bus: int, x: np.ndarray) -> np.ndarray:
    st = network_state(problem, subcase, x)
    return _voltage_vector(st.at, dist_bus, mg_bus)


def _penalty_of(problem_links: list[tuple[np.ndarray, LinkPenalty]]) -> float:
    tot = 0.0
    for own, ln in problem_links:
        tot += ln.terms(own)[0]
    return tot


def audit_solution(problem: ProblemSpec, subcase: Subcase, x: np.ndarray) -> float:
    """Max power-flow mismatch at a solution, via the magnitude/angle form."""
    u = unpack(problem, x)
    base = subcase.base_mva
    exch = {bc.bus: (u["p_mg"][k], u["q_mg"][k]) for k, bc in enumerate(subcase.boundaries)}
    grid = tuple(u["grid"]) if "grid" in u else (0.0, 0.0)
    inj = scheduled_injections(
        subcase,
        dg_p=u["p_dg"] * base,
        dg_q=u["q_dg"] * base,
        sb_pb_kw=u["p_b"],
        exchange=exch,
        grid=grid,
    )
    return residuals(network_state(problem, subcase, x), subcase, inj).max_abs


class _Coordinator:
    def __init__(self, case: CaseData, scenario: str, config: AtcConfig, weights: WeightSet | None, executor):
        self.case = case
        self.scenario = scenario
        self.cfg = config
        self.executor = executor
        self.part: Partition = partition_case(case)
        full = full_subcase(case)
        self.base = solve_base_powerflow(full)
        self.weights = weights or compute_weights(self.base, case, scenario)
        flows = tie_flows(case, self.base)
        self.mgs = {mg.id: mg for mg in case.microgrids}
        a0, b0 = config.alpha0, config.beta0
        signed = config.linear_term == "signed"
        links = {}
        for mg in case.microgrids:
            vec = _voltage_vector(self.base.at, mg.boundary_bus_dist, mg.boundary_bus_mg)
            links[f"v:{mg.id}"] = SharedVariableLink(
                f"v:{mg.id}", "voltage", "dsc", f"mg:{mg.id}", vec, vec, np.full(4, a0), np.full(4, b0), signed
            )
        self.sb_owner = {}
        for sb in self.part.dist_sbs:
            self.sb_owner[sb.bus] = "dsc"
        for mg_id, sbs in self.part.mg_sbs.items():
            for sb in sbs:
                self.sb_owner[sb.bus] = f"mg:{mg_id}"
        for sb in case.smart_buildings:
            pb = np.array([sb.base_exchange * SB_LINK_SCALE])
            links[f"sb:{sb.bus}"] = SharedVariableLink(
                f"sb:{sb.bus}", "sb", self.sb_owner[sb.bus], f"sb:{sb.bus}", pb, pb, np.full(1, a0), np.full(1, b0),
                signed, SB_LINK_SCALE,
            )
        self.links: dict[str, SharedVariableLink] = links
        # warm starts
        self.x_sb = {sb.bus: sb_start(sb) for sb in case.smart_buildings}
        self.x_mg = {}
        for sc in self.part.mg_subcases:
            _, _, ps, qs = flows[sc.mg_id]
            self.x_mg[sc.mg_id] = dict(
                p_b=[sb.base_exchange for sb in sc.smart_buildings], p_mg=[ps], q_mg=[qs]
            )
        dist = self.part.dist_subcase
        self.x_dsc = dict(
            grid=list(slack_injection(self.base, full)),
            p_b=[sb.base_exchange for sb in dist.smart_buildings],
            p_mg=[flows[bc.mg_id][0] for bc in dist.boundaries],
            q_mg=[flows[bc.mg_id][1] for bc in dist.boundaries],
        )

    def _map(self, fn, items):
        if self.executor is None:
            return [fn(it) for it in items]
        return list(self.executor.map(fn, items))

    # ---- phases
    def _sb_task(self, k):
        def task(sb):
            ln = self.links[f"sb:{sb.bus}"]
            lp = ln.seen_from(ln.t)
            p = build_sbc_problem(
                sb, float(lp.other[0]), (float(lp.alpha[0]), float(lp.beta[0])), self.case.price, signed=ln.signed
            )
            sol = _accept(f"sb:{sb.bus}", k, _solve(p, self.x_sb[sb.bus], self.cfg.solver))
            pen = lp.terms(sol.x_star[:1])[0]
            return sb, p, sol, pen

        return task

    def _mg_task(self, k):
        def task(sc: Subcase):
            mg = self.mgs[sc.mg_id]
            vlink = self.links[f"v:{mg.id}"]
            pens = [vlink.seen_from(vlink.t)]
            for sb in sc.smart_buildings:
                ln = self.links[f"sb:{sb.bus}"]
                pens.append(ln.seen_from(ln.r))
            p = build_mgc_problem(sc, self.weights, PenaltyTerms(tuple(pens)), self.case.lambda_, self.case.price)
            x0 = self.x_mg[sc.mg_id]
            if isinstance(x0, dict):
                x0 = network_start(p, sc, self.base, x0)
            sol = _accept(sc.name, k, _solve(p, x0, self.cfg.solver))
            return sc, p, sol

        return task

    def _mg_penalty(self, sc, p, x):
        mg = self.mgs[sc.mg_id]
        vlink = self.links[f"v:{mg.id}"]
        own = [(_own_voltage(p, sc, mg.boundary_bus_dist, mg.boundary_bus_mg, x), vlink.seen_from(vlink.t))]
        u = unpack(p, x)
        for j, sb in enumerate(sc.smart_buildings):
            ln = self.links[f"sb:{sb.bus}"]
            own.append((u["p_b"][j : j + 1], ln.seen_from(ln.r)))
        return _penalty_of(own)

    def iterate(self, k: int):
        t_start = time.perf_counter()
        f_star, pens, status, audit, sols = {}, {}, {}, {}, {}
        # step 2: buildings respond to the current targets
        for sb, p, sol, pen in self._map(self._sb_task(k), list(self.case.smart_buildings)):
            name = f"sb:{sb.bus}"
            self.x_sb[sb.bus] = sol.x_star
            ln = self.links[name]
            self.links[name] = replace(ln, r=sol.x_star[:1] * ln.scale)
            f_star[name], pens[name], status[name] = sol.f_star - pen, pen, sol.status
            sols[name] = (p, sol.x_star)
        # step 3: microgrids, with fresh building responses and last feeder targets
        for sc, p, sol in self._map(self._mg_task(k), list(self.part.mg_subcases)):
            mg = self.mgs[sc.mg_id]
            x = sol.x_star
            pens[sc.name] = self._mg_penalty(sc, p, x)
            self.x_mg[sc.mg_id] = x
            vl = self.links[f"v:{mg.id}"]
            self.links[vl.id] = replace(vl, r=_own_voltage(p, sc, mg.boundary_bus_dist, mg.boundary_bus_mg, x))
            u = unpack(p, x)
            for j, sb in enumerate(sc.smart_buildings):
                ln = self.links[f"sb:{sb.bus}"]
                self.links[ln.id] = replace(ln, t=u["p_b"][j : j + 1] * ln.scale)
            f_star[sc.name], status[sc.name] = sol.f_star - pens[sc.name], sol.status
            audit[sc.name] = audit_solution(p, sc, x)
            sols[sc.name] = (p, x)
        # step 4: distribution system
        dist = self.part.dist_subcase
        pen_list, own_idx = [], []
        for bc in dist.boundaries:
            vl = self.links[f"v:{bc.mg_id}"]
            pen_list.append(vl.seen_from(vl.r))
        for sb in dist.smart_buildings:
            ln = self.links[f"sb:{sb.bus}"]
            pen_list.append(ln.seen_from(ln.r))
        p = build_dsc_problem(dist, self.weights, PenaltyTerms(tuple(pen_list)), self.case.lambda_, self.case.price)
        x0 = self.x_dsc if not isinstance(self.x_dsc, dict) else network_start(p, dist, self.base, self.x_dsc)
        sol = _accept("dsc", k, _solve(p, x0, self.cfg.solver))
        x = sol.x_star
        self.x_dsc = x
        u = unpack(p, x)
        for bc, lp in zip(dist.boundaries, pen_list):
            mg = self.mgs[bc.mg_id]
            vl = self.links[f"v:{mg.id}"]
            own = _own_voltage(p, dist, mg.boundary_bus_dist, mg.boundary_bus_mg, x)
            own_idx.append((own, lp))
            self.links[vl.id] = replace(vl, t=own)
        for j, sb in enumerate(dist.smart_buildings):
            ln = self.links[f"sb:{sb.bus}"]
            own_idx.append((u["p_b"][j : j + 1], pen_list[len(dist.boundaries) + j]))
            self.links[ln.id] = replace(ln, t=u["p_b"][j : j + 1] * ln.scale)
        pens["dsc"] = _penalty_of(own_idx)
        f_star["dsc"], status["dsc"] = sol.f_star - pens["dsc"], sol.status
        audit["dsc"] = audit_solution(p, dist, x)
        sols["dsc"] = (p, x)
        self.last = sols
        return f_star, pens, status, audit, sols, time.perf_counter() - t_start

    def result(self, converged: bool, k: int, trace: list) -> AtcResult:
        base = self.case.base_mva
        sols = self.last
        sb = {}
        for s in self.case.smart_buildings:
            sb[s.bus] = sb_decision(s, self.x_sb[s.bus])
        dg, bus_v, bus_d = [], {}, {}
        exchange = {}
        dist = self.part.dist_subcase
        for name, sc in [("dsc", dist)] + [(s.name, s) for s in self.part.mg_subcases]:
            p, x = sols[name]
            u = unpack(p, x)
            for g, pg, qg in zip(sc.dg_units, u["p_dg"], u["q_dg"]):
                dg.append((g.bus, float(pg * base), float(qg * base)))
            for j, b in enumerate(sc.bus_ids):
                if b in sc.interior_buses:
                    bus_v[b] = float(u["v"][j])
                    bus_d[b] = float(u["delta"][j])
            if name == "dsc":
                grid = (float(u["grid"][0] * base), float(u["grid"][1] * base))
                for j, bc in enumerate(sc.boundaries):
                    pm, qm = float(u["p_mg"][j] * base), float(u["q_mg"][j] * base)
                    exchange[bc.mg_id] = (pm, qm, float(np.hypot(pm, qm)))
        last = trace[-1]
        objective = sum(last.f_star[n] for n in sorted(last.f_star))
        return AtcResult(
            converged=converged,
            iterations=k,
            sb=sb,
            dg=tuple(sorted(dg)),
            exchange=dict(sorted(exchange.items())),
            grid=grid,
            bus_v=dict(sorted(bus_v.items())),
            bus_delta=dict(sorted(bus_d.items())),
            objective=float(objective),
            trace=tuple(trace),
            links=tuple(self.links[i] for i in sorted(self.links)),
            weights=self.weights,
            scenario=self.scenario,
        )


def run_atc(
    case: CaseData,
    scenario: str = "case1",
    config: AtcConfig | None = None,
    weights: WeightSet | None = None,
    executor: Executor | None = None,
) -> AtcResult:
    """Coordinate all subsystems until both convergence tests pass.

    ``executor`` (optional) runs the building phase and the microgrid phase
    concurrently; phases remain barriers, so results do not depend on it.
    """
    if scenario not in ("case1", "case2"):
        raise ValueError(f"unknown scenario {scenario!r}")
    cfg = config or AtcConfig()
    co = _Coordinator(case, scenario, cfg, weights, executor)
    trace: list[AtcIterationRecord] = []
    prev_f = None
    converged = False
    k = 0
    for k in range(1, cfg.max_iterations + 1):
        snap_a = {i: ln.alpha.tolist() for i, ln in sorted(co.links.items())}
        snap_b = {i: ln.beta.tolist() for i, ln in sorted(co.links.items())}
        try:
            f_star, pens, status, audit, sols, wall = co.iterate(k)
        except AtcError as exc:
            exc.trace = tuple(trace)
            raise
        links = [co.links[i] for i in sorted(co.links)]
        mism = {ln.id: float(np.max(ln.mismatch)) for ln in links}
        if not links:
            check = ConvergenceCheck(True, True, True, {}, {})
        elif prev_f is None:
            check = None
        else:
            check = check_convergence(prev_f, f_star, links, cfg.eps1, cfg.eps2)
        trace.append(
            AtcIterationRecord(k, dict(f_star), pens, mism, snap_a, snap_b, status, audit, wall, sols)
        )
        worst = max(mism.values(), default=0.0)
        log.info("ATC k=%d max|t-r|=%.3e f_dsc=%.6g", k, worst, f_star["dsc"])
        if check is not None and check.converged:
            converged = True
            break
        # after k un-converged iterations every beta is beta0 * sigma**k
        beta = cfg.beta0 * cfg.sigma**k
        for i in list(co.links):
            co.links[i] = update_coefficients(co.links[i], cfg.sigma, beta)
        prev_f = f_star
    return co.result(converged, k, trace)
