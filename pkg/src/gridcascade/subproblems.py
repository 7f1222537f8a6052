"""Coordinator subproblems as solver-ready :class:`ProblemSpec` objects.

Three families are built here:

* distribution (DSC): grid import, feeder DGs, building exchange targets and
  the microgrid exchanges as withdrawals at the MG-side copy buses;
* microgrid (MGC): its DGs and buildings, fed through the distribution-side
  copy bus whose free injection is the exchange;
* smart building (SBC): a small linear model of load, PV and battery.

Units: network variables are per-unit on the case base, building variables are
kW / kWh (also inside DSC and MGC, where P_B enters the balance as
``P_B / (1000 * base_mva)``).  Objective terms are in MW-hour dollars:
``price * P[MW]``; the exchange term is ``lambda * (P_MG^2 + Q_MG^2)`` in MVA^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .grid import CaseData, Subcase, SmartBuildingSpec, full_subcase, partition_case
from .nlp import ProblemSpec
from .powerflow import (
    BranchSet,
    NetworkState,
    branch_end_derivatives,
    branch_flows,
    injection_hessian,
    injection_jacobian,
    injections,
    slack_injection,
    solve_base_powerflow,
)

ABS_SMOOTHING = 1e-8
WEIGHT_FLOOR = 1e-6
SLACK_VOLTAGE = 1.0

SB_FIELDS = ("p_b", "p_l", "p_pv", "p_ch", "p_dis", "e")


class WiringError(ValueError):
    """Penalty links do not match the subsystem being built."""


# --------------------------------------------------------------------------
# penalty


def evaluate_penalty(alpha, beta, t, r) -> float:
    """``alpha . |t - r| + ||beta * (t - r)||^2`` (exact absolute value)."""
    alpha, beta, t, r = (np.atleast_1d(np.asarray(a, float)) for a in (alpha, beta, t, r))
    if not (alpha.shape == beta.shape == t.shape == r.shape):
        raise ValueError("penalty vectors must have equal length")
    u = t - r
    return float(alpha @ np.abs(u) + np.sum((beta * u) ** 2))


def signed_penalty(alpha, beta, u):
    """Augmented-Lagrangian form ``alpha.u + sum (beta u)^2``, with value,
    gradient and diagonal second derivative in ``u``."""
    b2 = beta * beta
    return float(alpha @ u + np.sum(b2 * u * u)), alpha + 2.0 * b2 * u, 2.0 * b2 + 0.0 * u


def smooth_penalty(alpha, beta, u, eps: float = ABS_SMOOTHING):
    """Smoothed penalty ``alpha.(sqrt(u^2+eps^2) - eps) + sum (beta u)^2``.

    Returns value, gradient and the (diagonal) second derivative in ``u``.
    The shift by ``eps`` keeps the value exactly zero at ``u = 0``.
    """
    root = np.sqrt(u * u + eps * eps)
    b2 = beta * beta
    val = float(alpha @ (root - eps) + np.sum(b2 * u * u))
    grad = alpha * u / root + 2.0 * b2 * u
    hess = alpha * eps * eps / root**3 + 2.0 * b2
    return val, grad, hess


@dataclass(frozen=True)
class LinkPenalty:
    """One coupling seen from inside a subproblem.

    ``other`` is the opposite copy, held constant during the solve.  Voltage
    links carry ``(V_dist_side, V_mg_side, delta_dist_side, delta_mg_side)``;
    building links carry ``P_B`` in kW.

    With ``signed`` the linear term is ``alpha.(t - r)``; ``role`` is +1 when
    this subproblem owns ``t`` and -1 when it owns ``r``.  Otherwise the
    linear term is ``alpha.|t - r|`` (smoothed).
    """

    link_id: str
    kind: str  # "voltage" | "sb"
    other: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    mg_id: str | None = None
    sb_bus: int | None = None
    signed: bool = False
    role: int = 1

    def terms(self, own: np.ndarray):
        u = own - self.other
        if self.signed:
            return signed_penalty(self.role * self.alpha, self.beta, u)
        return smooth_penalty(self.alpha, self.beta, u)

    def __post_init__(self):
        n = 4 if self.kind == "voltage" else 1
        for name in ("other", "alpha", "beta"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), float))
            if arr.shape != (n,):
                raise WiringError(f"link {self.link_id}: {name} must have length {n}")
            if not np.all(np.isfinite(arr)):
                raise WiringError(f"link {self.link_id}: non-finite {name}")
            object.__setattr__(self, name, arr)
        if np.any(self.beta < 0.0):
            raise WiringError(f"link {self.link_id}: beta must be non-negative")
        if not self.signed and np.any(self.alpha < 0.0):
            raise WiringError(f"link {self.link_id}: alpha must be non-negative for the absolute form")
        if self.role not in (1, -1):
            raise WiringError(f"link {self.link_id}: role must be +1 or -1")


@dataclass(frozen=True)
class PenaltyTerms:
    links: tuple[LinkPenalty, ...] = ()

    def voltage(self, mg_id: str) -> LinkPenalty | None:
        for ln in self.links:
            if ln.kind == "voltage" and ln.mg_id == mg_id:
                return ln
        return None

    def building(self, bus: int) -> LinkPenalty | None:
        for ln in self.links:
            if ln.kind == "sb" and ln.sb_bus == bus:
                return ln
        return None


NO_PENALTY = PenaltyTerms()


# --------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class WeightSet:
    w1: float
    w2: float
    w3: float
    w4: float
    w5: Mapping[str, float] = field(default_factory=dict)
    w6: Mapping[str, float] = field(default_factory=dict)
    w7: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        vals = [self.w1, self.w2, self.w3, self.w4, *self.w5.values(), *self.w6.values(), *self.w7.values()]
        if not all(np.isfinite(v) and v >= 0.0 for v in vals):
            raise ValueError("weights must be finite and non-negative")

    def to_dict(self) -> dict:
        return {
            "w1": self.w1,
            "w2": self.w2,
            "w3": self.w3,
            "w4": self.w4,
            "w5": dict(self.w5),
            "w6": dict(self.w6),
            "w7": dict(self.w7),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> WeightSet:
        return cls(d["w1"], d["w2"], d["w3"], d["w4"], dict(d["w5"]), dict(d["w6"]), dict(d["w7"]))


def _inv(term: float) -> float:
    return 1.0 / max(abs(term), WEIGHT_FLOOR)


def tie_flows(case: CaseData, state: NetworkState) -> dict[str, tuple[float, float, float, float]]:
    """Per microgrid: ``(P, Q)`` delivered at the MG-side bus and ``(P, Q)`` sent
    from the distribution-side bus, all in pu, for a full-network state."""
    out = {}
    for mg in case.microgrids:
        tie = case.line(mg.tie_line)
        ids = (tie.from_bus, tie.to_bus)
        v = np.array([state.at(b)[0] for b in ids])
        d = np.array([state.at(b)[1] for b in ids])
        br = BranchSet.from_lines([tie], ids, case.base_mva)
        pf, qf, pt, qt = branch_flows(v, d, br)
        at_from = (float(pf[0]), float(qf[0]))
        at_to = (float(pt[0]), float(qt[0]))
        mg_end = at_from if tie.from_bus == mg.boundary_bus_mg else at_to
        dist_end = at_to if tie.from_bus == mg.boundary_bus_mg else at_from
        out[mg.id] = (-mg_end[0], -mg_end[1], dist_end[0], dist_end[1])
    return out


def compute_weights(base_state: NetworkState | None, case: CaseData, scenario: str) -> WeightSet:
    """Normalise every objective term by its magnitude at the base power flow.

    ``w_i = 1 / max(|term_i|, 1e-6)``; case1 then zeroes the two exchange terms.
    """
    if scenario not in ("case1", "case2"):
        raise ValueError(f"unknown scenario {scenario!r}")
    full = full_subcase(case)
    if base_state is None:
        base_state = solve_base_powerflow(full)
    base = case.base_mva
    rho, lam = case.price, case.lambda_
    part = partition_case(case)
    p_grid, _ = slack_injection(base_state, full)
    dist = part.dist_subcase
    t1 = rho * p_grid * base
    t2 = sum(g.cost * 0.5 * (g.p_min + g.p_max) for g in dist.dg_units)
    t3 = sum(rho * sb.base_exchange / 1000.0 for sb in dist.smart_buildings)
    flows = tie_flows(case, base_state)
    t4 = sum(lam * (p * p + q * q) * base**2 for p, q, _, _ in flows.values())
    w5, w6, w7 = {}, {}, {}
    for sc in part.mg_subcases:
        t5 = sum(g.cost * 0.5 * (g.p_min + g.p_max) for g in sc.dg_units)
        t6 = sum(rho * sb.base_exchange / 1000.0 for sb in sc.smart_buildings)
        _, _, ps, qs = flows[sc.mg_id]
        t7 = lam * (ps * ps + qs * qs) * base**2
        w5[sc.mg_id], w6[sc.mg_id] = _inv(t5), _inv(t6)
        w7[sc.mg_id] = 0.0 if scenario == "case1" else _inv(t7)
    w4 = 0.0 if scenario == "case1" else _inv(t4)
    return WeightSet(_inv(t1), _inv(t2), _inv(t3), w4, w5, w6, w7)


# --------------------------------------------------------------------------
# smart building


@dataclass(frozen=True)
class SbDecision:
    bus: int
    p_b: float  # kW drawn from the grid
    p_ess: float  # kW, positive = discharge
    e: float  # kWh after the hour
    p_pv: float
    p_l: float
    p_ch: float = 0.0
    p_dis: float = 0.0


def sb_bounds(sb: SmartBuildingSpec) -> tuple[np.ndarray, np.ndarray]:
    b = sb.bess
    lo_b, hi_b = sb.pb_bounds
    lower = np.array([lo_b, sb.p_load_min, 0.0, 0.0, 0.0, b.e_min])
    upper = np.array([hi_b, sb.p_load_max, sb.pv_forecast, b.rate_max, b.rate_max, b.e_capacity])
    return lower, upper


def sb_equality_rows(sb: SmartBuildingSpec) -> tuple[np.ndarray, np.ndarray]:
    """``A x = b`` over ``(p_b, p_l, p_pv, p_ch, p_dis, e)``.

    Row 0: ``p_b + p_pv + p_dis - p_ch - p_l = 0``.
    Row 1: ``e + p_dis/eta - eta*p_ch = E0`` (one-hour horizon).
    """
    eta = sb.bess.efficiency
    A = np.array(
        [
            [1.0, -1.0, 1.0, -1.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, -eta, 1.0 / eta, 1.0],
        ]
    )
    b = np.array([0.0, sb.bess.e_initial])
    return A, b


def build_sbc_problem(
    sb: SmartBuildingSpec, pb_target: float, penalty, price: float, signed: bool = False
) -> ProblemSpec:
    """Building dispatch: ``price*P_B/1000 + alpha|P_B - t| + (beta (P_B - t))^2``.

    ``penalty`` is ``(alpha, beta)``.  With both zero the problem is affine
    and flagged for the LP path.  ``signed`` switches the linear term to
    ``alpha (t - P_B)``, the building being the lower copy.
    """
    alpha, beta = (float(v) for v in penalty)
    if not (np.isfinite(alpha) and np.isfinite(beta) and beta >= 0.0):
        raise WiringError("building penalty needs finite alpha and non-negative beta")
    if not signed and alpha < 0.0:
        raise WiringError("building penalty needs non-negative alpha for the absolute form")
    lower, upper = sb_bounds(sb)
    A, b = sb_equality_rows(sb)
    c = np.zeros(6)
    c[0] = price / 1000.0
    t = float(pb_target)
    link = LinkPenalty(f"sb:{sb.bus}", "sb", np.array([t]), [alpha], [beta], sb_bus=sb.bus, signed=signed, role=-1)
    affine = alpha == 0.0 and beta == 0.0

    def objective(x):
        val, g, _ = link.terms(x[:1])
        grad = c.copy()
        grad[0] += g[0]
        return float(c @ x) + val, grad

    def equalities(x):
        return A @ x - b, A

    def hessian(x, obj_factor, y, z):
        H = np.zeros((6, 6))
        _, _, h = link.terms(x[:1])
        H[0, 0] = obj_factor * h[0]
        return H

    return ProblemSpec(
        n_vars=6,
        lower=lower,
        upper=upper,
        objective=objective,
        equalities=equalities,
        hessian=hessian,
        names=tuple(f"{f}@{sb.bus}" for f in SB_FIELDS),
        affine=affine,
        blocks={f: slice(k, k + 1) for k, f in enumerate(SB_FIELDS)},
    )


def sb_start(sb: SmartBuildingSpec) -> np.ndarray:
    """Idle-battery base point: full load, full PV."""
    return np.array([sb.base_exchange, sb.p_load_max, sb.pv_forecast, 0.0, 0.0, sb.bess.e_initial])


def sb_decision(sb: SmartBuildingSpec, x: np.ndarray) -> SbDecision:
    p_b, p_l, p_pv, p_ch, p_dis, e = (float(v) for v in x[:6])
    return SbDecision(sb.bus, p_b, p_dis - p_ch, e, p_pv, p_l, p_ch, p_dis)


# --------------------------------------------------------------------------
# network assembler shared by DSC, MGC and the joint problem


class _Layout:
    def __init__(self):
        self.n = 0
        self.blocks: dict[str, slice] = {}
        self.lower: list[np.ndarray] = []
        self.upper: list[np.ndarray] = []
        self.names: list[str] = []

    def add(self, name: str, lower, upper, labels: Sequence[str]) -> slice:
        lower = np.atleast_1d(np.asarray(lower, float))
        upper = np.atleast_1d(np.asarray(upper, float))
        sl = slice(self.n, self.n + lower.size)
        self.blocks[name] = sl
        self.lower.append(lower)
        self.upper.append(upper)
        self.names.extend(labels)
        self.n += lower.size
        return sl


# local branch variables (V_own, V_other, theta) -> (V_own, V_other, d_own, d_other)
_T = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]])


class NetworkModel:
    """AC network equations over one bus set plus extra linear variables.

    Variables 0..n-1 are voltage magnitudes and n..2n-1 angles in bus order.
    Power-balance rows are ``P_inj(V, delta) + P_d - sum(coef * x_var) = 0``.
    """

    def __init__(self, subcase: Subcase):
        self.sc = subcase
        self.nb = subcase.n_bus
        self.Y = subcase.admittance
        self.layout = _Layout()
        ids = subcase.bus_ids
        vlo = np.array(subcase.v_min, float)
        vhi = np.array(subcase.v_max, float)
        dlo = np.full(self.nb, -np.inf)
        dhi = np.full(self.nb, np.inf)
        if subcase.fixed_angle:
            # the substation holds a fixed phasor 1.0 pu at angle zero
            k = subcase.index(subcase.slack_bus)
            vlo[k] = vhi[k] = SLACK_VOLTAGE
            dlo[k] = dhi[k] = 0.0
        self.layout.add("v", vlo, vhi, [f"V{b}" for b in ids])
        self.layout.add("delta", dlo, dhi, [f"d{b}" for b in ids])
        self.sources: list[tuple[int, int, float, str]] = []  # (bus pos, var, coef, "p"|"q")
        self.lin_c: dict[int, float] = {}
        self.quad: dict[int, float] = {}
        self.penalties: list[tuple[np.ndarray, LinkPenalty]] = []
        self.lin_eq: list[tuple[np.ndarray, float]] = []  # (row over all vars, rhs)
        self.flow_defs: list[tuple[int, int, str, str, float]] = []  # (var, branch, end, p|q, sign)
        self.branches = BranchSet.from_lines(subcase.lines, ids, subcase.base_mva)

    # ---- construction helpers
    def add_vars(self, name, lower, upper, labels) -> slice:
        return self.layout.add(name, lower, upper, labels)

    def inject(self, bus: int, var: int, coef: float, kind: str) -> None:
        self.sources.append((self.sc.index(bus), var, coef, kind))

    def linear_cost(self, var: int, coef: float) -> None:
        self.lin_c[var] = self.lin_c.get(var, 0.0) + coef

    def quadratic_cost(self, var: int, coef: float) -> None:
        # adds coef * x^2
        self.quad[var] = self.quad.get(var, 0.0) + coef

    def add_penalty(self, own: Sequence[int], link: LinkPenalty) -> None:
        self.penalties.append((np.asarray(own, dtype=int), link))

    def vpos(self, bus: int) -> int:
        return self.sc.index(bus)

    def dpos(self, bus: int) -> int:
        return self.nb + self.sc.index(bus)

    # ---- finalisation
    def build(self, affine: bool = False) -> ProblemSpec:
        n = self.layout.n
        nb = self.nb
        lower = np.concatenate(self.layout.lower)
        upper = np.concatenate(self.layout.upper)
        c = np.zeros(n)
        for k, v in self.lin_c.items():
            c[k] += v
        qd = np.zeros(n)
        for k, v in self.quad.items():
            qd[k] += v
        src_p = [(b, v, cf) for b, v, cf, kind in self.sources if kind == "p"]
        src_q = [(b, v, cf) for b, v, cf, kind in self.sources if kind == "q"]
        S_p = np.zeros((nb, n))
        S_q = np.zeros((nb, n))
        for b, v, cf in src_p:
            S_p[b, v] += cf
        for b, v, cf in src_q:
            S_q[b, v] += cf
        p_d, q_d = self.sc.p_demand, self.sc.q_demand
        A_lin = np.array([row for row, _ in self.lin_eq]).reshape(len(self.lin_eq), n)
        b_lin = np.array([rhs for _, rhs in self.lin_eq])
        Y = self.Y
        br = self.branches
        nbr = len(br)
        smax2 = br.s_max**2
        flow_defs = list(self.flow_defs)
        pens = list(self.penalties)

        def split(x):
            return x[:nb], x[nb : 2 * nb]

        def objective(x):
            f = float(c @ x + qd @ (x * x))
            g = c + 2.0 * qd * x
            for own, ln in pens:
                val, gp, _ = ln.terms(x[own])
                f += val
                np.add.at(g, own, gp)
            return f, g

        def equalities(x):
            v, d = split(x)
            p, q = injections(v, d, Y)
            dpd, dpv, dqd, dqv = injection_jacobian(v, d, Y)
            hp = p + p_d - S_p @ x
            hq = q + q_d - S_q @ x
            Jp = -S_p.copy()
            Jq = -S_q.copy()
            Jp[:, :nb] += dpv
            Jp[:, nb : 2 * nb] += dpd
            Jq[:, :nb] += dqv
            Jq[:, nb : 2 * nb] += dqd
            vals = [hp, hq]
            jacs = [Jp, Jq]
            if flow_defs:
                fv, fJ = _flow_rows(x, v, d)
                vals.append(fv)
                jacs.append(fJ)
            if len(b_lin):
                vals.append(A_lin @ x - b_lin)
                jacs.append(A_lin)
            return np.concatenate(vals), np.vstack(jacs)

        def _end(v, d, end):
            return branch_end_derivatives(v, d, br, end)

        def _flow_rows(x, v, d):
            ends = {e: _end(v, d, e) for e in ("from", "to")}
            vals = np.zeros(len(flow_defs))
            J = np.zeros((len(flow_defs), n))
            for r, (var, b, end, which, sign) in enumerate(flow_defs):
                own, other, p, q, dp, dq, _, _ = ends[end]
                val, grad = (p[b], dp[b]) if which == "p" else (q[b], dq[b])
                vals[r] = x[var] - sign * val
                J[r, var] = 1.0
                cols = [own[b], other[b], nb + own[b], nb + other[b]]
                np.add.at(J[r], cols, -sign * (grad @ _T))
            return vals, J

        def inequalities(x):
            v, d = split(x)
            vals = np.zeros(2 * nbr)
            J = np.zeros((2 * nbr, n))
            for k, end in enumerate(("from", "to")):
                own, other, p, q, dp, dq, _, _ = _end(v, d, end)
                vals[k * nbr : (k + 1) * nbr] = (p * p + q * q) / smax2 - 1.0
                gl = (2.0 * (p[:, None] * dp + q[:, None] * dq) / smax2[:, None]) @ _T
                for b in range(nbr):
                    cols = [own[b], other[b], nb + own[b], nb + other[b]]
                    np.add.at(J[k * nbr + b], cols, gl[b])
            return vals, J

        m_net = 2 * nb

        def hessian(x, obj_factor, y, z):
            v, d = split(x)
            H = np.diag(obj_factor * 2.0 * qd)
            for own, ln in pens:
                _, _, hp_ = ln.terms(x[own])
                np.add.at(H, (own, own), obj_factor * hp_)
            H_dd, H_vd, H_vv = injection_hessian(v, d, Y, y[:nb], y[nb:m_net])
            H[:nb, :nb] += H_vv
            H[nb : 2 * nb, nb : 2 * nb] += H_dd
            H[:nb, nb : 2 * nb] += H_vd
            H[nb : 2 * nb, :nb] += H_vd.T
            ends = {e: _end(v, d, e) for e in ("from", "to")}
            for k, end in enumerate(("from", "to")):
                own, other, p, q, dp, dq, hp, hq = ends[end]
                zk = z[k * nbr : (k + 1) * nbr]
                for b in range(nbr):
                    if zk[b] == 0.0:
                        continue
                    Hl = (2.0 / smax2[b]) * (
                        np.outer(dp[b], dp[b]) + p[b] * hp[b] + np.outer(dq[b], dq[b]) + q[b] * hq[b]
                    )
                    cols = [own[b], other[b], nb + own[b], nb + other[b]]
                    H[np.ix_(cols, cols)] += zk[b] * (_T.T @ Hl @ _T)
            for r, (var, b, end, which, sign) in enumerate(flow_defs):
                own, other, p, q, dp, dq, hp, hq = ends[end]
                Hl = hp[b] if which == "p" else hq[b]
                cols = [own[b], other[b], nb + own[b], nb + other[b]]
                H[np.ix_(cols, cols)] -= y[m_net + r] * sign * (_T.T @ Hl @ _T)
            return H

        return ProblemSpec(
            n_vars=n,
            lower=lower,
            upper=upper,
            objective=objective,
            equalities=equalities,
            inequalities=inequalities if nbr else None,
            hessian=hessian,
            names=tuple(self.layout.names),
            affine=affine,
            blocks=dict(self.layout.blocks),
        )


# --------------------------------------------------------------------------
# DSC / MGC builders


def _check_wiring(subcase: Subcase, penalties: PenaltyTerms, need_voltage: Sequence[str]) -> None:
    expected = {("voltage", m) for m in need_voltage} | {("sb", sb.bus) for sb in subcase.smart_buildings}
    got = set()
    for ln in penalties.links:
        key = ("voltage", ln.mg_id) if ln.kind == "voltage" else ("sb", ln.sb_bus)
        if key in got:
            raise WiringError(f"duplicate penalty link for {key[0]} {key[1]}")
        got.add(key)
    missing = expected - got
    if missing:
        kind, who = sorted(missing, key=str)[0]
        raise WiringError(f"inconsistent penalty wiring: no {kind} link for {who} in {subcase.name}")
    extra = got - expected
    if extra:
        kind, who = sorted(extra, key=str)[0]
        raise WiringError(f"inconsistent penalty wiring: {kind} link for {who} does not belong to {subcase.name}")


def _voltage_own(model: NetworkModel, dist_bus: int, mg_bus: int) -> list[int]:
    return [model.vpos(dist_bus), model.vpos(mg_bus), model.dpos(dist_bus), model.dpos(mg_bus)]


def _add_dgs(model: NetworkModel, subcase: Subcase, weight: float) -> None:
    base = subcase.base_mva
    dgs = subcase.dg_units
    sl_p = model.add_vars("p_dg", [g.p_min / base for g in dgs], [g.p_max / base for g in dgs], [f"Pdg{g.bus}" for g in dgs])
    sl_q = model.add_vars("q_dg", [g.q_min / base for g in dgs], [g.q_max / base for g in dgs], [f"Qdg{g.bus}" for g in dgs])
    for k, g in enumerate(dgs):
        model.inject(g.bus, sl_p.start + k, 1.0, "p")
        model.inject(g.bus, sl_q.start + k, 1.0, "q")
        model.linear_cost(sl_p.start + k, weight * g.cost * base)


def _add_building_targets(model: NetworkModel, subcase: Subcase, weight: float, price: float, penalties: PenaltyTerms):
    sbs = subcase.smart_buildings
    lo = [sb.pb_bounds[0] for sb in sbs]
    hi = [sb.pb_bounds[1] for sb in sbs]
    sl = model.add_vars("p_b", lo, hi, [f"PB{sb.bus}" for sb in sbs])
    kw = 1.0 / (1000.0 * subcase.base_mva)
    for k, sb in enumerate(sbs):
        var = sl.start + k
        model.inject(sb.bus, var, -kw, "p")
        model.linear_cost(var, weight * price / 1000.0)
        model.add_penalty([var], penalties.building(sb.bus))


def build_dsc_problem(
    dist_subcase: Subcase,
    weights: WeightSet,
    penalties: PenaltyTerms,
    lambda_: float,
    price: float,
) -> ProblemSpec:
    if dist_subcase.kind != "dist":
        raise WiringError(f"{dist_subcase.name} is not a distribution subcase")
    mg_ids = [bc.mg_id for bc in dist_subcase.boundaries]
    _check_wiring(dist_subcase, penalties, mg_ids)
    base = dist_subcase.base_mva
    model = NetworkModel(dist_subcase)
    sl = model.add_vars("grid", [-np.inf, -np.inf], [np.inf, np.inf], ["Pgrid", "Qgrid"])
    model.inject(dist_subcase.slack_bus, sl.start, 1.0, "p")
    model.inject(dist_subcase.slack_bus, sl.start + 1, 1.0, "q")
    model.linear_cost(sl.start, weights.w1 * price * base)
    _add_dgs(model, dist_subcase, weights.w2)
    _add_building_targets(model, dist_subcase, weights.w3, price, penalties)
    nbnd = len(dist_subcase.boundaries)
    free = np.full(nbnd, np.inf)
    sl_p = model.add_vars("p_mg", -free, free, [f"Pmg:{m}" for m in mg_ids])
    sl_q = model.add_vars("q_mg", -free, free, [f"Qmg:{m}" for m in mg_ids])
    for k, bc in enumerate(dist_subcase.boundaries):
        # exchange withdrawn at the MG-side copy bus
        model.inject(bc.bus, sl_p.start + k, -1.0, "p")
        model.inject(bc.bus, sl_q.start + k, -1.0, "q")
        model.quadratic_cost(sl_p.start + k, weights.w4 * lambda_ * base**2)
        model.quadratic_cost(sl_q.start + k, weights.w4 * lambda_ * base**2)
        link = penalties.voltage(bc.mg_id)
        tie = next(ln for ln in dist_subcase.lines if ln.id == bc.tie_line)
        dist_bus = tie.from_bus if tie.to_bus == bc.bus else tie.to_bus
        model.add_penalty(_voltage_own(model, dist_bus, bc.bus), link)
    return model.build()


def build_mgc_problem(
    mg_subcase: Subcase,
    weights: WeightSet,
    penalties: PenaltyTerms,
    lambda_: float,
    price: float,
) -> ProblemSpec:
    if mg_subcase.kind != "mg":
        raise WiringError(f"{mg_subcase.name} is not a microgrid subcase")
    mg = mg_subcase.mg_id
    _check_wiring(mg_subcase, penalties, [mg])
    base = mg_subcase.base_mva
    model = NetworkModel(mg_subcase)
    _add_dgs(model, mg_subcase, weights.w5.get(mg, 0.0))
    _add_building_targets(model, mg_subcase, weights.w6.get(mg, 0.0), price, penalties)
    (bc,) = mg_subcase.boundaries
    sl = model.add_vars("p_mg", [-np.inf], [np.inf], [f"Pmg:{mg}"])
    slq = model.add_vars("q_mg", [-np.inf], [np.inf], [f"Qmg:{mg}"])
    # the distribution-side copy bus supplies the exchange
    model.inject(bc.bus, sl.start, 1.0, "p")
    model.inject(bc.bus, slq.start, 1.0, "q")
    w7 = weights.w7.get(mg, 0.0)
    model.quadratic_cost(sl.start, w7 * lambda_ * base**2)
    model.quadratic_cost(slq.start, w7 * lambda_ * base**2)
    tie = next(ln for ln in mg_subcase.lines if ln.id == bc.tie_line)
    mg_bus = tie.from_bus if tie.to_bus == bc.bus else tie.to_bus
    model.add_penalty(_voltage_own(model, bc.bus, mg_bus), penalties.voltage(mg))
    return model.build()


def build_joint_problem(case: CaseData, weights: WeightSet) -> tuple[ProblemSpec, Subcase]:
    """All subsystems in one problem, boundary buses shared, no penalties.

    The objective is the sum of the DSC, MGC and SBC objectives with the same
    weights; exchange variables are tied to the tie-line end flows.
    """
    sc = full_subcase(case)
    part = partition_case(case)
    base = case.base_mva
    price, lam = case.price, case.lambda_
    model = NetworkModel(sc)
    sl = model.add_vars("grid", [-np.inf, -np.inf], [np.inf, np.inf], ["Pgrid", "Qgrid"])
    model.inject(sc.slack_bus, sl.start, 1.0, "p")
    model.inject(sc.slack_bus, sl.start + 1, 1.0, "q")
    model.linear_cost(sl.start, weights.w1 * price * base)
    owner = {}
    for m in part.mg_subcases:
        for b in m.interior_buses:
            owner[b] = m.mg_id
    dgs = sc.dg_units
    slp = model.add_vars("p_dg", [g.p_min / base for g in dgs], [g.p_max / base for g in dgs], [f"Pdg{g.bus}" for g in dgs])
    slq = model.add_vars("q_dg", [g.q_min / base for g in dgs], [g.q_max / base for g in dgs], [f"Qdg{g.bus}" for g in dgs])
    for k, g in enumerate(dgs):
        model.inject(g.bus, slp.start + k, 1.0, "p")
        model.inject(g.bus, slq.start + k, 1.0, "q")
        w = weights.w5.get(owner[g.bus], 0.0) if g.bus in owner else weights.w2
        model.linear_cost(slp.start + k, w * g.cost * base)
    kw = 1.0 / (1000.0 * base)
    for sb in sc.smart_buildings:
        lo, hi = sb_bounds(sb)
        slb = model.add_vars(f"sb:{sb.bus}", lo, hi, [f"{f}@{sb.bus}" for f in SB_FIELDS])
        pb = slb.start
        model.inject(sb.bus, pb, -kw, "p")
        w = weights.w6.get(owner[sb.bus], 0.0) if sb.bus in owner else weights.w3
        # network-side price term plus the building's own objective
        model.linear_cost(pb, (w + 1.0) * price / 1000.0)
        A, b = sb_equality_rows(sb)
        for row, rhs in zip(A, b):
            model.lin_eq.append(((slb, row), rhs))
    branch_of = {ln.id: k for k, ln in enumerate(sc.lines)}
    for mg in case.microgrids:
        tie = case.line(mg.tie_line)
        bidx = branch_of[tie.id]
        mg_end = "from" if tie.from_bus == mg.boundary_bus_mg else "to"
        dist_end = "to" if mg_end == "from" else "from"
        sld = model.add_vars(f"mg_dsc:{mg.id}", [-np.inf] * 2, [np.inf] * 2, [f"Pmg:{mg.id}", f"Qmg:{mg.id}"])
        slm = model.add_vars(f"mg_mgc:{mg.id}", [-np.inf] * 2, [np.inf] * 2, [f"Pmgs:{mg.id}", f"Qmgs:{mg.id}"])
        # received at the MG-side bus (sign flips the outgoing end flow); sent at the dist side
        model.flow_defs += [
            (sld.start, bidx, mg_end, "p", -1.0),
            (sld.start + 1, bidx, mg_end, "q", -1.0),
            (slm.start, bidx, dist_end, "p", 1.0),
            (slm.start + 1, bidx, dist_end, "q", 1.0),
        ]
        for k in range(2):
            model.quadratic_cost(sld.start + k, weights.w4 * lam * base**2)
            model.quadratic_cost(slm.start + k, weights.w7.get(mg.id, 0.0) * lam * base**2)
    # expand the (slice, row) linear rows now that the width is final
    n = model.layout.n
    rows = []
    for (slb, row), rhs in model.lin_eq:
        full_row = np.zeros(n)
        full_row[slb] = row
        rows.append((full_row, rhs))
    model.lin_eq = rows
    return model.build(), sc


# --------------------------------------------------------------------------
# starting points and unpacking


def unpack(problem: ProblemSpec, x: np.ndarray) -> dict[str, np.ndarray]:
    return {name: np.array(x[sl]) for name, sl in problem.blocks.items()}


def network_start(
    problem: ProblemSpec,
    subcase: Subcase,
    state: NetworkState,
    values: Mapping[str, Sequence[float]] | None = None,
) -> np.ndarray:
    """Initial point: voltages from ``state`` (looked up by bus id), DGs at the
    middle of their range, other blocks from ``values`` or zero."""
    x = np.zeros(problem.n_vars)
    b = problem.blocks
    x[b["v"]] = [state.at(bus)[0] for bus in subcase.bus_ids]
    x[b["delta"]] = [state.at(bus)[1] for bus in subcase.bus_ids]
    if "p_dg" in b:
        x[b["p_dg"]] = 0.5 * (problem.lower[b["p_dg"]] + problem.upper[b["p_dg"]])
        x[b["q_dg"]] = 0.5 * (problem.lower[b["q_dg"]] + problem.upper[b["q_dg"]])
    for name, val in (values or {}).items():
        x[b[name]] = val
    return x


def network_state(problem: ProblemSpec, subcase: Subcase, x: np.ndarray) -> NetworkState:
    b = problem.blocks
    return NetworkState(subcase.bus_ids, np.array(x[b["v"]]), np.array(x[b["delta"]]))


def line_loading(problem: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """``(P^2 + Q^2) / S_max^2`` for each branch end (from ends then to ends)."""
    g, _ = problem.eval_ineq(x)
    return g + 1.0
