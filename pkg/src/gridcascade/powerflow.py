"""AC power-flow arithmetic in polar coordinates.

Injections are available in two independent forms: the trigonometric sum
``P_i = sum_j V_i V_j |Y_ij| cos(d_i - d_j - theta_ij)`` used for audits, and
the complex form ``S = V * conj(Y V)`` used inside the optimizers together
with its first and second derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Line, Subcase, branch_admittances


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, mismatch: float, iterations: int):
        super().__init__(f"{message} (max mismatch {mismatch:.3e} pu after {iterations} iterations)")
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass(frozen=True)
class NetworkState:
    bus_ids: tuple[int, ...]
    v: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if len(self.v) != len(self.bus_ids) or len(self.delta) != len(self.bus_ids):
            raise ValueError("state vectors must match the bus count")
        if np.any(np.asarray(self.v) <= 0.0):
            raise ValueError("voltage magnitudes must be positive")

    def at(self, bus_id: int) -> tuple[float, float]:
        k = self.bus_ids.index(bus_id)
        return float(self.v[k]), float(self.delta[k])

    def phasors(self) -> np.ndarray:
        return self.v * np.exp(1j * self.delta)


@dataclass(frozen=True)
class PowerFlowResiduals:
    dp: np.ndarray
    dq: np.ndarray

    @property
    def max_abs(self) -> float:
        if self.dp.size == 0:
            return 0.0
        return float(max(np.max(np.abs(self.dp)), np.max(np.abs(self.dq))))


# --------------------------------------------------------------------------
# nodal injections


def injected_power(state: NetworkState, Y: np.ndarray, i: int) -> tuple[float, float]:
    """Injection at bus position ``i`` from the magnitude/angle sum."""
    mag = np.abs(Y[i])
    theta = np.angle(Y[i])
    ang = state.delta[i] - state.delta - theta
    vv = state.v[i] * state.v * mag
    return float(np.sum(vv * np.cos(ang))), float(np.sum(vv * np.sin(ang)))


def injections_trig(v: np.ndarray, delta: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mag = np.abs(Y)
    ang = delta[:, None] - delta[None, :] - np.angle(Y)
    vv = np.outer(v, v) * mag
    return np.sum(vv * np.cos(ang), axis=1), np.sum(vv * np.sin(ang), axis=1)


def injections(v: np.ndarray, delta: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    V = v * np.exp(1j * delta)
    S = V * np.conj(Y @ V)
    return S.real, S.imag


def injection_jacobian(v: np.ndarray, delta: np.ndarray, Y: np.ndarray):
    """Return ``(dP/ddelta, dP/dV, dQ/ddelta, dQ/dV)`` as dense n x n arrays."""
    V = v * np.exp(1j * delta)
    I = Y @ V
    Vn = V / v
    dS_da = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
    dS_dm = V[:, None] * np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
    return dS_da.real, dS_dm.real, dS_da.imag, dS_dm.imag


def injection_hessian(v: np.ndarray, delta: np.ndarray, Y: np.ndarray, lam_p: np.ndarray, lam_q: np.ndarray):
    """Second derivatives of ``lam_p . P + lam_q . Q``.

    Returns ``(H_dd, H_vd, H_vv)`` where ``H_vd[a, k]`` is the mixed derivative
    with respect to ``V_a`` and ``delta_k``.
    """
    G, B = Y.real, Y.imag
    th = delta[:, None] - delta[None, :]
    c, s = np.cos(th), np.sin(th)
    C = G * c + B * s
    S = G * s - B * c
    M = lam_p[:, None] * C + lam_q[:, None] * S
    N = -lam_p[:, None] * S + lam_q[:, None] * C
    W = np.outer(v, v) * M
    WW = W + W.T
    H_dd = WW - np.diag(WW.sum(axis=1))
    H_vv = M + M.T
    D = N - N.T
    H_vd = -D * v[None, :] + np.diag(D @ v)
    return H_dd, H_vd, H_vv


# --------------------------------------------------------------------------
# branch flows


@dataclass(frozen=True)
class BranchSet:
    """Vectorized pi-model data for a list of lines over a bus ordering."""

    f: np.ndarray
    t: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    s_max: np.ndarray  # pu

    @classmethod
    def from_lines(cls, lines, bus_ids, base_mva: float) -> BranchSet:
        pos = {b: k for k, b in enumerate(bus_ids)}
        lines = list(lines)
        adm = [branch_admittances(ln) for ln in lines]
        arr = lambda k: np.array([a[k] for a in adm], dtype=complex)  # noqa: E731
        return cls(
            f=np.array([pos[ln.from_bus] for ln in lines], dtype=int),
            t=np.array([pos[ln.to_bus] for ln in lines], dtype=int),
            yff=arr(0),
            yft=arr(1),
            ytf=arr(2),
            ytt=arr(3),
            s_max=np.array([ln.s_max / base_mva for ln in lines]),
        )

    def __len__(self) -> int:
        return len(self.f)


def _end_flow(v, delta, own, other, yself, ymut, derivs: bool):
    Vo, Vm = v[own], v[other]
    th = delta[own] - delta[other]
    c, s = np.cos(th), np.sin(th)
    Gs, Bs, Gm, Bm = yself.real, yself.imag, ymut.real, ymut.imag
    A = Gm * c + Bm * s
    Ad = -Gm * s + Bm * c
    Bq = Gm * s - Bm * c
    p = Vo**2 * Gs + Vo * Vm * A
    q = -(Vo**2) * Bs + Vo * Vm * Bq
    if not derivs:
        return p, q
    # local variables: (V_own, V_other, angle difference)
    dp = np.stack([2 * Vo * Gs + Vm * A, Vo * A, Vo * Vm * Ad], axis=1)
    dq = np.stack([-2 * Vo * Bs + Vm * Bq, Vo * Bq, Vo * Vm * A], axis=1)
    m = len(own)
    hp = np.zeros((m, 3, 3))
    hq = np.zeros((m, 3, 3))
    hp[:, 0, 0] = 2 * Gs
    hp[:, 0, 1] = hp[:, 1, 0] = A
    hp[:, 0, 2] = hp[:, 2, 0] = Vm * Ad
    hp[:, 1, 2] = hp[:, 2, 1] = Vo * Ad
    hp[:, 2, 2] = -Vo * Vm * A
    hq[:, 0, 0] = -2 * Bs
    hq[:, 0, 1] = hq[:, 1, 0] = Bq
    hq[:, 0, 2] = hq[:, 2, 0] = Vm * A
    hq[:, 1, 2] = hq[:, 2, 1] = Vo * A
    hq[:, 2, 2] = -Vo * Vm * Bq
    return p, q, dp, dq, hp, hq


def branch_flows(v: np.ndarray, delta: np.ndarray, br: BranchSet):
    """Sending-end flows ``(p_from, q_from, p_to, q_to)`` in pu."""
    pf, qf = _end_flow(v, delta, br.f, br.t, br.yff, br.yft, False)
    pt, qt = _end_flow(v, delta, br.t, br.f, br.ytt, br.ytf, False)
    return pf, qf, pt, qt


def branch_end_derivatives(v, delta, br: BranchSet, end: str):
    """Flows at one end of every branch with local derivatives.

    Local variable order is ``(V_own, V_other, delta_own - delta_other)``.
    Returns ``(own, other, p, q, dp, dq, hp, hq)``.
    """
    if end == "from":
        own, other, ys, ym = br.f, br.t, br.yff, br.yft
    else:
        own, other, ys, ym = br.t, br.f, br.ytt, br.ytf
    return (own, other) + _end_flow(v, delta, own, other, ys, ym, True)


def line_flow(state: NetworkState, line: Line) -> tuple[float, float, float]:
    """Sending-end (from-bus) flow of ``line`` in pu: ``(p, q, |s|)``."""
    yff, yft, _, _ = branch_admittances(line)
    f = state.bus_ids.index(line.from_bus)
    t = state.bus_ids.index(line.to_bus)
    Vf = state.v[f] * np.exp(1j * state.delta[f])
    Vt = state.v[t] * np.exp(1j * state.delta[t])
    s = Vf * np.conj(yff * Vf + yft * Vt)
    return float(s.real), float(s.imag), float(abs(s))


# --------------------------------------------------------------------------
# scheduled injections, residuals, Newton-Raphson


def kw_to_pu(kw, base_mva: float):
    return np.asarray(kw) / (1000.0 * base_mva) if np.ndim(kw) else kw / (1000.0 * base_mva)


def scheduled_injections(
    subcase: Subcase,
    dg_p=None,
    dg_q=None,
    sb_pb_kw=None,
    exchange=None,
    grid=(0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus net injections ``P_g - P_d - P_B`` in pu.

    ``dg_p``/``dg_q`` are in MW/MVar per DG of the subcase, ``sb_pb_kw`` in kW
    per building, ``exchange`` maps a boundary-copy bus to ``(P, Q)`` in pu.  At
    a distribution-side copy of a microgrid boundary the exchange is withdrawn;
    at the copy inside a microgrid subcase it is injected.  ``grid`` is the
    slack injection in pu.
    """
    n = subcase.n_bus
    base = subcase.base_mva
    p = -subcase.p_demand.copy()
    q = -subcase.q_demand.copy()
    dg_p = [0.5 * (g.p_min + g.p_max) for g in subcase.dg_units] if dg_p is None else dg_p
    dg_q = [0.5 * (g.q_min + g.q_max) for g in subcase.dg_units] if dg_q is None else dg_q
    for g, pg, qg in zip(subcase.dg_units, dg_p, dg_q):
        k = subcase.index(g.bus)
        p[k] += pg / base
        q[k] += qg / base
    sb_pb_kw = [sb.base_exchange for sb in subcase.smart_buildings] if sb_pb_kw is None else sb_pb_kw
    for sb, pb in zip(subcase.smart_buildings, sb_pb_kw):
        p[subcase.index(sb.bus)] -= pb / (1000.0 * base)
    sign = -1.0 if subcase.kind == "dist" else 1.0
    for bus, (pe, qe) in (exchange or {}).items():
        k = subcase.index(bus)
        p[k] += sign * pe
        q[k] += sign * qe
    k = subcase.index(subcase.slack_bus)
    p[k] += grid[0]
    q[k] += grid[1]
    assert p.shape == (n,)
    return p, q


def slack_injection(state: NetworkState, subcase: Subcase) -> tuple[float, float]:
    """Net injection the slack bus must supply at ``state`` (pu), demand included."""
    k = subcase.index(subcase.slack_bus)
    p, q = injections(np.asarray(state.v), np.asarray(state.delta), subcase.admittance)
    return float(p[k] + subcase.p_demand[k]), float(q[k] + subcase.q_demand[k])


def residuals(state: NetworkState, subcase: Subcase, injections: tuple[np.ndarray, np.ndarray]) -> PowerFlowResiduals:
    """Scheduled minus computed injection at every bus of the subcase."""
    if state.bus_ids != subcase.bus_ids:
        raise ValueError("state and subcase bus orderings differ")
    p_calc, q_calc = injections_trig(np.asarray(state.v), np.asarray(state.delta), subcase.admittance)
    p_s, q_s = injections
    return PowerFlowResiduals(dp=np.asarray(p_s) - p_calc, dq=np.asarray(q_s) - q_calc)


def newton_raphson(
    Y: np.ndarray,
    p_sched: np.ndarray,
    q_sched: np.ndarray,
    slack: int,
    v_slack: float = 1.0,
    delta_slack: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> tuple[np.ndarray, np.ndarray, int]:
    n = Y.shape[0]
    v = np.ones(n)
    delta = np.zeros(n)
    v[slack] = v_slack
    delta[slack] = delta_slack
    pq = np.array([k for k in range(n) if k != slack], dtype=int)
    mis = np.inf
    for it in range(max_iter + 1):
        p, q = injections(v, delta, Y)
        f = np.concatenate([p_sched[pq] - p[pq], q_sched[pq] - q[pq]])
        mis = float(np.max(np.abs(f))) if f.size else 0.0
        if not np.isfinite(mis):
            break
        if mis <= tol:
            return v, delta, it
        if it == max_iter:
            break
        dp_dd, dp_dv, dq_dd, dq_dv = injection_jacobian(v, delta, Y)
        J = np.block([[dp_dd[np.ix_(pq, pq)], dp_dv[np.ix_(pq, pq)]], [dq_dd[np.ix_(pq, pq)], dq_dv[np.ix_(pq, pq)]]])
        try:
            dx = np.linalg.solve(J, f)
        except np.linalg.LinAlgError:
            break
        delta[pq] += dx[: len(pq)]
        v[pq] += dx[len(pq) :]
        if np.any(v <= 0.0):
            mis = float("inf")
            break
    raise PowerFlowError("Newton-Raphson power flow did not converge", mis, it)


def solve_base_powerflow(
    subcase: Subcase,
    v_slack: float = 1.0,
    delta_slack: float = 0.0,
    injections: tuple[np.ndarray, np.ndarray] | None = None,
) -> NetworkState:
    """Flat-start Newton power flow with base-case injections.

    Base case: DGs at the midpoint of their limits, buildings drawing full load
    minus PV forecast with the battery idle, microgrid exchanges zero.
    """
    p_s, q_s = injections if injections is not None else scheduled_injections(subcase)
    Y = subcase.admittance
    v, delta, _ = newton_raphson(Y, p_s, q_s, subcase.index(subcase.slack_bus), v_slack, delta_slack)
    return NetworkState(subcase.bus_ids, v, delta)
