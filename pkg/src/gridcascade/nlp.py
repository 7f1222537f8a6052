"""Small dense constrained optimization.

``solve`` is a primal-dual interior-point method: slacks for the general
inequalities, a log barrier on variable bounds, equalities kept in the KKT
system, inertia correction on the dense KKT matrix, a fraction-to-boundary
rule and an l1-merit backtracking line search.  ``solve_linear`` hands affine
problems to HiGHS through ``scipy.optimize.linprog``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import linprog

log = logging.getLogger(__name__)

ObjectiveFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]
ConstraintFn = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]
HessianFn = Callable[[np.ndarray, float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ProblemSpec:
    """``min f(x)  s.t.  h(x) = 0,  g(x) <= 0,  lower <= x <= upper``.

    ``objective`` returns ``(f, grad)``; ``equalities``/``inequalities`` return
    ``(values, jacobian)``.  ``hessian(x, obj_factor, y, z)`` returns the
    Hessian of ``obj_factor*f + y.h + z.g``; when absent it is approximated by
    central differences of the Lagrangian gradient.
    """

    n_vars: int
    lower: np.ndarray
    upper: np.ndarray
    objective: ObjectiveFn
    equalities: ConstraintFn | None = None
    inequalities: ConstraintFn | None = None
    hessian: HessianFn | None = None
    names: tuple[str, ...] = ()
    affine: bool = False
    blocks: Mapping[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.lower) != self.n_vars or len(self.upper) != self.n_vars:
            raise ValueError("bound vectors must have length n_vars")

    def eval_eq(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.equalities is None:
            return np.zeros(0), np.zeros((0, self.n_vars))
        return self.equalities(x)

    def eval_ineq(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.inequalities is None:
            return np.zeros(0), np.zeros((0, self.n_vars))
        return self.inequalities(x)

    def lagrangian_gradient(self, x, obj_factor, y, z) -> np.ndarray:
        _, gf = self.objective(x)
        _, Jh = self.eval_eq(x)
        _, Jg = self.eval_ineq(x)
        return obj_factor * gf + Jh.T @ y + Jg.T @ z

    def eval_hessian(self, x, obj_factor, y, z) -> np.ndarray:
        if self.hessian is not None:
            return self.hessian(x, obj_factor, y, z)
        n = self.n_vars
        H = np.zeros((n, n))
        for i in range(n):
            step = 1e-6 * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += step
            xm[i] -= step
            H[:, i] = (self.lagrangian_gradient(xp, obj_factor, y, z) - self.lagrangian_gradient(xm, obj_factor, y, z)) / (
                2 * step
            )
        return 0.5 * (H + H.T)

    def max_violation(self, x: np.ndarray) -> float:
        h, _ = self.eval_eq(x)
        g, _ = self.eval_ineq(x)
        v = 0.0
        if h.size:
            v = max(v, float(np.max(np.abs(h))))
        if g.size:
            v = max(v, float(np.max(g)))
        v = max(v, float(np.max(self.lower - x, initial=0.0)), float(np.max(x - self.upper, initial=0.0)))
        return v


@dataclass(frozen=True)
class SolverOptions:
    tol_stationarity: float = 1e-6
    tol_feasibility: float = 1e-7
    tol_complementarity: float = 1e-8
    mu0: float = 0.1
    mu_factor: float = 0.2
    mu_min: float = 1e-10
    max_iter: int = 200
    tau_min: float = 0.99
    kappa_eps: float = 10.0
    bound_push: float = 1e-2


@dataclass(frozen=True)
class Solution:
    x_star: np.ndarray
    f_star: float
    status: str  # "optimal" | "max-iter" | "infeasible" | "unbounded"
    kkt_stationarity: float
    max_constraint_violation: float
    iterations: int = 0
    y_eq: np.ndarray | None = None
    z_ineq: np.ndarray | None = None
    z_lower: np.ndarray | None = None
    z_upper: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _fraction_to_boundary(v: np.ndarray, dv: np.ndarray, tau: float) -> float:
    neg = dv < 0.0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


class InteriorPointSolver:
    """One solve per instance call; holds no state between calls."""

    def __init__(self, options: SolverOptions | None = None):
        self.opts = options or SolverOptions()

    def solve(self, problem: ProblemSpec, x0: np.ndarray) -> Solution:
        o = self.opts
        n = problem.n_vars
        lb = np.asarray(problem.lower, float)
        ub = np.asarray(problem.upper, float)
        if np.any(lb > ub):
            x = np.clip(np.asarray(x0, float), np.minimum(lb, ub), np.maximum(lb, ub))
            return Solution(x, float("nan"), "infeasible", float("inf"), problem.max_violation(x))

        fixed = np.isfinite(lb) & np.isfinite(ub) & (lb == ub)
        F = np.flatnonzero(~fixed)
        hasL = np.isfinite(lb) & ~fixed
        hasU = np.isfinite(ub) & ~fixed

        x = np.array(x0, dtype=float)
        x[fixed] = lb[fixed]
        x = np.clip(x, lb, ub)
        both = hasL & hasU
        lb_s = np.where(np.isfinite(lb), lb, 0.0)
        ub_s = np.where(np.isfinite(ub), ub, 0.0)
        width = np.where(both, ub_s - lb_s, np.inf)
        push_l = np.minimum(o.bound_push * np.maximum(1, np.abs(lb_s)), o.bound_push * width)
        push_u = np.minimum(o.bound_push * np.maximum(1, np.abs(ub_s)), o.bound_push * width)
        x = np.where(hasL, np.maximum(x, lb_s + push_l), x)
        x = np.where(hasU, np.minimum(x, ub_s - push_u), x)

        mu = o.mu0
        h, Jh = problem.eval_eq(x)
        g, Jg = problem.eval_ineq(x)
        f, gf = problem.objective(x)
        m_eq, m_in = h.size, g.size
        s = np.maximum(-g, o.bound_push)
        z = mu / s
        dl = np.where(hasL, x - lb, 1.0)
        du = np.where(hasU, ub - x, 1.0)
        zl = np.where(hasL, mu / dl, 0.0)
        zu = np.where(hasU, mu / du, 0.0)
        y = np.zeros(m_eq)
        if m_eq:
            rhs = -(gf + Jg.T @ z - zl + zu)[F]
            y_ls, *_ = np.linalg.lstsq(Jh[:, F].T, rhs, rcond=None)
            if np.all(np.isfinite(y_ls)) and np.max(np.abs(y_ls), initial=0.0) < 1e3:
                y = y_ls

        nu = 1.0
        delta_w_last = 0.0
        n_bnd = int(hasL.sum() + hasU.sum())
        status = "max-iter"
        stat_scaled = float("inf")
        it = 0
        for it in range(o.max_iter + 1):
            dl = np.where(hasL, x - lb, 1.0)
            du = np.where(hasU, ub - x, 1.0)
            rd = (gf + Jh.T @ y + Jg.T @ z - zl + zu)[F]
            n_mult = m_eq + m_in + n_bnd
            s_d = max(100.0, (np.sum(np.abs(y)) + np.sum(z) + np.sum(zl) + np.sum(zu)) / max(n_mult, 1)) / 100.0
            s_c = max(100.0, (np.sum(z) + np.sum(zl) + np.sum(zu)) / max(m_in + n_bnd, 1)) / 100.0
            stat = float(np.max(np.abs(rd), initial=0.0))
            stat_scaled = stat / s_d
            feas = max(float(np.max(np.abs(h), initial=0.0)), float(np.max(np.abs(g + s), initial=0.0)))
            viol = max(float(np.max(np.abs(h), initial=0.0)), float(np.max(g, initial=0.0)))
            comp_vec = np.concatenate([s * z, (dl * zl)[hasL], (du * zu)[hasU]])
            comp = float(np.max(np.abs(comp_vec), initial=0.0))
            comp_true = float(np.max(np.abs(np.concatenate([np.maximum(-g, 0.0) * z, (dl * zl)[hasL], (du * zu)[hasU]])), initial=0.0))
            log.debug("ipm it=%d mu=%.1e stat=%.2e feas=%.2e comp=%.2e", it, mu, stat_scaled, feas, comp / s_c)
            if (
                stat_scaled <= o.tol_stationarity
                and viol <= o.tol_feasibility
                and feas <= 10 * o.tol_feasibility
                and max(comp, comp_true) / s_c <= o.tol_complementarity
            ):
                status = "optimal"
                break
            if it == o.max_iter:
                break

            # barrier update (possibly several reductions at once)
            while mu > o.mu_min:
                comp_mu = float(np.max(np.abs(comp_vec - mu), initial=0.0))
                e_mu = max(stat_scaled, feas, comp_mu / s_c)
                if e_mu > o.kappa_eps * mu:
                    break
                mu = max(o.mu_min, o.mu_factor * mu)
            tau = max(o.tau_min, 1.0 - mu)

            H = problem.eval_hessian(x, 1.0, y, z)
            sig_s = z / s
            sig_b = np.where(hasL, zl / dl, 0.0) + np.where(hasU, zu / du, 0.0)
            JgF = Jg[:, F]
            JhF = Jh[:, F]
            W = H[np.ix_(F, F)] + np.diag(sig_b[F]) + JgF.T @ (sig_s[:, None] * JgF)
            nF = F.size
            kkt, delta_w = self._factor_kkt(W, JhF, delta_w_last)
            if kkt is None:
                log.debug("KKT inertia correction failed at iteration %d", it)
                break
            if delta_w > 0:
                delta_w_last = delta_w
            base_r1 = (
                -gf[F]
                + np.where(hasL, mu / dl, 0.0)[F]
                - np.where(hasU, mu / du, 0.0)[F]
            )

            def direction(r_eq, r_g):
                r1 = base_r1 - JgF.T @ (mu / s + sig_s * r_g)
                sol = kkt(r1, -r_eq, y)
                dx = np.zeros(n)
                dx[F] = sol[:nF]
                ds = -r_g - Jg @ dx
                return dx, sol[nF:], ds

            r_g = g + s
            dx, y_new, ds = direction(h, r_g)
            dxF = dx[F]

            def max_step(dx, ds):
                return min(
                    _fraction_to_boundary(s, ds, tau),
                    _fraction_to_boundary(dl[hasL], dx[hasL], tau),
                    _fraction_to_boundary(du[hasU], -dx[hasU], tau),
                )

            a_max = max_step(dx, ds)

            # l1 merit on the barrier problem
            def merit(xx, ss, ff, hh, gg, pen):
                val = ff - mu * np.sum(np.log(ss))
                if np.any(hasL):
                    val -= mu * np.sum(np.log((xx - lb)[hasL]))
                if np.any(hasU):
                    val -= mu * np.sum(np.log((ub - xx)[hasU]))
                return val + pen * (np.sum(np.abs(hh)) + np.sum(np.abs(gg + ss)))

            def trial(alpha, dx, ds):
                xt = x + alpha * dx
                st = s + alpha * ds
                ft, gft = problem.objective(xt)
                ht, Jht = problem.eval_eq(xt)
                gt, Jgt = problem.eval_ineq(xt)
                ok = np.isfinite(ft) and np.all(np.isfinite(ht)) and np.all(np.isfinite(gt))
                phit = merit(xt, st, ft, ht, gt, nu) if ok else np.inf
                return phit, (xt, st, ft, gft, ht, Jht, gt, Jgt)

            c1 = float(np.sum(np.abs(h)) + np.sum(np.abs(r_g)))
            grad_b = gf @ dx - mu * np.sum(ds / s) - mu * np.sum((dx / dl)[hasL]) + mu * np.sum((dx / du)[hasU])
            curv = float(dxF @ (W + delta_w * np.eye(nF)) @ dxF - dx @ (Jg.T @ (sig_s * (Jg @ dx))) + ds @ (sig_s * ds))
            if c1 > 0:
                nu_trial = (grad_b + 0.5 * max(curv, 0.0)) / (0.9 * c1)
                if nu < nu_trial:
                    nu = nu_trial + 1.0
            d_merit = grad_b - nu * c1
            phi0 = merit(x, s, f, h, g, nu)

            # merit changes below round-off are treated as no change
            noise = 10.0 * np.finfo(float).eps * max(1.0, abs(phi0))

            def sufficient(phit, alpha):
                return phit <= phi0 + 1e-4 * alpha * min(d_merit, 0.0) + noise or (d_merit >= 0 and phit <= phi0 + noise)

            alpha = a_max
            accepted = False
            # tiny primal step: accept it whole so the multipliers can still move
            tiny = float(np.max(np.abs(dx) / (1.0 + np.abs(x)), initial=0.0)) < 1e-13 and float(np.max(np.abs(ds) / (1.0 + s), initial=0.0)) < 1e-13
            phit, state = trial(alpha, dx, ds)
            if tiny or sufficient(phit, alpha):
                accepted = True
            else:
                # second-order correction of the full step
                _, _, _, _, ht, _, gt, _ = state
                dx_c, y_c, ds_c = direction(alpha * h + ht, alpha * r_g + gt + s + alpha * ds)
                a_c = max_step(dx_c, ds_c)
                phic, state_c = trial(a_c, dx_c, ds_c)
                if sufficient(phic, alpha):
                    accepted = True
                    dx, ds, y_new, alpha, state = dx_c, ds_c, y_c, a_c, state_c
            if not accepted:
                for _ in range(40):
                    alpha *= 0.5
                    phit, state = trial(alpha, dx, ds)
                    if sufficient(phit, alpha):
                        accepted = True
                        break
            if not accepted:
                log.debug("line search failed at iteration %d; taking short step", it)
            xt, st, ft, gft, ht, Jht, gt, Jgt = state

            dz = mu / s - z - sig_s * ds
            dzl = np.where(hasL, mu / dl - zl - (zl / dl) * dx, 0.0)
            dzu = np.where(hasU, mu / du - zu + (zu / du) * dx, 0.0)
            a_dual = min(
                _fraction_to_boundary(z, dz, tau),
                _fraction_to_boundary(zl[hasL], dzl[hasL], tau),
                _fraction_to_boundary(zu[hasU], dzu[hasU], tau),
            )

            x, s = xt, st
            f, gf, h, Jh, g, Jg = ft, gft, ht, Jht, gt, Jgt
            y = y + alpha * (y_new - y)
            z = z + a_dual * dz
            zl = zl + a_dual * dzl
            zu = zu + a_dual * dzu
            # keep the duals within a band of the primal-dual central path
            k_sig = 1e10
            z = np.clip(z, mu / (k_sig * s), k_sig * mu / s)
            dl = np.where(hasL, x - lb, 1.0)
            du = np.where(hasU, ub - x, 1.0)
            zl = np.where(hasL, np.clip(zl, mu / (k_sig * dl), k_sig * mu / dl), 0.0)
            zu = np.where(hasU, np.clip(zu, mu / (k_sig * du), k_sig * mu / du), 0.0)

        viol = problem.max_violation(x)
        if status != "optimal" and viol > 1e-4:
            status = "infeasible"
        return Solution(
            x_star=x,
            f_star=float(f),
            status=status,
            kkt_stationarity=float(stat_scaled),
            max_constraint_violation=viol,
            iterations=it,
            y_eq=y,
            z_ineq=z,
            z_lower=zl,
            z_upper=zu,
        )

    @staticmethod
    def _factor_kkt(W, Jh, delta_w_last):
        """Factor the condensed KKT matrix with inertia correction.

        Returns ``(solve_fn, delta_w)``; ``solve_fn(r1, r2, y)`` gives ``[dx; y_new]``.
        """
        nF, m = W.shape[0], Jh.shape[0]
        delta_w = 0.0
        delta_c = 0.0
        for _ in range(60):
            K = np.zeros((nF + m, nF + m))
            K[:nF, :nF] = W + delta_w * np.eye(nF)
            K[:nF, nF:] = Jh.T
            K[nF:, :nF] = Jh
            K[nF:, nF:] = -delta_c * np.eye(m)
            # symmetric equilibration; congruence keeps the inertia
            D = np.ones(nF + m)
            for _ in range(3):
                row = np.max(np.abs(K * D[:, None] * D[None, :]), axis=1)
                D = D / np.sqrt(np.where(row > 0.0, row, 1.0))
            Ks = K * D[:, None] * D[None, :]
            evals, evecs = np.linalg.eigh(Ks)
            scale = max(1.0, float(np.max(np.abs(evals), initial=0.0)))
            small = np.abs(evals) <= 1e-13 * scale
            n_pos = int(np.sum((evals > 0) & ~small))
            n_neg = int(np.sum((evals < 0) & ~small))
            if n_pos == nF and n_neg == m:
                dc = delta_c

                def solve_fn(r1, r2, y, evals=evals, evecs=evecs, D=D):
                    rhs = D * np.concatenate([r1, r2 - dc * y])
                    return D * (evecs @ ((evecs.T @ rhs) / evals))

                return solve_fn, delta_w
            if np.any(small) and delta_c == 0.0 and m > 0:
                delta_c = 1e-8
                continue
            if delta_w == 0.0:
                delta_w = 1e-4 if delta_w_last == 0.0 else max(1e-20, delta_w_last / 3.0)
            else:
                delta_w *= 8.0
            if delta_w > 1e40:
                break
        return None, delta_w


def solve(problem: ProblemSpec, x0: np.ndarray, opts: SolverOptions | None = None) -> Solution:
    return InteriorPointSolver(opts).solve(problem, np.asarray(x0, float))


def solve_linear(problem: ProblemSpec, x0: np.ndarray | None = None) -> Solution:
    """Globally solve an affine problem (objective and constraints linear)."""
    n = problem.n_vars
    xr = np.zeros(n) if x0 is None else np.asarray(x0, float)
    xr = np.where(np.isfinite(xr), xr, 0.0)
    f0, c = problem.objective(xr)
    h, Jh = problem.eval_eq(xr)
    g, Jg = problem.eval_ineq(xr)
    bounds = [
        (None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
        for lo, hi in zip(problem.lower, problem.upper)
    ]
    if any(lo is not None and hi is not None and lo > hi for lo, hi in bounds):
        return Solution(xr, float("nan"), "infeasible", float("inf"), problem.max_violation(xr))
    res = linprog(
        c,
        A_ub=Jg if g.size else None,
        b_ub=(Jg @ xr - g) if g.size else None,
        A_eq=Jh if h.size else None,
        b_eq=(Jh @ xr - h) if h.size else None,
        bounds=bounds,
        method="highs",
    )
    if res.status == 2:
        return Solution(xr, float("nan"), "infeasible", float("inf"), problem.max_violation(xr))
    if res.status == 3:
        return Solution(xr, float("-inf"), "unbounded", float("inf"), problem.max_violation(xr))
    if res.status != 0:
        return Solution(xr, float("nan"), "max-iter", float("inf"), problem.max_violation(xr))
    x = np.asarray(res.x, float)
    grad_l = c.copy()
    if h.size:
        grad_l -= Jh.T @ res.eqlin.marginals
    if g.size:
        grad_l -= Jg.T @ res.ineqlin.marginals
    grad_l -= res.lower.marginals + res.upper.marginals
    f_star = float(f0 + c @ (x - xr))
    return Solution(
        x_star=x,
        f_star=f_star,
        status="optimal",
        kkt_stationarity=float(np.max(np.abs(grad_l), initial=0.0)),
        max_constraint_violation=problem.max_violation(x),
        y_eq=-np.asarray(res.eqlin.marginals) if h.size else np.zeros(0),
        z_ineq=-np.asarray(res.ineqlin.marginals) if g.size else np.zeros(0),
    )


# --------------------------------------------------------------------------
# derivative checking


@dataclass(frozen=True)
class GradientReport:
    max_rel_error: dict[str, float]
    flagged: tuple[tuple[str, int, int, float], ...]  # (evaluator, row, col, rel error)
    threshold: float

    @property
    def passed(self) -> bool:
        return not self.flagged


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> np.ndarray:
    return np.abs(analytic - fd) / np.maximum(1.0, np.maximum(np.abs(fd), np.abs(analytic)))


def check_gradients(problem: ProblemSpec, x: np.ndarray, threshold: float = 1e-4, step: float = 1e-6) -> GradientReport:
    """Compare analytic derivatives with central differences at ``x``."""
    x = np.asarray(x, float)
    n = problem.n_vars
    evaluators = {
        "objective": lambda v: (np.atleast_1d(problem.objective(v)[0]), problem.objective(v)[1][None, :]),
        "equalities": problem.eval_eq,
        "inequalities": problem.eval_ineq,
    }
    max_err: dict[str, float] = {}
    flagged = []
    for name, fn in evaluators.items():
        val, J = fn(x)
        if val.size == 0:
            max_err[name] = 0.0
            continue
        fd = np.zeros_like(J)
        for i in range(n):
            # power-of-two step; divide by the realised width
            hstep = 2.0 ** np.round(np.log2(step * max(1.0, abs(x[i]))))
            xp, xm = x.copy(), x.copy()
            xp[i] += hstep
            xm[i] -= hstep
            fd[:, i] = (fn(xp)[0] - fn(xm)[0]) / (xp[i] - xm[i])
        err = _rel_err(J, fd)
        max_err[name] = float(err.max())
        for r, cidx in zip(*np.nonzero(err > threshold)):
            flagged.append((name, int(r), int(cidx), float(err[r, cidx])))
    return GradientReport(max_err, tuple(flagged), threshold)
