import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from gridcascade.grid import case_from_dict, full_subcase, partition_case
from gridcascade.nlp import check_gradients, solve, solve_linear
from gridcascade.powerflow import solve_base_powerflow
from gridcascade.subproblems import (
    NO_PENALTY,
    LinkPenalty,
    PenaltyTerms,
    WeightSet,
    WiringError,
    build_dsc_problem,
    build_joint_problem,
    build_mgc_problem,
    build_sbc_problem,
    compute_weights,
    evaluate_penalty,
    network_start,
    sb_bounds,
    sb_decision,
    sb_start,
    signed_penalty,
    smooth_penalty,
    tie_flows,
    unpack,
)

from conftest import bus, line, two_bus_dict

finite = st.floats(-10, 10, allow_nan=False)


# ---------------------------------------------------------------------------
# penalty


def test_penalty_hand_values():
    assert evaluate_penalty([1.0], [2.0], [1.5], [1.0]) == pytest.approx(1.5)
    assert evaluate_penalty([0, 0], [1, 1], [0.3, -0.4], [0.0, 0.0]) == pytest.approx(0.25)
    assert evaluate_penalty([3.0, 1.0], [5.0, 2.0], [0.2, 7.0], [0.2, 7.0]) == 0.0


def test_penalty_length_mismatch():
    with pytest.raises(ValueError):
        evaluate_penalty([1.0], [1.0, 1.0], [0.0], [0.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0.01, 10), finite, finite), min_size=1, max_size=5))
def test_penalty_symmetric_and_positive(rows):
    a, b, t, r = (np.array(c) for c in zip(*rows))
    # mismatches whose square underflows to 0 cannot give a positive penalty
    assume(np.all((t == r) | (np.abs(t - r) >= 1e-150)))
    p = evaluate_penalty(a, b, t, r)
    assert p == pytest.approx(evaluate_penalty(a, b, r, t), rel=1e-12, abs=1e-300)
    if np.any(t != r):
        assert p > 0.0
    else:
        assert p == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10), finite), min_size=1, max_size=4))
def test_smoothed_penalty_close_to_exact(rows):
    a, b, u = (np.array(c) for c in zip(*rows))
    val, _, _ = smooth_penalty(a, b, u)
    exact = evaluate_penalty(a, b, u, np.zeros_like(u))
    # smoothing error is at most alpha * eps per element, plus round-off on the value
    assert abs(val - exact) <= np.sum(a) * 1e-8 + 1e-14 * abs(exact) + 1e-12


def test_smoothed_penalty_derivatives():
    a, b = np.array([0.7, 2.0]), np.array([1.3, 0.4])
    u = np.array([0.05, -0.2])
    v0, g, h = smooth_penalty(a, b, u)
    for k in range(2):
        e = np.zeros(2)
        e[k] = 1e-6
        vp, gp, _ = smooth_penalty(a, b, u + e)
        vm, gm, _ = smooth_penalty(a, b, u - e)
        assert (vp - vm) / 2e-6 == pytest.approx(g[k], rel=1e-6)
        assert (gp[k] - gm[k]) / 2e-6 == pytest.approx(h[k], rel=1e-5)
    assert smooth_penalty(a, b, np.zeros(2))[0] == 0.0


def test_signed_penalty_value():
    val, g, h = signed_penalty(np.array([-2.0]), np.array([3.0]), np.array([0.5]))
    assert val == pytest.approx(-1.0 + 2.25)
    assert g[0] == pytest.approx(-2.0 + 9.0)
    assert h[0] == pytest.approx(18.0)


def test_link_penalty_roles():
    up = LinkPenalty("sb:1", "sb", [2.0], [1.5], [1.0], sb_bus=1, signed=True, role=1)
    lo = LinkPenalty("sb:1", "sb", [2.5], [1.5], [1.0], sb_bus=1, signed=True, role=-1)
    # upper owns t = 2.5 against r = 2.0; lower owns r = 2.0 against t = 2.5: same value
    assert up.terms(np.array([2.5]))[0] == pytest.approx(lo.terms(np.array([2.0]))[0])
    assert up.terms(np.array([2.5]))[0] == pytest.approx(1.5 * 0.5 + 0.25)


def test_link_penalty_validation():
    with pytest.raises(WiringError):
        LinkPenalty("v:M", "voltage", [1.0], [0.0], [1.0], mg_id="M")
    with pytest.raises(WiringError):
        LinkPenalty("sb:1", "sb", [1.0], [0.0], [-1.0], sb_bus=1)
    with pytest.raises(WiringError):
        LinkPenalty("sb:1", "sb", [np.nan], [0.0], [1.0], sb_bus=1)
    with pytest.raises(WiringError):
        LinkPenalty("sb:1", "sb", [1.0], [-1.0], [1.0], sb_bus=1)
    LinkPenalty("sb:1", "sb", [1.0], [-1.0], [1.0], sb_bus=1, signed=True)


# ---------------------------------------------------------------------------
# weights


def lossless_two_bus(load_mw):
    d = two_bus_dict(load_mw)
    d["lines"] = [line(1, 1, 2, r=0.0, x=0.01)]
    return case_from_dict(d)


def test_weight_direct_rule():
    # 3.4 MW through a lossless line at 50 $/MWh is a 170 $ grid term
    w = compute_weights(None, lossless_two_bus(3.4), "case2")
    assert w.w1 == pytest.approx(1 / 170.0, rel=1e-9)


def test_weight_floor_for_absent_terms():
    w = compute_weights(None, lossless_two_bus(1.0), "case2")
    assert w.w2 == pytest.approx(1e6) and w.w3 == pytest.approx(1e6) and w.w4 == pytest.approx(1e6)


def test_case1_zeroes_exchange_weights(case33):
    w1 = compute_weights(None, case33, "case1")
    w2 = compute_weights(None, case33, "case2")
    assert w1.w4 == 0.0 and all(v == 0.0 for v in w1.w7.values())
    assert w2.w4 > 0.0 and all(v > 0.0 for v in w2.w7.values())
    # the scenarios differ only in the exchange weights
    assert (w1.w1, w1.w2, w1.w3, w1.w5, w1.w6) == (w2.w1, w2.w2, w2.w3, w2.w5, w2.w6)


def test_weights_normalise_base_terms(case33):
    base = solve_base_powerflow(full_subcase(case33))
    w = compute_weights(base, case33, "case2")
    flows = tie_flows(case33, base)
    t4 = sum((p * p + q * q) * 100.0**2 for p, q, _, _ in flows.values())
    assert w.w4 * t4 == pytest.approx(1.0)
    t3 = sum(50.0 * sb.base_exchange / 1000.0 for sb in partition_case(case33).dist_subcase.smart_buildings)
    assert w.w3 * t3 == pytest.approx(1.0)


def test_weightset_round_trip_and_validation():
    w = WeightSet(1.0, 2.0, 3.0, 0.0, {"A": 1.0}, {"A": 2.0}, {"A": 0.0})
    assert WeightSet.from_dict(w.to_dict()) == w
    with pytest.raises(ValueError):
        WeightSet(-1.0, 0, 0, 0)


# ---------------------------------------------------------------------------
# smart building


def sb_enumeration_oracle(sb, price, step=0.01):
    """Brute-force minimum of price*P_B/1000 over a mesh of (P_ESS, P_L, P_PV)."""
    b = sb.bess
    eta = b.efficiency
    lo_b, hi_b = sb.pb_bounds
    p_l = np.arange(sb.p_load_min, sb.p_load_max + 1e-9, step)
    p_pv = np.arange(0.0, sb.pv_forecast + 1e-9, step)
    L, PV = np.meshgrid(p_l, p_pv, indexing="ij")
    best = np.inf
    for p_ess in np.arange(-b.rate_max, b.rate_max + 1e-9, step):
        e = b.e_initial - p_ess / eta if p_ess >= 0 else b.e_initial - eta * p_ess
        if e < b.e_min - 1e-12 or e > b.e_capacity + 1e-12:
            continue
        pb = L - PV - p_ess
        ok = (pb >= lo_b) & (pb <= hi_b)
        if ok.any():
            best = min(best, float(np.min(price * pb[ok] / 1000.0)))
    return best


@pytest.mark.parametrize("k", range(4))
def test_sbc_lp_matches_enumeration(case33, k):
    sb = case33.smart_buildings[k]
    p = build_sbc_problem(sb, sb.base_exchange, (0.0, 0.0), case33.price)
    assert p.affine
    sol = solve_linear(p)
    assert sol.status == "optimal"
    assert abs(sol.f_star - sb_enumeration_oracle(sb, case33.price)) <= 1e-3


def test_sbc_bus12_reproduces_published_dispatch(case33):
    sb = next(s for s in case33.smart_buildings if s.bus == 12)
    sol = solve_linear(build_sbc_problem(sb, 0.0, (0.0, 0.0), case33.price))
    d = sb_decision(sb, sol.x_star)
    assert d.p_l == pytest.approx(7.0, abs=1e-7)
    assert d.p_pv == pytest.approx(3.2, abs=1e-7)
    assert d.p_ess == pytest.approx(0.792, abs=1e-7)
    assert round(d.p_b, 2) == 3.01


def test_sbc_curtails_to_firm_load(case33):
    for sb in case33.smart_buildings:
        d = sb_decision(sb, solve_linear(build_sbc_problem(sb, 0.0, (0.0, 0.0), case33.price)).x_star)
        assert d.p_l == pytest.approx(0.7 * sb.total_load, abs=1e-7)


def test_sbc_without_local_resources(case33_dict):
    d = case33_dict
    s = d["smart_buildings"][0]
    s["pv_forecast"] = 0.0
    s["bess"]["e_initial"] = s["bess"]["e_min"]
    sb = case_from_dict(d).smart_buildings[0]
    dec = sb_decision(sb, solve_linear(build_sbc_problem(sb, 0.0, (0.0, 0.0), 50.0)).x_star)
    assert dec.p_b == pytest.approx(sb.p_load_min, abs=1e-7)


def test_sbc_penalty_pulls_towards_target(case33):
    sb = case33.smart_buildings[0]
    free = sb_decision(sb, solve_linear(build_sbc_problem(sb, 6.0, (0.0, 0.0), 50.0)).x_star).p_b
    p = build_sbc_problem(sb, 6.0, (0.0, 10.0), 50.0)
    assert not p.affine
    sol = solve(p, sb_start(sb))
    pulled = sb_decision(sb, sol.x_star).p_b
    assert abs(pulled - 6.0) < abs(free - 6.0)
    # stationarity in P_B alone: price/1000 = 2 beta^2 (t - P_B)
    assert pulled == pytest.approx(6.0 - 0.05 / 200.0, abs=1e-6)


def test_sbc_signed_penalty_shifts_optimum(case33):
    sb = case33.smart_buildings[0]
    # the lower copy sees alpha (t - P_B); alpha = price/1000 cancels the price
    sol = solve(build_sbc_problem(sb, 6.0, (0.05, 1.0), 50.0, signed=True), sb_start(sb))
    assert sb_decision(sb, sol.x_star).p_b == pytest.approx(6.0, abs=1e-6)


def test_sbc_rejects_bad_penalty(case33):
    sb = case33.smart_buildings[0]
    with pytest.raises(WiringError):
        build_sbc_problem(sb, 1.0, (0.0, -1.0), 50.0)
    with pytest.raises(WiringError):
        build_sbc_problem(sb, 1.0, (-1.0, 1.0), 50.0)


sb_specs = st.builds(
    lambda load, frac, pv, cap, lo, init, rate, eta: {
        "bus": 2,
        "total_load": load,
        "controllable_fraction": frac,
        "pv_forecast": pv,
        "bess": {
            "e_capacity": cap,
            "e_min": lo * cap,
            "e_initial": (lo + init * (1 - lo)) * cap,
            "rate_max": rate,
            "efficiency": eta,
        },
    },
    st.floats(0.5, 50),
    st.floats(0.0, 0.9),
    st.floats(0.0, 20),
    st.floats(0.5, 20),
    st.floats(0.0, 0.5),
    st.floats(0.0, 1.0),
    st.floats(0.1, 5),
    st.floats(0.5, 1.0),
)


@settings(max_examples=60, deadline=None)
@given(sb_specs)
def test_sbc_never_vacuously_infeasible(spec):
    d = two_bus_dict(0.1)
    d["smart_buildings"] = [spec]
    sb = case_from_dict(d).smart_buildings[0]
    p = build_sbc_problem(sb, 0.0, (0.0, 0.0), 50.0)
    x = np.array([sb.p_load_max, sb.p_load_max, 0.0, 0.0, 0.0, sb.bess.e_initial])
    assert p.max_violation(x) <= 1e-12
    sol = solve_linear(p)
    assert sol.status == "optimal"
    dec = sb_decision(sb, sol.x_star)
    assert dec.p_b + dec.p_pv + dec.p_ess - dec.p_l == pytest.approx(0.0, abs=1e-7)
    lo, hi = sb_bounds(sb)
    assert np.all(sol.x_star >= lo - 1e-9) and np.all(sol.x_star <= hi + 1e-9)


# ---------------------------------------------------------------------------
# distribution and microgrid builders


def three_bus(dg_cost):
    d = two_bus_dict()
    d["buses"] = [bus(1, "slack"), bus(2), bus(3, p=0.5, q=0.2)]
    d["lines"] = [line(1, 1, 2, 0.01, 0.02), line(2, 2, 3, 0.01, 0.02)]
    d["dg_units"] = [{"bus": 3, "p_min": 0.0, "p_max": 0.3, "q_min": -0.1, "q_max": 0.1, "cost": dg_cost}]
    return case_from_dict(d)


@pytest.mark.parametrize("cost, expect", [(40.0, 0.3), (60.0, 0.0)])
def test_dsc_economic_dispatch(cost, expect):
    case = three_bus(cost)
    dist = partition_case(case).dist_subcase
    w = WeightSet(1.0, 1.0, 0.0, 0.0)
    p = build_dsc_problem(dist, w, NO_PENALTY, case.lambda_, case.price)
    x0 = network_start(p, dist, solve_base_powerflow(dist))
    sol = solve(p, x0)
    assert sol.status == "optimal"
    u = unpack(p, sol.x_star)
    assert u["p_dg"][0] * 100.0 == pytest.approx(expect, abs=1e-6)
    # grid supplies the rest plus losses
    assert u["grid"][0] * 100.0 > 0.5 - expect
    assert u["grid"][0] * 100.0 < 0.5 - expect + 0.01


def mg_links(sc, state, alpha=0.0, beta=1.0, signed=False):
    links = []
    for bc in sc.boundaries:
        if sc.kind == "dist":
            tie = next(ln for ln in sc.lines if ln.id == bc.tie_line)
            pair = (tie.from_bus if tie.to_bus == bc.bus else tie.to_bus, bc.bus)
        else:
            tie = next(ln for ln in sc.lines if ln.id == bc.tie_line)
            pair = (bc.bus, tie.from_bus if tie.to_bus == bc.bus else tie.to_bus)
        vec = [state.at(pair[0])[0], state.at(pair[1])[0], state.at(pair[0])[1], state.at(pair[1])[1]]
        links.append(
            LinkPenalty(f"v:{bc.mg_id}", "voltage", vec, [alpha] * 4, [beta] * 4, mg_id=bc.mg_id, signed=signed)
        )
    for sb in sc.smart_buildings:
        links.append(LinkPenalty(f"sb:{sb.bus}", "sb", [sb.base_exchange], [alpha], [beta], sb_bus=sb.bus, signed=signed))
    return PenaltyTerms(tuple(links))


@pytest.fixture(scope="module")
def built33():
    from gridcascade.grid import load_case

    case = load_case("case33_sb.json")
    part = partition_case(case)
    base = solve_base_powerflow(full_subcase(case))
    w = compute_weights(base, case, "case2")
    out = {}
    dist = part.dist_subcase
    out["dsc"] = (build_dsc_problem(dist, w, mg_links(dist, base, 0.3, 2.0), case.lambda_, case.price), dist)
    for sc in part.mg_subcases:
        out[sc.name] = (build_mgc_problem(sc, w, mg_links(sc, base, 0.3, 2.0), case.lambda_, case.price), sc)
    out["signed"] = (
        build_dsc_problem(dist, w, mg_links(dist, base, -0.3, 2.0, signed=True), case.lambda_, case.price),
        dist,
    )
    return case, base, out


def random_point(p, rng):
    lo, hi = p.lower, p.upper
    box = np.isfinite(lo) & np.isfinite(hi)
    span = np.where(box, hi - lo, 0.0)
    x = np.where(box, np.where(box, lo, 0.0) + span * rng.random(p.n_vars), 0.01 * rng.standard_normal(p.n_vars))
    d = p.blocks.get("delta")
    if d is not None:
        fixed = lo[d] == hi[d]
        x[d] = np.where(fixed, lo[d], rng.uniform(-0.05, 0.05, d.stop - d.start))
    return x


@pytest.mark.parametrize("name", ["dsc", "mg:MG1", "mg:MG2", "signed"])
def test_network_gradients_at_random_points(built33, name):
    _, _, out = built33
    p, _ = out[name]
    rng = np.random.default_rng(7)
    for _ in range(10):
        rep = check_gradients(p, random_point(p, rng), threshold=1e-5)
        assert rep.passed, rep.flagged[:5]


@pytest.mark.parametrize("signed", [False, True])
def test_sbc_gradients_at_random_points(case33, signed):
    rng = np.random.default_rng(11)
    for sb in case33.smart_buildings:
        p = build_sbc_problem(sb, sb.base_exchange, (0.7, 1.3), case33.price, signed=signed)
        for _ in range(10):
            rep = check_gradients(p, random_point(p, rng), threshold=1e-5)
            assert rep.passed, rep.flagged[:5]


def test_network_hessian_matches_finite_differences(built33):
    _, _, out = built33
    p, _ = out["mg:MG1"]
    rng = np.random.default_rng(3)
    x = random_point(p, rng)
    m_eq = p.eval_eq(x)[0].size
    m_in = p.eval_ineq(x)[0].size
    y, z = rng.standard_normal(m_eq), rng.random(m_in)
    H = p.eval_hessian(x, 1.0, y, z)
    h = 1e-6
    for i in range(p.n_vars):
        e = np.zeros(p.n_vars)
        e[i] = h
        col = (p.lagrangian_gradient(x + e, 1.0, y, z) - p.lagrangian_gradient(x - e, 1.0, y, z)) / (2 * h)
        assert np.allclose(H[:, i], col, rtol=1e-5, atol=1e-4 * max(1.0, np.max(np.abs(H))))


def test_zero_mismatch_penalty_adds_nothing(built33):
    case, base, out = built33
    part = partition_case(case)
    dist = part.dist_subcase
    w = compute_weights(base, case, "case2")
    with_links = build_dsc_problem(dist, w, mg_links(dist, base, 0.3, 2.0), case.lambda_, case.price)
    zero = build_dsc_problem(dist, w, mg_links(dist, base, 0.0, 0.0), case.lambda_, case.price)
    x = network_start(with_links, dist, base, {"p_b": [sb.base_exchange for sb in dist.smart_buildings]})
    assert with_links.objective(x)[0] == pytest.approx(zero.objective(x)[0], abs=1e-7)


def test_solutions_respect_voltage_and_line_limits(built33):
    case, base, out = built33
    for name in ("dsc", "mg:MG1", "mg:MG2"):
        p, sc = out[name]
        values = {"p_b": [sb.base_exchange for sb in sc.smart_buildings]}
        sol = solve(p, network_start(p, sc, base, values))
        assert sol.status == "optimal"
        v = unpack(p, sol.x_star)["v"]
        assert np.all(v >= 0.95 - 1e-7) and np.all(v <= 1.05 + 1e-7)
        assert np.max(p.eval_ineq(sol.x_star)[0]) <= 1e-7


def test_mgc_subcase_layout(built33):
    _, _, out = built33
    p, sc = out["mg:MG1"]
    assert sorted(sc.interior_buses) == [19, 20, 21, 22] and sc.copy_buses == (2,)
    assert p.blocks["p_b"].stop - p.blocks["p_b"].start == 1
    assert p.blocks["p_dg"].stop - p.blocks["p_dg"].start == 1


# microgrid behind a single tie, no buildings, for isolated-dispatch oracles
def mg_case(load_mw, dg_cost=80.0):
    d = two_bus_dict()
    d["buses"] = [bus(1, "slack"), bus(2, "mg-boundary-dist-side"), bus(3, "mg-boundary-mg-side", p=load_mw, q=0.5 * load_mw), bus(4, p=load_mw, q=0.5 * load_mw)]
    d["lines"] = [line(1, 1, 2, 0.01, 0.02), line(2, 2, 3, 0.02, 0.03), line(3, 3, 4, 0.02, 0.03)]
    d["dg_units"] = [{"bus": 4, "p_min": 0.0, "p_max": 0.5, "q_min": -0.3, "q_max": 0.3, "cost": dg_cost}]
    d["microgrids"] = [{"id": "M", "member_buses": [3, 4], "tie_line": 2, "boundary_bus_dist": 2, "boundary_bus_mg": 3}]
    return d


def test_mgc_flat_boundary_matches_isolated_dispatch():
    case = case_from_dict(mg_case(0.4))
    sc = partition_case(case).subcase_for_mg("M")
    w = WeightSet(0.0, 0.0, 0.0, 0.0, {"M": 1.0 / 40.0}, {"M": 0.0}, {"M": 0.0})
    # pin the distribution-side bus to 1 pu / 0 rad; leave the MG side unpenalised
    link = LinkPenalty("v:M", "voltage", [1.0, 1.0, 0.0, 0.0], [0.0] * 4, [1e3, 0.0, 1e3, 0.0], mg_id="M")
    p = build_mgc_problem(sc, w, PenaltyTerms((link,)), 1.0, 50.0)
    sol = solve(p, network_start(p, sc, solve_base_powerflow(full_subcase(case))))
    assert sol.status == "optimal"
    u = unpack(p, sol.x_star)

    # oracle: the MG alone with its distribution-side bus as the slack
    d = mg_case(0.4)
    d["buses"] = [bus(2, "slack")] + d["buses"][2:]
    d["lines"] = d["lines"][1:]
    d["microgrids"] = []
    iso = case_from_dict(d)
    wi = WeightSet(0.0, 1.0 / 40.0, 0.0, 0.0)
    pj, full = build_joint_problem(iso, wi)
    sj = solve(pj, network_start(pj, full, solve_base_powerflow(full)))
    uj = unpack(pj, sj.x_star)
    assert u["p_dg"] == pytest.approx(uj["p_dg"], abs=1e-6)
    assert u["p_mg"][0] == pytest.approx(uj["grid"][0], abs=1e-6)
    assert u["q_mg"][0] == pytest.approx(uj["grid"][1], abs=1e-5)
    assert sol.f_star == pytest.approx(sj.f_star, abs=1e-5)


def test_zero_demand_mg_exchanges_nothing():
    case = case_from_dict(mg_case(0.0))
    sc = partition_case(case).subcase_for_mg("M")
    w = WeightSet(0.0, 0.0, 0.0, 0.0, {"M": 1.0}, {"M": 0.0}, {"M": 1.0})
    link = LinkPenalty("v:M", "voltage", [1.0, 1.0, 0.0, 0.0], [0.0] * 4, [0.0] * 4, mg_id="M")
    p = build_mgc_problem(sc, w, PenaltyTerms((link,)), 1.0, 50.0)
    sol = solve(p, network_start(p, sc, solve_base_powerflow(full_subcase(case))))
    assert sol.status == "optimal"
    u = unpack(p, sol.x_star)
    assert abs(u["p_mg"][0]) < 1e-7 and abs(u["q_mg"][0]) < 1e-7


# ---------------------------------------------------------------------------
# wiring


def test_wiring_errors(case33):
    part = partition_case(case33)
    base = solve_base_powerflow(full_subcase(case33))
    w = compute_weights(base, case33, "case1")
    dist = part.dist_subcase
    full = mg_links(dist, base)
    with pytest.raises(WiringError, match="no voltage link"):
        build_dsc_problem(dist, w, PenaltyTerms(full.links[1:]), 1.0, 50.0)
    with pytest.raises(WiringError, match="no sb link"):
        build_dsc_problem(dist, w, PenaltyTerms(full.links[:-1]), 1.0, 50.0)
    with pytest.raises(WiringError, match="duplicate"):
        build_dsc_problem(dist, w, PenaltyTerms(full.links + full.links[:1]), 1.0, 50.0)
    stray = LinkPenalty("sb:22", "sb", [1.0], [0.0], [1.0], sb_bus=22)
    with pytest.raises(WiringError, match="does not belong"):
        build_dsc_problem(dist, w, PenaltyTerms(full.links + (stray,)), 1.0, 50.0)
    mg1 = part.subcase_for_mg("MG1")
    with pytest.raises(WiringError):
        build_mgc_problem(dist, w, full, 1.0, 50.0)
    with pytest.raises(WiringError):
        build_dsc_problem(mg1, w, mg_links(mg1, base), 1.0, 50.0)


def test_every_partition_block_has_a_builder(case33):
    part = partition_case(case33)
    base = solve_base_powerflow(full_subcase(case33))
    w = compute_weights(base, case33, "case2")
    blocks = [part.dist_subcase] + list(part.mg_subcases)
    for sc in blocks:
        ok = 0
        for builder in (build_dsc_problem, build_mgc_problem):
            try:
                builder(sc, w, mg_links(sc, base), 1.0, 50.0)
                ok += 1
            except WiringError:
                pass
        assert ok == 1


# ---------------------------------------------------------------------------
# joint problem


def test_joint_problem_without_couplings_equals_dsc():
    case = three_bus(40.0)
    w = compute_weights(None, case, "case1")
    pj, full = build_joint_problem(case, w)
    dist = partition_case(case).dist_subcase
    pd = build_dsc_problem(dist, w, NO_PENALTY, case.lambda_, case.price)
    base = solve_base_powerflow(full)
    sj = solve(pj, network_start(pj, full, base))
    sd = solve(pd, network_start(pd, dist, base))
    assert sj.f_star == pytest.approx(sd.f_star, rel=1e-8)
    assert np.allclose(sj.x_star, sd.x_star, atol=1e-7)


def test_joint_exchange_copies_follow_tie_flow(case6):
    w = compute_weights(None, case6, "case2")
    p, full = build_joint_problem(case6, w)
    sol = solve(p, network_start(p, full, solve_base_powerflow(full)))
    assert sol.status == "optimal"
    u = unpack(p, sol.x_star)
    recv, sent = u["mg_dsc:MG1"], u["mg_mgc:MG1"]
    # sent minus received equals the series loss, which is non-negative
    assert sent[0] - recv[0] >= -1e-9
    assert sent[0] - recv[0] < 1e-3
