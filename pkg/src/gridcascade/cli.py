"""Command-line entry point: ``gridcascade {run,oracle,validate,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .atc import AtcError
from .grid import CaseError, full_subcase, load_case, partition_case
from .harness import ScenarioConfig, partition_summary, run_scenario, solve_centralized, summary
from .nlp import check_gradients
from .powerflow import PowerFlowError, solve_base_powerflow
from .subproblems import (
    LinkPenalty,
    PenaltyTerms,
    build_dsc_problem,
    build_mgc_problem,
    build_sbc_problem,
    compute_weights,
    network_start,
    sb_start,
    tie_flows,
)

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "trace": logging.DEBUG}
DEFAULT_CASE = "case33_sb.json"


def _setup_logging() -> None:
    name = os.environ.get("GRIDCASCADE_LOG", "quiet").lower()
    level = LOG_LEVELS.get(name, logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if level > logging.WARNING:
        logging.captureWarnings(True)


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _scenario_config(args) -> ScenarioConfig:
    sets = _parse_sets(args.set or [])
    for flag, key in (("max_iter", "max_iterations"), ("eps1", "eps1"), ("eps2", "eps2"), ("sigma", "sigma")):
        value = getattr(args, flag, None)
        if value is not None:
            sets[key] = str(value)
    out = Path(args.out) if args.out else None
    return ScenarioConfig.from_overrides(args.scenario, sets, out_dir=out, fmt=args.format)


def cmd_run(args) -> int:
    cfg = _scenario_config(args)
    report, _ = run_scenario(args.case, cfg)
    print(summary(report))
    if cfg.out_dir is not None:
        print(f"report written to {cfg.out_dir}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_oracle(args) -> int:
    cfg = _scenario_config(args)
    _, report = solve_centralized(args.case, cfg.scenario, cfg)
    print(summary(report))
    if cfg.out_dir is not None:
        print(f"report written to {cfg.out_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    case = load_case(args.case)
    print(partition_summary(case))
    full = full_subcase(case)
    state = solve_base_powerflow(full)
    v = np.asarray(state.v)
    print(f"base power flow: voltage range [{v.min():.4f}, {v.max():.4f}] pu")
    return EXIT_OK


def gradient_reports(case, scenario: str = "case2", points: int = 3, seed: int = 0):
    """Gradient checks of every subproblem at its base point and random perturbations."""
    rng = np.random.default_rng(seed)
    part = partition_case(case)
    full = full_subcase(case)
    base = solve_base_powerflow(full)
    w = compute_weights(base, case, scenario)
    flows = tie_flows(case, base)
    out = []

    def links_for(sc):
        links = []
        for bc in sc.boundaries:
            mg = next(m for m in case.microgrids if m.id == bc.mg_id)
            vec = [*(base.at(b)[0] for b in (mg.boundary_bus_dist, mg.boundary_bus_mg))]
            vec += [base.at(b)[1] for b in (mg.boundary_bus_dist, mg.boundary_bus_mg)]
            links.append(LinkPenalty(f"v:{mg.id}", "voltage", vec, [0.5] * 4, [2.0] * 4, mg_id=mg.id, signed=True))
        for sb in sc.smart_buildings:
            links.append(LinkPenalty(f"sb:{sb.bus}", "sb", [sb.base_exchange], [0.5], [2.0], sb_bus=sb.bus, signed=True))
        return PenaltyTerms(tuple(links))

    dist = part.dist_subcase
    p = build_dsc_problem(dist, w, links_for(dist), case.lambda_, case.price)
    x0 = network_start(p, dist, base, {"p_b": [sb.base_exchange for sb in dist.smart_buildings]})
    out.append(("dsc", p, x0))
    for sc in part.mg_subcases:
        p = build_mgc_problem(sc, w, links_for(sc), case.lambda_, case.price)
        _, _, ps, qs = flows[sc.mg_id]
        x0 = network_start(p, sc, base, {"p_b": [sb.base_exchange for sb in sc.smart_buildings], "p_mg": [ps], "q_mg": [qs]})
        out.append((sc.name, p, x0))
    for sb in case.smart_buildings:
        p = build_sbc_problem(sb, sb.base_exchange, (0.5, 2.0), case.price, signed=True)
        out.append((f"sb:{sb.bus}", p, sb_start(sb)))
    reports = []
    for name, p, x0 in out:
        xs = [x0] + [x0 + 1e-3 * rng.standard_normal(x0.size) for _ in range(points - 1)]
        reports.append((name, [check_gradients(p, x, threshold=1e-5) for x in xs]))
    return reports


def cmd_gradcheck(args) -> int:
    case = load_case(args.case)
    ok = True
    for name, reps in gradient_reports(case, args.scenario, args.points):
        worst = max(max(r.max_rel_error.values(), default=0.0) for r in reps)
        passed = all(r.passed for r in reps)
        ok &= passed
        print(f"{name:10s} max rel error {worst:.2e}  {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridcascade", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_opts(p):
        p.add_argument("--case", default=DEFAULT_CASE, help="case JSON (path or bundled name)")
        p.add_argument("--scenario", choices=("case1", "case2"), default="case1")
        p.add_argument("--out", help="directory for report files")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override price, lambda, load_scale or an ATC field")
        p.add_argument("--max-iter", type=int, dest="max_iter")
        p.add_argument("--eps1", type=float)
        p.add_argument("--eps2", type=float)
        p.add_argument("--sigma", type=float)

    scenario_opts(sub.add_parser("run", help="run ATC coordination for a scenario"))
    scenario_opts(sub.add_parser("oracle", help="solve all subsystems jointly"))
    p = sub.add_parser("validate", help="check a case file and its base power flow")
    p.add_argument("--case", default=DEFAULT_CASE)
    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference derivatives")
    p.add_argument("--case", default=DEFAULT_CASE)
    p.add_argument("--scenario", choices=("case1", "case2"), default="case2")
    p.add_argument("--points", type=int, default=3)
    return ap


COMMANDS = {"run": cmd_run, "oracle": cmd_oracle, "validate": cmd_validate, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CaseError, PowerFlowError, AtcError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
