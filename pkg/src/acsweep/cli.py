"""Command line entry point: ``acsweep <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .flow import build_barrier, choose_bridge_delta, segment_flow_to_plus_one, segment_mollify_bridge
from .harness import CertificateFailure, ConfigError, RunConfig
from .mollify import MollifierKernel, default_delta0, laplacian_commutator
from .sweepout import SEGMENTS, SweepoutBuilder, segment_close_hole, segment_hole_deform, segment_to_minus_one
from .wells_profiles import STANDARD_WELL, energy1d, ode_residual, truncate

log = logging.getLogger("acsweep")

PROFILE_EPS = [0.1, 0.05, 0.025, 0.0125]


def _config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
        if args.scenario:
            cfg.scenario = dict(harness.SCENARIOS[args.scenario])
    else:
        cfg = RunConfig.preset(args.scenario or "sphere2")
    if args.eps:
        cfg.eps = list(args.eps)
    if args.out:
        cfg.out = args.out
    return cfg


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    sc = harness.scenario_for(cfg, cfg.eps[0])
    plan = harness.plan_for(cfg, sc)
    data = {"plan": plan.to_dict(), "feasibility": [plan.feasibility(e) for e in cfg.eps],
            "bound": harness.verdict_bound(plan)}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_json(out / "calibration.json", data)
    print(f"tau = {plan.tau:.6g}  t0 = {plan.t0:.6g}  c0 = {plan.c0:.6g}  |B| = {plan.hole_area:.6g}  "
          f"bound = {data['bound']:.6g}")
    return 0


def cmd_segment(args) -> int:
    cfg = _config(args)
    eps = cfg.eps[0]
    sc = harness.scenario_for(cfg, eps)
    plan = harness.plan_for(cfg, sc)
    harness.check_eps(plan, eps)
    b = SweepoutBuilder(sc, eps, plan)
    n = cfg.samples
    name = args.name
    if name == "toMinusOne":
        tr = segment_to_minus_one(b, n)
    elif name == "holeDeform":
        tr = segment_hole_deform(b, n)
    elif name == "closeHole":
        tr = segment_close_hole(b, n)
    else:
        g_top = b.g_top()
        barrier = build_barrier(b, g_top)
        delta_bar, _ = choose_bridge_delta(b, barrier, g_top)
        tr = segment_mollify_bridge(b, barrier, g_top, delta_bar, n)
        if name == "flowToPlusOne":
            tr = segment_flow_to_plus_one(b, barrier, tr.last, n, cfg.flow_options()).trace
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tr.write_csv(out / f"{name}.csv")
    harness.write_json(out / f"{name}.json", tr.summary())
    print(f"{name}: max energy {tr.max_energy:.6g}, certificate {tr.certificate}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    try:
        rep = harness.assemble_and_verify(cfg)
    except CertificateFailure as exc:
        harness.failure_summary(cfg, exc)
        print(f"FAIL {exc.segment}: {exc.inequality}", file=sys.stderr)
        return 1
    out = harness.report(rep)
    v = rep.verdict
    print(f"[{v.label}] max E = {v.maxEnergy:.6g}, bound = {v.bound:.6g}: {'PASS' if v.passed else 'FAIL'}"
          f"  ({out}/summary.json)")
    return 0 if v.passed else 1


def cmd_check_profiles(args) -> int:
    eps_list = args.eps or PROFILE_EPS
    two_sigma = 2 * STANDARD_WELL.sigma
    rows = []
    for e in eps_list:
        p = truncate(STANDARD_WELL, e)
        dev = abs(energy1d(p).unnormalized - two_sigma)
        r = np.linspace(*p.support, 20001)
        res = float(np.max(np.abs(ode_residual(p, r))))
        rows.append((e, dev, res))
        print(f"eps = {e:<8g} |E - 2 sigma| = {dev:.4e}   sup ODE residual = {res:.4e}")
    for (e0, d0, r0), (e1, d1, r1) in zip(rows[:-1], rows[1:]):
        dr = f"{d0 / d1:.3f}" if d1 > 0 else "inf (below round-off)"
        print(f"{e0:g} -> {e1:g}: energy deviation ratio {dr}, residual ratio {r0 / r1:.3f}")
    return 0


def cmd_check_mollify(args) -> int:
    cfg = _config(args)
    from .manifold_scenarios import make_scenario

    sc = make_scenario(cfg.scenario["name"], float(cfg.scenario["radius"]), args.n1, 1 if args.reduced else args.n2)
    d0 = default_delta0(sc)
    print(f"delta0 = {d0:.5g}, grid {sc.grid.shape}")
    u = np.cos(sc.grid.x1) * np.ones(sc.grid.shape)
    for k in (2, 4, 8):
        delta = d0 / k
        raw = MollifierKernel(sc, sc.grid, delta, mode="raw")
        c = float(np.max(np.abs(raw.mass - 1.0))) / delta**2
        com = laplacian_commutator(MollifierKernel(sc, sc.grid, delta), u)
        print(f"delta = d0/{k}: |mass - 1|/delta^2 = {c:.5g}   commutator C_N(cos) = {com['C_N']:.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acsweep", description="Allen-Cahn sweep-out construction and checks")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", choices=sorted(harness.SCENARIOS))
        p.add_argument("--eps", type=float, nargs="+")
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("calibrate", help="calibrate the deformation plan")
    common(p)
    p.set_defaults(func=cmd_calibrate)
    p = sub.add_parser("segment", help="build one segment")
    p.add_argument("name", choices=SEGMENTS)
    common(p)
    p.set_defaults(func=cmd_segment)
    p = sub.add_parser("run", help="assemble the path and evaluate the verdict")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("check-profiles", help="1D profile energy and ODE residual")
    common(p)
    p.set_defaults(func=cmd_check_profiles)
    p = sub.add_parser("check-mollify", help="mollifier mass and commutator on a scenario")
    common(p)
    p.add_argument("--n1", type=int, default=944)
    p.add_argument("--n2", type=int, default=256)
    p.add_argument("--reduced", action="store_true", help="axisymmetric fields only (one x2 cell)")
    p.set_defaults(func=cmd_check_mollify)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
