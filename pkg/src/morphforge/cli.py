"""Command-line entry point: design, check, schedule, verify, codesign.

Exit codes: 0 success, 1 usage or invalid input, 2 constraint infeasibility (or a
verified morph outside tolerance), 3 numerical failure.
"""

from __future__ import annotations

import os

_threads = os.environ.get("MORPHFORGE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
    os.environ.setdefault("XLA_FLAGS", f"--xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads={_threads}")

import argparse
import csv
import json
import sys

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _limits(args):
    from .fabrication import FabricationLimits

    return FabricationLimits(max_shrink_ratio=args.max_shrink, total_budget_mm=args.budget_mm, min_edge_mm=args.min_edge_mm)


def _environment(args):
    from .sim import Environment

    if args.gravity_scale < 0:
        raise UsageError("--gravity-scale must be >= 0")
    return Environment(gravity=args.gravity_scale > 0, gravity_scale=args.gravity_scale or 1.0)


def _write_config(out, args):
    os.makedirs(out, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=1)


def _scale(text):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("--scale-mm takes a number or 'auto'")
    if v <= 0:
        raise argparse.ArgumentTypeError("--scale-mm must be positive")
    return v


def write_design(res, out):
    """Write a DesignResult: graph, morph targets, constraint report, meshes in mm, energy trace."""
    from .mesh import save_obj

    os.makedirs(os.path.join(out, "morph_targets"), exist_ok=True)
    res.graph.save(os.path.join(out, "graph.json"))
    for mt in res.morph_targets:
        mt.save(os.path.join(out, "morph_targets", f"{mt.target_id}.json"))
    res.report.save(os.path.join(out, "constraint_report.json"))
    save_obj(os.path.join(out, "flat.obj"), res.tri.flat * res.scale_mm, res.tri.faces)
    for mt, P in zip(res.morph_targets, res.approximations):
        save_obj(os.path.join(out, f"approx_{mt.target_id}.obj"), P * res.scale_mm, res.tri.faces)
    with open(os.path.join(out, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "step", "kind", "energy_before", "energy_after", "accepted"])
        for stage, steps in res.traces.items():
            for i, st in enumerate(steps):
                w.writerow([stage, i, st.kind, repr(float(st.energy_before)), repr(float(st.energy_after)), int(st.accepted)])


def cmd_design(args) -> int:
    from .disk import EmbeddingError
    from .mesh import MeshError, load_obj
    from .optimizer import design

    if len(args.targets) < 2:
        raise UsageError("design needs at least two target meshes")
    try:
        meshes = [load_obj(p) for p in args.targets]
    except (OSError, MeshError) as exc:
        raise UsageError(str(exc))
    out = args.out
    _write_config(out, args)
    ids = [os.path.splitext(os.path.basename(p))[0] for p in args.targets]
    if len(set(ids)) != len(ids):
        ids = [f"{s}_{i}" for i, s in enumerate(ids)]
    try:
        res = design(meshes, _limits(args), args.scale_mm, args.seed, (args.stage_iters, args.stage_iters), ids, args.delta, _log)
    except MeshError as exc:
        raise UsageError(str(exc))
    except EmbeddingError as exc:
        _log(f"error: {exc}")
        return EXIT_NUMERICAL
    write_design(res, out)
    lo, hi = res.scale_range
    _log(f"graph: {res.graph.n_nodes} nodes, {len(res.graph.edges)} edges at {res.scale_mm:.4g} mm/unit (feasible {lo:.4g}..{hi:.4g})")
    for t in res.report.targets:
        _log(f"{t.target_id}: budget {t.budget_used_mm:.1f} mm, {len(t.violations)} violations")
    return EXIT_OK if res.ok else EXIT_INFEASIBLE


def _load_targets(paths):
    from .graph import MorphTarget

    return [MorphTarget.load(p) for p in paths]


def cmd_check(args) -> int:
    from .fabrication import check_constraints
    from .graph import SkeletalGraph

    graph = SkeletalGraph.load(args.graph)
    rep = check_constraints(graph, _load_targets(args.targets), _limits(args))
    text = rep.dumps()
    if args.out:
        _write_config(args.out, args)
        rep.save(os.path.join(args.out, "constraint_report.json"))
    print(text)
    return EXIT_OK if rep.ok else EXIT_INFEASIBLE


def cmd_schedule(args) -> int:
    from .control import MorphScheduleError, build_morph_profile
    from .graph import SkeletalGraph
    from .sim import SimulatedRobot

    graph = SkeletalGraph.load(args.graph)
    (target,) = _load_targets([args.target])
    if args.delta is not None:
        target.delta = args.delta
    _write_config(args.out, args)
    try:
        prof = build_morph_profile(graph, target, _limits(args), SimulatedRobot(graph, _environment(args)))
    except MorphScheduleError as exc:
        _log(f"refused: {exc}")
        return EXIT_INFEASIBLE
    prof.save(os.path.join(args.out, "profile.bin"), os.path.join(args.out, "profile.json"))
    _log(f"packets: {len(prof)}, budget used: {prof.budget_used_mm:.1f} mm, concurrency peak: {prof.concurrency_peak}")
    if not prof.converged:
        _log(f"warning: {prof.diagnostic}")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_verify(args) -> int:
    from .control import ActuationProfile
    from .graph import SkeletalGraph
    from .sim import verify_morph

    graph = SkeletalGraph.load(args.graph)
    (target,) = _load_targets([args.target])
    if args.delta is not None:
        target.delta = args.delta
    side = os.path.splitext(args.profile)[0] + ".json"
    prof = ActuationProfile.load(args.profile, side if os.path.exists(side) else None)
    _write_config(args.out, args)
    rep = verify_morph(graph, prof, target, _environment(args))
    rep.save(os.path.join(args.out, "verification_report.json"))
    _log(f"max edge error {max(abs(rep.err)) if len(rep.err) else 0.0:.4f}, converged {rep.converged}")
    if not rep.converged:
        return EXIT_NUMERICAL
    return EXIT_OK if rep.ok else EXIT_INFEASIBLE


def cmd_codesign(args) -> int:
    from .codesign import CodesignProblem, codesign_optimize, save_result

    with open(args.problem) as fh:
        d = json.load(fh)
    budget = d.pop("budget", 2000)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        problem = CodesignProblem.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid problem: {exc}")
    _write_config(args.out, args)
    res = codesign_optimize(problem, budget, _log)
    save_result(res, problem, args.out)
    _log(f"best fitness {res.fitness:.6g} after {res.evaluations} evaluations")
    return EXIT_OK if res.fitness > float("-inf") else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphforge", description="Design, schedule and verify laser-actuated skeletal robots.")
    sub = p.add_subparsers(dest="command", required=True)

    def limits(sp):
        sp.add_argument("--budget-mm", type=float, default=300.0)
        sp.add_argument("--min-edge-mm", type=float, default=30.0)
        sp.add_argument("--max-shrink", type=float, default=0.33)

    d = sub.add_parser("design", help="compatible triangulation and flat skeletal graph from target OBJ meshes")
    d.add_argument("targets", nargs="+")
    d.add_argument("--scale-mm", type=_scale, default="auto", help="mm per unit of the unit-area design space, or 'auto'")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--delta", type=float, default=0.02)
    d.add_argument("--stage-iters", type=int, default=100)
    d.add_argument("--out", required=True)
    limits(d)
    d.set_defaults(func=cmd_design)

    c = sub.add_parser("check", help="check fabrication constraints of a graph against morph targets")
    c.add_argument("graph")
    c.add_argument("targets", nargs="+")
    c.add_argument("--out")
    limits(c)
    c.set_defaults(func=cmd_check)

    s = sub.add_parser("schedule", help="closed-loop laser actuation profile for one morph target")
    s.add_argument("graph")
    s.add_argument("target")
    s.add_argument("--delta", type=float)
    s.add_argument("--gravity-scale", type=float, default=1.0, help="multiple of Earth gravity in the simulated feedback; 0 turns it off")
    s.add_argument("--out", required=True)
    limits(s)
    s.set_defaults(func=cmd_schedule)

    v = sub.add_parser("verify", help="replay a profile through the simulator")
    v.add_argument("graph")
    v.add_argument("profile")
    v.add_argument("target")
    v.add_argument("--delta", type=float)
    v.add_argument("--gravity-scale", type=float, default=1.0, help="multiple of Earth gravity; 0 turns it off")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify)

    k = sub.add_parser("codesign", help="two-step differential-evolution co-design")
    k.add_argument("problem")
    k.add_argument("--seed", type=int)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_codesign)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return EXIT_USAGE
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        _log(f"usage error: {exc}")
        return EXIT_USAGE
    except FloatingPointError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
