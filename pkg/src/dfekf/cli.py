"""Command line entry point: ``dfekf {mesh,decompose,stability,run,compare}``."""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import harness
from .decomposition import build_augmented, dump_decomposition
from .mesh import generate_l_shaped_mesh, generate_rectangle_mesh, refine_uniform, write_mesh

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", default="scenario1",
                       help="scenario file or preset name (scenario1, scenario2)")
    p.add_argument("--seed", type=int, default=None, help="override the scenario RNG seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for node updates")
    p.add_argument("--trace-messages", action="store_true", help="log every boundary message")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dfekf", description="Centralized and distributed FE Kalman filters")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="generate, refine and dump a mesh")
    _common(p, config=False)
    p.add_argument("--edge", type=float, default=0.2, help="target longest edge")
    p.add_argument("--shape", choices=("l_shape", "rectangle"), default="l_shape")
    p.add_argument("--size", type=float, default=2.0, help="L-shape outer size")
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--height", type=float, default=1.0)
    p.add_argument("--refine", type=int, default=0, help="uniform refinement levels")

    p = sub.add_parser("decompose", help="dump the decomposition and sparsity statistics")
    _common(p)

    p = sub.add_parser("stability", help="zero-stability, Riccati and error-dynamics report")
    _common(p)
    p.add_argument("--L", type=int, default=None, help="consensus rounds (default: largest configured)")
    p.add_argument("--gamma", type=float, default=None, help="total boost per interval (default: config)")

    p = sub.add_parser("run", help="Monte Carlo experiment from a scenario")
    _common(p)
    p.add_argument("--runs", type=int, default=None, help="override the number of Monte Carlo runs")
    p.add_argument("--sweep", action="store_true", help="also run the configured gamma sweep")

    p = sub.add_parser("compare", help="centralized vs distributed equivalence checks")
    _common(p)
    p.add_argument("--samples", type=int, default=50)
    return ap


def _load(args) -> harness.Scenario:
    sc = harness.load_scenario(args.config)
    if getattr(args, "seed", None) is not None:
        sc = replace(sc, seed=args.seed)
    return sc


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_mesh(args) -> int:
    if args.shape == "l_shape":
        mesh = generate_l_shaped_mesh(args.edge, args.size)
    else:
        mesh = generate_rectangle_mesh(args.width, args.height, args.edge)
    for _ in range(args.refine):
        mesh = refine_uniform(mesh)
    out = _out(args, ".")
    path = out / "mesh.txt"
    write_mesh(mesh, path)
    print(f"vertices = {mesh.n_vertices}")
    print(f"triangles = {mesh.n_triangles}")
    print(f"boundary_edges = {len(mesh.edges)}")
    print(f"max_edge = {mesh.max_edge_length()!r}")
    print(f"area = {mesh.area()!r}")
    print(f"file = {path}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    sc = _load(args)
    setup = harness.build_setup(sc, check_observability=False)
    dec = setup.dec
    aug = build_augmented(setup.mass, setup.stiffness, dec)
    out = _out(args, ".")
    dump_decomposition(dec, out / "decomposition.txt")
    nnz_d, nnz_f = aug.stiffness_diag.nnz, aug.stiffness_coupling.nnz
    print(f"nodes = {dec.node_count}")
    print(f"vertices = {dec.n_vertices}")
    print(f"augmented = {dec.augmented_dim}")
    print(f"local_sizes = {' '.join(str(len(ix)) for ix in dec.internal)}")
    print(f"sensors_per_node = {' '.join(str(len(ids)) for _, ids in setup.per_node)}")
    print(f"nnz_S = {setup.stiffness.nnz}")
    print(f"nnz_S_D = {nnz_d}")
    print(f"nnz_S_F = {nnz_f}")
    print(f"nnz_ratio = {nnz_f / nnz_d!r}")
    print(f"links = {len(dec.links)}")
    print(f"file = {out / 'decomposition.txt'}")
    return EXIT_OK


def cmd_stability(args) -> int:
    sc = _load(args)
    setup = harness.build_setup(sc)
    L = args.L or max(sc.L)
    gamma = sc.gamma if args.gamma is None else args.gamma
    rep = harness.stability_report(setup, L, gamma)
    text = rep.to_text()
    sys.stdout.write(text)
    if args.out:
        (_out(args, ".") / "stability.txt").write_text(text)
    return EXIT_OK if rep.ok else EXIT_FAIL


def cmd_run(args) -> int:
    sc = _load(args)
    t0 = time.perf_counter()
    setup = harness.build_setup(sc)
    truth = harness.simulate_truth(sc, setup.fine)
    log = lambda msg: print(msg, file=sys.stderr)
    exp = harness.run_experiment(sc, runs=args.runs, threads=args.threads,
                                 trace_messages=args.trace_messages, setup=setup, truth=truth, log=log)
    sweep = None
    if args.sweep and sc.gamma_sweep:
        sweep = harness.gamma_sweep(sc, sc.gamma_sweep, runs=args.runs, setup=setup, truth=truth)
    out = _out(args, f"out_{sc.name}")
    harness.write_outputs(exp, out, sweep)
    for name, res in exp.results.items():
        print(f"{name}.steady_mean_rmse = {res.steady_mean(sc.steady_fraction)!r}")
    print(f"config_hash = {sc.digest}")
    print(f"wall_clock = {time.perf_counter() - t0:.1f}")
    print(f"out = {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = _load(args)
    setup = harness.build_setup(sc)
    eq = harness.single_node_equivalence(setup, args.samples)
    conv = harness.schwarz_convergence(setup, (1, 2, 10))
    print(f"single_node_max_abs_diff = {eq!r}")
    for L, row in conv.items():
        for k, v in row.items():
            print(f"L{L}.{k} = {v!r}")
    dis = [conv[L]["disagreement"] for L in (1, 2, 10)]
    ok = eq < 1e-10 and all(b <= a for a, b in zip(dis, dis[1:])) and conv[10]["rel_l2"] < 0.02
    print(f"overall = {'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"mesh": cmd_mesh, "decompose": cmd_decompose, "stability": cmd_stability,
            "run": cmd_run, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("dfekf: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except harness.ConfigError as exc:
        print(f"dfekf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
