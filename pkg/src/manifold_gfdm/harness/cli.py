"""Command-line entry point: ``manifold-gfdm <verb> ...``.

Verbs and their files:

    sample     manifold -> cloud.npz
    assemble   cloud.npz -> op.npz (raw weights, basis values)
    stabilize  op.npz -> op.npz with stabilized weights (+ optional C csv)
    solve      cloud.npz + op.npz -> solution csv
    sweep      config file -> records.csv
    report     records.csv -> summary.csv, slopes.csv
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from ..geometry import (FieldSpec, ManifoldSpec, PointCloud, analytic_laplacian, concat_clouds,
                        sample_boundary, sample_manifold)
from ..gmls import WeightTable, assemble_operator, forward_error, to_csr
from ..pde import detect_interior, solve_closed, solve_dirichlet, write_solution_csv
from ..stabilizer import stabilize_operator, write_c_values
from ..stencil import build_knn, frames_for
from .config import ConfigError, load_config, parse_value
from .runner import (SUMMARY_COLUMNS, SlopeFitError, emit_csv, fit_slope, group_records, read_csv,
                     run_experiment, summarize, write_rows)

log = logging.getLogger("manifold_gfdm")


def _save_cloud(path, cloud: PointCloud):
    spec = cloud.spec
    np.savez(path, ambient=cloud.ambient, intrinsic=cloud.intrinsic,
             family=spec.family if spec else "", q=spec.q if spec else 0,
             seed=-1 if cloud.seed is None else cloud.seed,
             boundary_mask=cloud.boundary_mask if cloud.boundary_mask is not None else np.zeros(cloud.N, bool))


def _load_cloud(path) -> PointCloud:
    z = np.load(path)
    fam = str(z["family"])
    spec = ManifoldSpec(fam, q=int(z["q"])) if fam else None
    seed = int(z["seed"])
    return PointCloud(z["ambient"], z["intrinsic"], spec, None if seed < 0 else seed,
                      boundary_mask=z["boundary_mask"].astype(bool))


def _load_table(path):
    z = np.load(path)
    return WeightTable(z["neighbors"], z["w"], z["phi"], int(z["degree"])), z


def cmd_sample(args):
    spec = ManifoldSpec(args.manifold, q=args.q)
    cloud = sample_manifold(spec, args.N, args.seed)
    if args.boundary_points:
        cloud = concat_clouds(cloud, sample_boundary(spec, args.boundary_points, args.seed + 1))
    _save_cloud(args.out, cloud)
    log.info("sampled %d points on %s -> %s", cloud.N, spec.label(), args.out)
    return 0


def cmd_assemble(args):
    cloud = _load_cloud(args.cloud)
    table = build_knn(cloud, args.K)
    frames = frames_for(cloud, args.frames, args.kp or None, order=args.order)
    _, wt = assemble_operator(cloud, table, frames, args.l, projection_at=args.projection_at)
    np.savez(args.out, neighbors=wt.neighbors, w=wt.w, phi=wt.phi, degree=wt.degree, w_raw=wt.w)
    log.info("assembled l=%d operator, %d rows with w1 >= 0", args.l, int(np.count_nonzero(~wt.w1_negative)))
    return 0


def cmd_stabilize(args):
    wt, z = _load_table(args.op)
    _, W_hat, rep = stabilize_operator(wt, attempt_all=args.all)
    np.savez(args.out, neighbors=wt.neighbors, w=W_hat, phi=wt.phi, degree=wt.degree, w_raw=z["w_raw"])
    if args.c_csv:
        write_c_values(args.c_csv, rep)
    log.info("stabilized: %s", rep.summary())
    return 0


def cmd_solve(args):
    cloud = _load_cloud(args.cloud)
    z = np.load(args.op)
    L = to_csr(z["neighbors"], z["w"], cloud.N)
    u = lap = None
    if cloud.spec is not None and cloud.has_intrinsic:
        f = FieldSpec.for_manifold(cloud.spec)
        u = f.evaluate(cloud.spec, cloud.intrinsic)
        lap = analytic_laplacian(cloud.spec, f, cloud.intrinsic)
    if lap is None:
        raise SystemExit("solve needs a parametrised cloud for the manufactured right-hand side")
    if args.problem == "closed":
        sol = solve_closed(L, args.a, args.a * u - lap)
    else:
        if cloud.boundary_mask is not None and cloud.boundary_mask.any():
            S = np.nonzero(~cloud.boundary_mask)[0]
        else:
            S = detect_interior(z["w_raw"][:, 0]).Y
        sol = solve_dirichlet(L, S, lap)
    write_solution_csv(args.out, sol.U, cloud.intrinsic, u)
    log.info("FE %.3e IE %.3e residual %.2e", forward_error(L, u, lap), np.max(np.abs(sol.U - u)), sol.residual)
    return 0


def _overrides(pairs):
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def cmd_sweep(args):
    over = _overrides(args.set)
    if args.out:
        over["out"] = args.out
    if args.threads:
        over["threads"] = args.threads
    if args.seed is not None:
        over["seed"] = args.seed
    config = load_config(args.config, **over)
    os.makedirs(config.out, exist_ok=True)
    path = os.path.join(config.out, f"{config.name}.partial.csv")

    def progress(r):
        log.info("N=%d trial=%d l=%d %s: %s FE=%.3e IE=%.3e", r.N, r.trial, r.l, r.variant, r.status, r.FE, r.IE)

    records = run_experiment(config, csv_path=path, progress=progress)
    final = os.path.join(config.out, f"{config.name}.csv")
    emit_csv(records, final)
    os.remove(path)
    failed = [r for r in records if not r.ok]
    if failed:
        print(f"{len(failed)} of {len(records)} cells failed:", file=sys.stderr)
        for r in failed:
            print(f"  N={r.N} trial={r.trial} l={r.l}: {r.error[:200]}", file=sys.stderr)
        return 1
    print(final)
    return 0


def cmd_report(args):
    records = read_csv(args.records)
    out = args.out or os.path.dirname(os.path.abspath(args.records))
    os.makedirs(out, exist_ok=True)
    write_rows(os.path.join(out, "summary.csv"), SUMMARY_COLUMNS, summarize(records))
    rows = []
    for (method, l, variant), recs in group_records(records).items():
        for metric in ("FE", "IE"):
            try:
                fit = fit_slope(recs, metric)
                rows.append([method, l, variant, metric, fit.slope, fit.intercept, fit.N.size])
            except SlopeFitError as exc:
                log.warning("%s l=%d %s %s: %s", method, l, variant, metric, exc)
    write_rows(os.path.join(out, "slopes.csv"), ["method", "l", "variant", "metric", "slope", "intercept", "points"], rows)
    for r in rows:
        print(f"{r[0]:9s} l={r[1]} {r[2]:6s} {r[3]}: slope {r[4]:+.3f} ({r[6]} points)")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="manifold-gfdm")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("sample", help="sample a point cloud")
    s.add_argument("--manifold", required=True, choices=["ellipse", "torus", "semitorus"])
    s.add_argument("--q", type=int, default=4)
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--boundary-points", type=int, default=0, help="points per boundary circle")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("assemble", help="assemble the raw GMLS operator")
    s.add_argument("--cloud", required=True)
    s.add_argument("--K", type=int, required=True)
    s.add_argument("--l", type=int, required=True)
    s.add_argument("--frames", choices=["analytic", "estimated"], default="analytic")
    s.add_argument("--kp", type=int, default=0)
    s.add_argument("--order", type=int, choices=[1, 2, 3], default=1)
    s.add_argument("--projection-at", choices=["neighbor", "base"], default="neighbor")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_assemble)

    s = sub.add_parser("stabilize", help="solve the per-row stabilization LPs")
    s.add_argument("--op", required=True)
    s.add_argument("--all", action="store_true", help="also try rows with w1 >= 0")
    s.add_argument("--c-csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stabilize)

    s = sub.add_parser("solve", help="solve the manufactured Poisson problem")
    s.add_argument("--cloud", required=True)
    s.add_argument("--op", required=True)
    s.add_argument("--problem", choices=["closed", "dirichlet"], default="closed")
    s.add_argument("--a", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("sweep", help="run a configured experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--threads", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="summaries and slope fits of a records file")
    s.add_argument("--records", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
