"""Sweep orchestration, error metrics, slope fits and CSV output."""

from __future__ import annotations

import csv
import math
import os
import time
import traceback
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import astuple, dataclass, fields

import numpy as np
import scipy.sparse as sp

from ..baselines import RbfConfig, VbdmConfig, rbf_fd_operator, vbdm_laplacian
from ..geometry import FieldSpec, analytic_laplacian, concat_clouds, sample_boundary, sample_manifold
from ..gmls import assemble_operator, forward_error
from ..pde import detect_interior, inv_norm_estimate, restrict_eps, solve_closed, solve_dirichlet
from ..stabilizer import stabilize_operator
from ..stencil import build_knn, default_kp, frames_for
from .config import ExperimentConfig

ROUNDOFF_FLOOR = 1e-9


@dataclass
class RunRecord:
    config_hash: str
    method: str
    manifold: str
    N: int
    trial: int
    l: int
    variant: str          # "Y" for the detector set, "eps<k>" for k * eps_star truncation
    FE: float             # operator used in the solve, all points
    FE_raw: float         # unstabilized operator (equal to FE without the LP)
    IE: float
    C_max: float
    C_mean: float
    C_nonzero: int
    fallbacks: int
    n_flagged: int
    n_solved: int
    eps_star: float
    inv_norm: float
    status: str           # "ok" or "error"
    error: str
    wall_time: float

    @property
    def ok(self) -> bool:
        return self.status == "ok"


COLUMNS = [f.name for f in fields(RunRecord)]
_TYPES = {f.name: f.type for f in fields(RunRecord)}
NAN = float("nan")


def seed_for(base: int, N: int, trial: int, stream: int = 0) -> int:
    """Per-cell seed; independent of scheduling order."""
    return int(np.random.SeedSequence([base, N, trial, stream]).generate_state(1, np.uint64)[0])


def _kp(config, N):
    return config.K_P if config.K_P > 0 else default_kp(N)


def _failed(config, N, trial, l, variant, exc, t0):
    msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
    return RunRecord(config.config_hash(), config.method, config.manifold, N, trial, l, variant,
                     NAN, NAN, NAN, NAN, NAN, 0, 0, 0, 0, NAN, NAN, "error", msg[:500],
                     time.perf_counter() - t0)


def _cloud(config, N, trial):
    spec = config.spec
    cloud = sample_manifold(spec, N, seed_for(config.seed, N, trial))
    if config.boundary == "given_boundary" and config.problem == "dirichlet":
        nb = int(round(math.sqrt(N)))
        cloud = concat_clouds(cloud, sample_boundary(spec, nb, seed_for(config.seed, N, trial, 1)))
    return cloud


def run_cell(config: ExperimentConfig, N: int, trial: int) -> list[RunRecord]:
    """All records of one (N, trial) cell; failures become error records."""
    t0 = time.perf_counter()
    try:
        spec = config.spec
        cloud = _cloud(config, N, trial)
        field_ = FieldSpec.for_manifold(spec)
        u = field_.evaluate(spec, cloud.intrinsic)
        lap = analytic_laplacian(spec, field_, cloud.intrinsic)
        K = config.K
        if K > cloud.N:
            raise ValueError(f"stencil size K={K} exceeds the {cloud.N} points of the cloud")
        if config.method == "vbdm":
            K = max(K, VbdmConfig.for_size(cloud.N, spec.d).k1)
        table = build_knn(cloud, min(K, cloud.N))
        frames = None
        if config.method != "vbdm" or config.problem == "dirichlet":
            frames = frames_for(cloud, config.frames, _kp(config, cloud.N), order=config.tangent_order)
        shared = (cloud, u, lap, table, frames, time.perf_counter() - t0)
    except Exception as exc:  # noqa: BLE001 - recorded, the sweep goes on
        return [_failed(config, N, trial, l, "Y", exc, t0) for l in config.degrees]
    out = []
    for l in config.degrees:
        t1 = time.perf_counter()
        try:
            out.extend(_run_degree(config, N, trial, l, shared, t1))
        except Exception as exc:  # noqa: BLE001
            rec = _failed(config, N, trial, l, "Y", exc, t1)
            rec.error = (rec.error + " | " + traceback.format_exc(limit=3).replace("\n", " "))[:1000]
            out.append(rec)
    return out


def _first_k(table, K):
    if table.K == K:
        return table
    return type(table)(table.indices[:, :K], table.distances[:, :K])


def _operator(config, l, cloud, table, frames):
    """(operator used, raw operator, weight table or None, stabilization report or None)."""
    if config.method == "rbf_fd":
        L, _, _ = rbf_fd_operator(cloud, table, frames, RbfConfig(config.rbf_s, config.K))
        return L, L, None, None
    if config.method == "vbdm":
        vc = VbdmConfig.for_size(cloud.N, cloud.d)
        L, _ = vbdm_laplacian(cloud, vc, table)
        return L, L, None, None
    L, wt = assemble_operator(cloud, _first_k(table, config.K), frames, l, projection_at=config.projection_at)
    if config.method == "gfdm_raw":
        return L, L, wt, None
    # rows outside Y never enter a detector-mode solve, so only the other modes retry them
    retry = config.lp_all and (config.problem == "closed" or config.boundary == "given_boundary")
    Lh, _, rep = stabilize_operator(wt, attempt_all=retry)
    return Lh, L, wt, rep


def _run_degree(config, N, trial, l, shared, t1):
    cloud, u, lap, table, frames, t_shared = shared
    Lh, L, wt, rep = _operator(config, l, cloud, table, frames)
    fe = forward_error(Lh, u, lap)
    fe_raw = fe if L is Lh else forward_error(L, u, lap)
    cs = rep.summary() if rep is not None else {"C_max": NAN, "C_mean": NAN, "C_nonzero": 0, "fallbacks": 0}
    base = dict(config_hash=config.config_hash(), method=config.method, manifold=config.manifold,
                N=N, trial=trial, l=l, FE=fe, FE_raw=fe_raw, C_max=cs["C_max"], C_mean=cs["C_mean"],
                C_nonzero=cs["C_nonzero"], fallbacks=cs["fallbacks"], status="ok", error="")
    if config.problem == "closed":
        a = config.a
        sol = solve_closed(Lh, a, a * u - lap)
        inv = NAN
        if config.inv_norm:
            inv = inv_norm_estimate(sp.identity(Lh.shape[0]) * a - Lh)
        split = detect_interior(wt) if wt is not None else None
        nflag = split.complement.size if split is not None else 0
        return [RunRecord(**base, variant="Y", IE=float(np.max(np.abs(sol.U - u))), n_flagged=nflag,
                          n_solved=cloud.N, eps_star=NAN, inv_norm=inv,
                          wall_time=t_shared + time.perf_counter() - t1)]

    if config.boundary == "given_boundary":
        S = np.nonzero(~cloud.boundary_mask)[0]
        nflag = int(np.count_nonzero(~(wt.w1[S] < 0)))
        sol = solve_dirichlet(Lh, S, lap)
        return [RunRecord(**base, variant="Y", IE=float(np.max(np.abs(sol.U - u))), n_flagged=nflag,
                          n_solved=S.size, eps_star=NAN, inv_norm=NAN,
                          wall_time=t_shared + time.perf_counter() - t1)]

    if wt is None:
        # baselines have no self-weight sign test; the degree-2 GFDM detector supplies Y
        _, wdet = assemble_operator(cloud, _first_k(table, config.K), frames, 2, projection_at=config.projection_at)
    else:
        wdet = wt
    split = detect_interior(wdet, cloud)
    recs = []
    sets = [("Y", split.Y)]
    if config.boundary == "eps_sweep":
        for k in config.eps_factors:
            S = np.intersect1d(restrict_eps(cloud, cloud.spec, k * split.eps_star), split.Y)
            sets.append((f"eps{k:g}", S))
    for name, S in sets:
        t2 = time.perf_counter()
        sol = solve_dirichlet(Lh, S, lap)
        recs.append(RunRecord(**base, variant=name, IE=float(np.max(np.abs(sol.U - u))),
                              n_flagged=split.complement.size, n_solved=S.size,
                              eps_star=split.eps_star, inv_norm=NAN,
                              wall_time=t_shared + time.perf_counter() - (t1 if name == "Y" else t2)))
    return recs


def _sort_key(r: RunRecord):
    return (r.N, r.trial, r.l, r.variant)


def run_experiment(config: ExperimentConfig, csv_path=None, threads: int | None = None,
                   progress=None) -> list[RunRecord]:
    """Run every (N, trial) cell of ``config``.

    Cells run in a thread pool; finished records are appended to
    ``csv_path`` by this thread only, in completion order, and the returned
    list is sorted by (N, trial, l, variant) so it does not depend on
    scheduling.
    """
    cells = [(N, t) for N in config.N for t in range(config.trials)]
    threads = threads or config.threads
    records = []
    fh = writer = None
    if csv_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
    try:
        def sink(recs):
            records.extend(recs)
            if writer is not None:
                for r in recs:
                    writer.writerow(_row(r))
                fh.flush()
            if progress is not None:
                for r in recs:
                    progress(r)

        if threads == 1:
            for N, t in cells:
                sink(run_cell(config, N, t))
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futs = [pool.submit(run_cell, config, N, t) for N, t in cells]
                for fut in as_completed(futs):
                    sink(fut.result())
    finally:
        if fh is not None:
            fh.close()
    records.sort(key=_sort_key)
    return records


# -- slopes and summaries ------------------------------------------------------


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    N: np.ndarray        # points used
    values: np.ndarray
    dropped: np.ndarray  # N values excluded


class SlopeFitError(ValueError):
    pass


def median_by_N(records, metric: str):
    groups = defaultdict(list)
    for r in records:
        v = getattr(r, metric)
        if r.ok and v is not None and np.isfinite(v):
            groups[r.N].append(v)
    Ns = np.array(sorted(groups), dtype=float)
    return Ns, np.array([np.median(groups[int(n)]) for n in Ns])


def fit_slope(records, metric: str = "FE", floor: float = ROUNDOFF_FLOOR, drop_rising: bool = True) -> SlopeFit:
    """Least-squares slope of log(median metric) against log N.

    Points below ``floor`` and points past the sweep minimum that rise above
    their predecessor (round-off growth) are left out. Pass
    ``drop_rising=False`` for a metric that is not expected to decay.
    """
    if metric not in ("FE", "FE_raw", "IE"):
        raise ValueError(f"metric must be FE, FE_raw or IE, not {metric!r}")
    Ns, vals = median_by_N(records, metric)
    keep = vals >= floor
    if vals.size and drop_rising:
        imin = int(np.argmin(vals))
        for j in range(imin + 1, vals.size):
            if vals[j] > vals[j - 1]:
                keep[j] = False
    if np.count_nonzero(keep) < 3:
        raise SlopeFitError(f"need at least 3 usable points for a slope, have {int(np.count_nonzero(keep))} "
                            f"(N = {Ns.astype(int).tolist()}, {metric} = {vals.tolist()})")
    x, y = np.log(Ns[keep]), np.log(vals[keep])
    slope, icpt = np.polyfit(x, y, 1)
    return SlopeFit(float(slope), float(icpt), Ns[keep], vals[keep], Ns[~keep])


def group_records(records):
    """Records keyed by (method, l, variant), successful cells only."""
    g = defaultdict(list)
    for r in records:
        if r.ok:
            g[(r.method, r.l, r.variant)].append(r)
    return dict(sorted(g.items()))


SUMMARY_COLUMNS = ["method", "l", "variant", "N", "trials", "metric", "mean", "std", "median"]


def summarize(records, metrics=("FE", "IE")):
    """Mean, standard deviation and median per (method, l, variant, N)."""
    rows = []
    for (method, l, variant), recs in group_records(records).items():
        byN = defaultdict(list)
        for r in recs:
            byN[r.N].append(r)
        for N in sorted(byN):
            for m in metrics:
                v = np.array([getattr(r, m) for r in byN[N]], dtype=float)
                v = v[np.isfinite(v)]
                if not v.size:
                    continue
                rows.append([method, l, variant, N, v.size, m, float(v.mean()),
                             float(v.std(ddof=1)) if v.size > 1 else 0.0, float(np.median(v))])
    return rows


# -- CSV -----------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _row(r: RunRecord):
    return [_fmt(v) for v in astuple(r)]


def emit_csv(records, path):
    """Write records with a header row; reals carry 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in records:
            w.writerow(_row(r))


def read_csv(path) -> list[RunRecord]:
    conv = {"int": int, "float": float, "str": str}
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        head = next(rd)
        if head != COLUMNS:
            raise ValueError(f"unexpected columns in {path}: {head}")
        for row in rd:
            out.append(RunRecord(*[conv[_TYPES[c]](v) for c, v in zip(COLUMNS, row)]))
    return out


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
