"""Command-line front end: simulate, ingest, basis, fit, evaluate, compare, report.

Exit codes: 0 success, 1 other package errors, 2 configuration errors,
3 data errors, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .datastore import BatchStore, ingest, observed_proportion, read_region_map, standardize
from .errors import ConfigError, DataError, SbiosError
from .experiments import single_kernel_basis
from .inference_eval import (
    PosteriorSummary,
    confusion,
    effect_sums,
    mua_fit,
    tpr_at_fpr,
)
from .kernel_basis import BasisSet, MaternParams, TruncationConfig, build_basis
from .model_core import Hyperparams
from .samplers import SamplerConfig, StepSchedule, run_multichain
from .simgen import GroundTruth, SimConfig, generate

ALIASES = {"gibbs": "gibbs", "bios": "gibbs", "sgld0": "sgld_zero", "sgld_zero": "sgld_zero",
           "sgldimp": "sgld_impute", "sgld_impute": "sgld_impute", "mua": "mua"}
STRATA = ((0.5, 0.7, "[0.5,0.7)"), (0.7, 0.9, "[0.7,0.9)"), (0.9, 1.0 + 1e-12, "[0.9,1]"))


def _json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_plain))


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _open_store(path):
    return BatchStore.open(path)


def stratum(h):
    """Observed-proportion stratum label (left-closed bins); ``None`` below 0.5."""
    for lo, hi, name in STRATA:
        if lo <= h < hi:
            return name
    return None


# ------------------------------------------------------------------ commands


def cmd_simulate(args):
    fields = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("n", "seed", "pattern", "op_level", "amplitude", "layout", "sigma_y", "batch_size"):
        v = getattr(args, key)
        if v is not None:
            fields[key] = v
    cfg = SimConfig.from_json(fields)
    store, _, _ = generate(cfg, args.out)
    print(f"wrote {store.n} subjects x {store.p} voxels in {store.n_batches} batches to {args.out}")


def cmd_ingest(args):
    src = Path(args.source)
    try:
        Y = np.load(src / "outcomes.npy", mmap_mode="r")
        C = np.load(src / "covariates.npy")
    except FileNotFoundError as exc:
        raise DataError(f"missing input array: {exc.filename}") from None
    M = np.load(src / "masks.npy", mmap_mode="r") if (src / "masks.npy").exists() else None
    if C.ndim == 1:
        C = C[:, None]
    if Y.ndim != 2 or C.shape[0] != Y.shape[0] or (M is not None and M.shape != Y.shape):
        raise DataError("outcomes, masks and covariates disagree in shape")
    grid = read_region_map(src / "region_map.csv") if (src / "region_map.csv").exists() else None

    def subjects():
        for i in range(Y.shape[0]):
            m = np.ones(Y.shape[1], bool) if M is None else np.asarray(M[i], bool)
            yield np.asarray(Y[i], float), m, C[i]

    out = Path(args.out)
    target = out / "raw" if args.standardize else out
    store = ingest(subjects(), args.batch_size, target, n_exposures=args.n_exposures, region_map=grid)
    if args.standardize:
        store, info = standardize(store, out)
        _json(out / "standardization.json", info.to_json())
    print(f"ingested {store.n} subjects x {store.p} voxels into {store.n_batches} batches")


def _grid_of(store):
    grid = store.region_map()
    if grid is None:
        raise DataError("the dataset has no region map; pass one at ingest time")
    return grid


def _basis_for(store, args):
    """Basis from ``--basis``, else from the dataset's simulation settings, else defaults."""
    if getattr(args, "basis", None):
        basis = BasisSet.load(args.basis)
    else:
        sim = store.root / "sim_config.json"
        cfg = SimConfig.from_json(json.loads(sim.read_text())) if sim.exists() else SimConfig()
        basis = build_basis(_grid_of(store), cfg.kernel(), cfg.truncation())
    if basis.p != store.p:
        raise DataError(f"basis covers {basis.p} voxels but the data have {store.p}")
    return basis


def cmd_basis(args):
    store = _open_store(args.manifest)
    grid = _grid_of(store)
    if args.single_kernel:
        basis = single_kernel_basis(grid, a=args.a, b=args.b, degree=args.degree)
    else:
        trunc = (TruncationConfig(mode="energy", energy=args.energy) if args.energy is not None
                 else TruncationConfig(mode="count", fraction=args.fraction))
        basis = build_basis(grid, MaternParams(args.rho, args.nu), trunc, distance=args.distance)
    basis.save(args.out)
    print(f"basis with {basis.n_regions} regions and {basis.L} functions written to {args.out}")


def _threads(args):
    n = args.threads if args.threads is not None else os.environ.get("SBIOS_THREADS")
    if n is None:
        return None
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {n!r}") from None
    if n < 1:
        raise ConfigError("thread count must be positive")
    return n


def _group(store, threshold):
    if threshold is None:
        return None
    return observed_proportion(store, threshold)


def _fit_mua(store, args, out):
    op = _group(store, args.op_threshold)
    res = mua_fit(store, None if op is None else op.group_mask)
    np.savez(out / "mua.npz", coef=res.coef, t=res.t, p=res.p, p_adj=res.p_adj,
             degenerate=res.degenerate)
    labels = store.region_map().region_labels if store.region_map() is not None else np.ones(store.p, int)
    alpha = 1 - args.pip_cutoff
    _write_csv(out / "voxels.csv", ["voxel_id", "region", "coef", "t", "p", "p_adj", "selected"],
               [(j, int(labels[j]), res.coef[j], res.t[j], res.p[j], res.p_adj[j],
                 int(res.p_adj[j] < alpha)) for j in range(store.p)])
    _json(out / "summary.json", {"algorithm": "mua", "df": res.df, "alpha": alpha,
                                 "n_selected": int(np.sum(res.p_adj < alpha)),
                                 "n_degenerate": int(res.degenerate.sum())})


def _fit_bayes(store, args, algorithm, out):
    basis = _basis_for(store, args)
    step = StepSchedule(*args.step) if args.step else StepSchedule()
    cfg = SamplerConfig(algorithm=algorithm, iterations=args.iterations, burn_in=args.burn_in,
                        subsample=args.subsample, eta_every=args.eta_every, seed=args.seed,
                        chains=args.chains, checkpoint_every=args.checkpoint_every, step=step,
                        residual_space=args.residual_space)
    hyper = Hyperparams(sigma_beta2_fixed=args.sigma_beta2)
    _json(out / "run.json", {"data": str(store.root), "basis": args.basis, "sampler": cfg.to_dict(),
                             "hyper": hyper.to_dict(), "schema": 1})
    outputs, psrf = run_multichain(store, basis, cfg, hyper, out_dir=out, resume=args.resume)
    for o in outputs:
        o.save(out / f"chain_{o.chain}" / "chain.npz")
    _write_posterior(out, store, outputs, args.pip_cutoff, args.op_threshold)
    _json(out / "summary.json", {
        "algorithm": algorithm, "L": basis.L, "n_regions": basis.n_regions,
        "psrf": None if psrf is None else {"point": psrf[0], "upper": psrf[1]},
        "chains": [{"chain": o.chain, "wall_seconds": o.wall_seconds, "peak_rss_bytes": o.peak_rss_bytes,
                    "retained": o.n_retained, "digest": o.digest(),
                    "final_variances": o.final_variances.tolist()} for o in outputs],
    })


def _write_posterior(out, store, outputs, cutoff, op_threshold):
    grid = store.region_map()
    labels = grid.region_labels if grid is not None else np.ones(store.p, int)
    post = PosteriorSummary.from_chains(outputs, labels)
    op = _group(store, 0.5 if op_threshold is None else op_threshold)
    _write_csv(out / "voxels.csv",
               ["voxel_id", "region", "pip", "beta_mean", "beta_delta_mean", "observed_proportion", "selected"],
               [(j, int(labels[j]), post.pip[j], post.beta_mean[j], post.beta_delta_mean[j], op.h[j],
                 int(post.pip[j] >= cutoff)) for j in range(store.p)])
    sums = effect_sums(post.beta_mean, post.pip, labels, cutoff)
    _write_csv(out / "regions.csv",
               ["region", "size", "rlar_mean", "rlar_lo", "rlar_hi", "neg_sum", "neg_count", "pos_sum", "pos_count"],
               [(r, v["size"], v["mean"], v["lo"], v["hi"], *sums[r]) for r, v in sorted(post.rlar.items())])


def cmd_fit(args):
    algorithm = ALIASES.get(args.algorithm)
    if algorithm is None:
        raise ConfigError(f"unknown algorithm {args.algorithm!r}")
    store = _open_store(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=_threads(args)):
        if algorithm == "mua":
            _fit_mua(store, args, out)
        else:
            _fit_bayes(store, args, algorithm, out)
    print(f"results in {out}")


def _load_results(path):
    path = Path(path)
    try:
        summary = json.loads((path / "summary.json").read_text())
        rows = _read_csv(path / "voxels.csv")
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise DataError(f"{path} is not a results directory ({exc})") from None
    if "algorithm" not in summary or not rows:
        raise DataError(f"{path} is not a results directory")
    return summary, rows


def cmd_evaluate(args):
    truth = GroundTruth.load(args.truth) if args.truth else None
    table = []
    for res in args.results:
        summary, rows = _load_results(res)
        method = summary["algorithm"]
        if method == "mua":
            score = -np.array([float(r["p_adj"]) for r in rows])
            selected = np.array([float(r["p_adj"]) < 1 - args.pip_cutoff for r in rows])
        else:
            score = np.array([float(r["pip"]) for r in rows])
            selected = score >= args.pip_cutoff
        entry = {"method": method, "results": str(res), "n_selected": int(selected.sum())}
        if truth is not None:
            active = truth.delta_true
            if active.size != score.size:
                raise DataError("truth and results cover different voxel counts")
            c = confusion(selected, active)
            entry.update(tpr_at_fpr=tpr_at_fpr(score, active, 0.1, rule="quantile" if method == "mua" else "fixed"),
                         fdr_at_cutoff=c["fdr"], tpr_at_cutoff=c["tpr"], tp=c["tp"], fp=c["fp"],
                         fn=c["fn"], tn=c["tn"])
        table.append(entry)
    out = Path(args.out or args.results[0])
    out.mkdir(parents=True, exist_ok=True)
    keys = list(dict.fromkeys(k for e in table for k in e))
    _write_csv(out / "metrics.csv", keys, [[e.get(k, "") for k in keys] for e in table])
    _json(out / "metrics.json", table)
    for e in table:
        print(json.dumps(e, default=_plain))


def _estimate(row):
    return row["beta_mean"] if "beta_mean" in row else row["coef"]


def cmd_compare(args):
    _, a = _load_results(args.a)
    _, b = _load_results(args.b)
    if len(a) != len(b):
        raise DataError("results cover different voxel counts")
    store = _open_store(args.manifest)
    op = observed_proportion(store, args.op_threshold)
    rows = []
    for j in np.flatnonzero(op.group_mask):
        ra, rb = a[j], b[j]
        h = float(op.h[j])
        rows.append((j, ra["region"], h, stratum(h) or "below", _estimate(ra), _estimate(rb),
                     ra.get("pip", ""), rb.get("pip", "")))
    _write_csv(args.out, ["voxel_id", "region", "observed_proportion", "stratum", "estimate_a",
                          "estimate_b", "pip_a", "pip_b"], rows)
    print(f"{len(rows)} voxels written to {args.out}")


def cmd_report(args):
    summary, rows = _load_results(args.results)
    lines = [f"algorithm: {summary['algorithm']}"]
    if summary["algorithm"] == "mua":
        lines.append(f"selected voxels (BH < {summary['alpha']:.3g}): {summary['n_selected']}")
    else:
        psrf = summary.get("psrf")
        lines.append(f"chains: {len(summary['chains'])}, basis functions: {summary['L']}")
        if psrf:
            lines.append(f"PSRF {psrf['point']:.3f} (upper {psrf['upper']:.3f})")
        for c in summary["chains"]:
            lines.append(f"chain {c['chain']}: {c['wall_seconds']:.1f} s, peak RSS "
                         f"{c['peak_rss_bytes'] / 2**20:.1f} MiB, variances {np.round(c['final_variances'], 4).tolist()}")
        regions = _read_csv(Path(args.results) / "regions.csv")
        regions.sort(key=lambda r: -float(r["rlar_mean"]))
        lines.append(f"top {min(args.top, len(regions))} regions by activation rate:")
        for r in regions[: args.top]:
            lines.append(f"  region {r['region']:>4s} size {r['size']:>6s} RLAR {float(r['rlar_mean']):.3f} "
                         f"[{float(r['rlar_lo']):.3f}, {float(r['rlar_hi']):.3f}] "
                         f"neg {float(r['neg_sum']):.3f} ({r['neg_count']}) pos {float(r['pos_sum']):.3f} ({r['pos_count']})")
    text = "\n".join(lines) + "\n"
    (Path(args.results) / "report.txt").write_text(text)
    sys.stdout.write(text)


# ------------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="sbios", description="Bayesian image-on-scalar regression")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON file of simulation settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pattern", choices=("I", "II", "none"))
    p.add_argument("--op-level", type=float)
    p.add_argument("--sigma-y", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--layout", choices=("lattice", "brain"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="convert flat arrays into batch files")
    p.add_argument("--source", required=True,
                   help="directory with outcomes.npy, covariates.npy and optional masks.npy, region_map.csv")
    p.add_argument("--batch-size", type=int, default=500)
    p.add_argument("--n-exposures", type=int, default=1)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("basis", help="build and save kernel bases")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rho", type=float, default=2.0)
    p.add_argument("--nu", type=float, default=0.2)
    p.add_argument("--energy", type=float)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--distance", choices=("squared", "plain"), default="squared")
    p.add_argument("--single-kernel", action="store_true")
    p.add_argument("--a", type=float, default=0.01)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--degree", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("fit", help="fit a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--algorithm", default="sgldimp", help="gibbs, sgld0, sgldimp or mua")
    p.add_argument("--basis")
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--burn-in", type=int, default=4000)
    p.add_argument("--subsample", type=int, default=200)
    p.add_argument("--eta-every", type=int)
    p.add_argument("--step", type=float, nargs=3, metavar=("A", "B", "GAMMA"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--sigma-beta2", type=float, help="fix sigma_beta^2 instead of sampling it")
    p.add_argument("--residual-space", choices=("voxel", "projected"), default="voxel")
    p.add_argument("--op-threshold", type=float)
    p.add_argument("--pip-cutoff", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score results, optionally against simulation truth")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--truth", help="dataset directory holding truth.npz")
    p.add_argument("--pip-cutoff", type=float, default=0.95)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="paired per-voxel estimates of two fits")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--op-threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="text summary of a results directory")
    p.add_argument("--results", required=True)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SbiosError as exc:
        print(f"sbios: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"sbios: DataError: missing file {exc.filename}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
