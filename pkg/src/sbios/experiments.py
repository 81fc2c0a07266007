"""Simulation-study drivers shared by the scripts, the CLI and the acceptance tests.

Each driver generates data with :mod:`sbios.simgen`, fits the requested
methods and returns plain dictionaries of metrics so results can be dumped
to JSON directly.  Memory and timing measurements run ``sbios fit`` in a
child process so the parent's own allocations do not leak into the numbers.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .inference_eval import confusion, fdr_tpr_at_pip, mua_fit, tpr_at_fpr
from .kernel_basis import BasisSet, hermite_basis
from .model_core import Hyperparams
from .samplers import SamplerConfig, run_chain
from .simgen import SimConfig, generate

__all__ = ["simulation_replicate", "simulation_study", "summarise", "measure_fit",
           "ukb_scale_replicate", "single_kernel_basis"]

BAYES = ("gibbs", "sgld_zero", "sgld_impute")


def _score_bayes(pip, truth, cutoff):
    fdr, tpr = fdr_tpr_at_pip(pip, truth, cutoff)
    return {"tpr_at_fpr": tpr_at_fpr(pip, truth, 0.1, rule="fixed"),
            "fdr_at_cutoff": fdr, "tpr_at_cutoff": tpr}


def simulation_replicate(seed, work, *, methods=("mua", "sgld_zero", "sgld_impute"),
                         iterations=3000, burn_in=2000, pip_cutoff=0.95, keep=False,
                         sampler=None, **sim):
    """Generate one dataset and score every method on it.

    ``sim`` overrides :class:`SimConfig` fields and ``sampler`` holds extra
    :class:`SamplerConfig` fields.  Returns ``{method: metrics}`` where the
    metrics are TPR at FPR 0.1 plus FDR/TPR at the PIP cutoff (BH level
    ``1 - pip_cutoff`` for MUA) and the wall time.
    """
    work = Path(work)
    data = work / f"data_{seed}"
    cfg = SimConfig(seed=seed, **sim)
    store, truth, basis = generate(cfg, data)
    active = truth.delta_true
    out = {}
    try:
        for method in methods:
            t0 = time.perf_counter()
            if method == "mua":
                res = mua_fit(store)
                sel = res.p_adj < 1 - pip_cutoff
                c = confusion(sel, active)
                out[method] = {"tpr_at_fpr": tpr_at_fpr(-res.p_adj, active, 0.1, rule="quantile"),
                               "fdr_at_cutoff": c["fdr"], "tpr_at_cutoff": c["tpr"]}
            else:
                sc = SamplerConfig(algorithm=method, iterations=iterations, burn_in=burn_in,
                                   seed=seed, **(sampler or {}))
                chain = run_chain(store, basis, sc, Hyperparams(), workdir=work / f"work_{seed}_{method}")
                out[method] = _score_bayes(chain.pip[0], active, pip_cutoff)
                shutil.rmtree(work / f"work_{seed}_{method}", ignore_errors=True)
            out[method]["seconds"] = time.perf_counter() - t0
    finally:
        if not keep:
            shutil.rmtree(data, ignore_errors=True)
    return out


def summarise(rows):
    """Mean and standard error of every metric across replicates."""
    summary = {}
    for method in rows[0]:
        summary[method] = {}
        for key in rows[0][method]:
            v = np.array([r[method][key] for r in rows], dtype=float)
            summary[method][key] = {"mean": float(np.nanmean(v)),
                                    "se": float(np.nanstd(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0}
    return summary


def simulation_study(seeds, work, *, log=None, **kw):
    """Run :func:`simulation_replicate` over ``seeds``; returns ``(rows, summary)``."""
    rows = []
    for s in seeds:
        rows.append(simulation_replicate(s, work, **kw))
        if log is not None:
            log(f"seed {s}: " + json.dumps({m: round(v["tpr_at_fpr"], 4) for m, v in rows[-1].items()}))
    return rows, summarise(rows)


def measure_fit(manifest, algorithm, out_dir, *, iterations, burn_in=None, extra=()):
    """Run ``sbios fit`` in a child process; returns peak RSS and wall time.

    The peak is the largest ``peak_rss_bytes`` in the chain's diagnostics
    stream, i.e. the resident size of the child sampled while it runs.
    """
    out_dir = Path(out_dir)
    burn_in = iterations // 2 if burn_in is None else burn_in
    cmd = [sys.executable, "-m", "sbios.cli", "fit", "--manifest", str(manifest),
           "--algorithm", algorithm, "--iterations", str(iterations), "--burn-in", str(burn_in),
           "--out", str(out_dir), *extra]
    t0 = time.perf_counter()
    subprocess.run(cmd, check=True, capture_output=True, text=True)
    wall = time.perf_counter() - t0
    summary = json.loads((out_dir / "summary.json").read_text())
    peak = 0
    with open(out_dir / "chain_0" / "diagnostics.jsonl") as fh:
        for line in fh:
            peak = max(peak, json.loads(line)["peak_rss_bytes"])
    return {"peak_rss_bytes": peak, "wall_seconds": wall,
            "sampler_seconds": summary["chains"][0]["wall_seconds"]}


def single_kernel_basis(grid, a=0.01, b=1.0, degree=10):
    """One Hermite basis over every voxel of ``grid`` (a single region)."""
    rb = hermite_basis(grid.coords, a=a, b=b, degree=degree, region_id=1)
    return BasisSet([rb], [np.arange(grid.p)], grid.p)


def ukb_scale_replicate(seed, work, *, kernel="multi", n=2000, iterations=2000, burn_in=1000,
                        alpha=0.1, keep=False, sampler=None, **sim):
    """Brain-layout run comparing SBIOSimp and MUA confusion matrices.

    MUA selects BH-adjusted p-values below ``alpha``; the sampler selects
    PIP of at least ``1 - alpha``.  ``kernel`` is ``"multi"`` (region-wise
    Matérn bases) or ``"single"`` (one Hermite basis for all voxels).
    """
    work = Path(work)
    data = work / f"ukb_{kernel}_{seed}"
    cfg = SimConfig(layout="brain", region_grid=sim.pop("region_grid", (4, 5, 3)), n=n,
                    seed=seed, amplitude=sim.pop("amplitude", 1.0), **sim)
    basis = None
    if kernel == "single":
        from .simgen import brain_grid
        basis = single_kernel_basis(brain_grid(cfg.region_grid))
    store, truth, basis = generate(cfg, data, basis=basis)
    active = truth.delta_true
    try:
        t0 = time.perf_counter()
        res = mua_fit(store)
        mua = confusion(res.p_adj < alpha, active)
        mua["seconds"] = time.perf_counter() - t0
        sc = SamplerConfig(algorithm="sgld_impute", iterations=iterations, burn_in=burn_in,
                           seed=seed, **(sampler or {}))
        t0 = time.perf_counter()
        chain = run_chain(store, basis, sc, Hyperparams(), workdir=work / f"ukb_work_{kernel}_{seed}")
        imp = confusion(chain.pip[0] >= 1 - alpha, active)
        imp["seconds"] = time.perf_counter() - t0
    finally:
        shutil.rmtree(work / f"ukb_work_{kernel}_{seed}", ignore_errors=True)
        if not keep:
            shutil.rmtree(data, ignore_errors=True)
    return {"kernel": kernel, "p": store.p, "L": basis.L, "n": n, "active": int(active.sum()),
            "mua": mua, "sgld_impute": imp}
