"""Gibbs and stochastic-gradient Langevin chains over batched data.

Three algorithms share one iteration skeleton:

* ``gibbs``: every block, including ``theta_beta``, is drawn from its exact
  full conditional.  All data are held in memory and the data sums are
  recomputed from them each iteration.
* ``sgld_zero``: ``theta_beta`` moves by Langevin steps on a subsample of the
  current batch; unobserved outcomes are fixed at 0.
* ``sgld_impute``: as ``sgld_zero`` but unobserved outcomes are redrawn from
  the model after each subject-effect sweep, with every dependent summary
  updated incrementally.

In the SGLD modes the per-subject arrays (projected outcomes and subject
effects) live in one file per batch under the chain's work directory, so the
resident set holds about one batch at a time.

Random numbers come from Philox keyed by ``(seed, chain)`` with the counter
set from ``(block, iteration)``, so a chain can be resumed from any
checkpoint and reproduce the uninterrupted run exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import shutil
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import psutil

from .datastore import SufficientStats, apply_imputation_block
from .errors import ConfigError, SchemaError
from .inference_eval import gelman_rubin
from .model_core import (
    Hyperparams,
    ModelState,
    beta_full_conditional,
    beta_log_gradient,
    check_finite_state,
    delta_residual,
    delta_theta,
    eta_full_conditional,
    gamma_full_conditional,
    sample_delta,
    subsample_terms,
    variance_full_conditionals,
)

__all__ = [
    "StepSchedule",
    "SamplerConfig",
    "ChainOutput",
    "step_size",
    "sgld_step_theta_beta",
    "run_chain",
    "run_multichain",
    "chain_rng",
]

ALGORITHMS = ("gibbs", "sgld_zero", "sgld_impute")
_CKPT_MAGIC = b"SBCK"


def step_size(t, a, b, gamma_exp):
    """``a (b + t)^(-gamma_exp)``."""
    if t < 0:
        raise ConfigError("iteration index must be nonnegative")
    return a * (b + t) ** (-gamma_exp)


@dataclass(frozen=True)
class StepSchedule:
    a: float = 1e-3
    b: float = 10.0
    gamma_exp: float = 0.55

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ConfigError("step schedule needs a > 0 and b > 0")
        if not 0.5 < self.gamma_exp <= 1:
            warnings.warn(f"step decay exponent {self.gamma_exp} is outside (0.5, 1]", stacklevel=3)

    def __call__(self, t):
        return step_size(t, self.a, self.b, self.gamma_exp)


@dataclass
class SamplerConfig:
    """Chain settings.

    ``eta_every`` defaults to 1 for ``gibbs`` and 10 otherwise.  At most
    ``max_retained`` post-burn-in iterations are kept, evenly thinned.
    ``gr_fraction`` is the share of subjects (taken from the start of each
    batch) on which the residual-norm series for convergence checks is
    evaluated.  ``shared_stream`` makes every chain use chain 0's random
    stream and exists for testing the diagnostics only.
    """

    algorithm: str = "sgld_zero"
    iterations: int = 5000
    burn_in: int = 4000
    subsample: int = 200
    eta_every: int | None = None
    step: StepSchedule = field(default_factory=StepSchedule)
    seed: int = 0
    chains: int = 1
    max_retained: int = 1000
    init: str = "mua"
    init_variance: float = 1.0
    track_residual: bool = False
    gr_fraction: float = 0.2
    checkpoint_every: int = 0
    divergence_bound: float = 1e8
    shared_stream: bool = False
    residual_space: str = "voxel"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if isinstance(self.step, (tuple, list)):
            self.step = StepSchedule(*self.step)
        elif isinstance(self.step, dict):
            self.step = StepSchedule(**self.step)
        if self.eta_every is None:
            self.eta_every = 1 if self.algorithm == "gibbs" else 10
        if self.iterations < 0 or self.burn_in < 0:
            raise ConfigError("iterations and burn_in must be nonnegative")
        if self.eta_every < 1:
            raise ConfigError("eta_every must be at least 1")
        if self.subsample < 1:
            raise ConfigError("subsample size must be positive")
        if self.max_retained < 1:
            raise ConfigError("max_retained must be positive")
        if self.init not in ("mua", "zero"):
            raise ConfigError("init must be 'mua' or 'zero'")
        if not 0 < self.gr_fraction <= 1:
            raise ConfigError("gr_fraction must lie in (0, 1]")
        if self.chains < 1:
            raise ConfigError("chains must be positive")
        if self.residual_space not in ("projected", "voxel"):
            raise ConfigError("residual_space must be 'projected' or 'voxel'")

    @property
    def thin(self):
        post = self.iterations - self.burn_in
        return max(1, math.ceil(post / self.max_retained)) if post > 0 else 1

    @property
    def n_retained(self):
        post = self.iterations - self.burn_in
        return post // self.thin if post > 0 else 0

    def is_retained(self, t):
        return t > self.burn_in and (t - self.burn_in) % self.thin == 0

    def to_dict(self):
        d = asdict(self)
        d["step"] = asdict(self.step)
        return d


def chain_rng(seed, chain, block, iteration):
    """Independent generator for one (block, iteration) of a chain."""
    bg = np.random.Philox(key=[seed % 2**64, chain % 2**64], counter=[0, 0, block, iteration])
    return np.random.Generator(bg)


def sgld_step_theta_beta(theta, grad, tau, rng):
    """One Langevin move ``theta + tau/2 grad + sqrt(tau) eps``; returns a new array."""
    noise = rng.standard_normal(np.shape(theta))
    return theta + 0.5 * tau * grad + math.sqrt(tau) * noise


# ------------------------------------------------------------------ output


@dataclass
class ChainOutput:
    """Retained draws, running accumulators and diagnostics of one chain."""

    algorithm: str
    chain: int
    p: int
    iterations: np.ndarray  # retained iteration numbers
    theta_beta_draws: np.ndarray  # (M, H, L)
    delta_bits: np.ndarray  # (M, H, ceil(p/8)) uint8
    variance_draws: np.ndarray  # (M, 4): sigma_y2, sigma_beta2, sigma_gamma2, sigma_eta2
    residual_norm: np.ndarray  # (M,) or empty
    pip_counts: np.ndarray  # (H, p)
    beta_sum: np.ndarray
    beta_delta_sum: np.ndarray
    final_theta_beta: np.ndarray
    final_theta_gamma: np.ndarray
    final_delta: np.ndarray
    final_variances: np.ndarray
    wall_seconds: float = 0.0
    peak_rss_bytes: int = 0
    diagnostics: list = field(default_factory=list)

    @property
    def n_retained(self):
        return int(self.iterations.size)

    @property
    def pip(self):
        return self.pip_counts / max(1, self.n_retained)

    @property
    def beta_mean(self):
        return self.beta_sum / max(1, self.n_retained)

    @property
    def beta_delta_mean(self):
        return self.beta_delta_sum / max(1, self.n_retained)

    def delta_draws(self, term=0):
        if self.n_retained == 0:
            return np.zeros((0, self.p), dtype=bool)
        bits = np.unpackbits(self.delta_bits[:, term], axis=-1, count=self.p, bitorder="little")
        return bits.astype(bool)

    _ARRAYS = ("iterations", "theta_beta_draws", "delta_bits", "variance_draws", "residual_norm",
               "pip_counts", "beta_sum", "beta_delta_sum", "final_theta_beta", "final_theta_gamma",
               "final_delta", "final_variances")

    def digest(self):
        """SHA-256 over every sampled quantity (not timings)."""
        h = hashlib.sha256()
        for k in self._ARRAYS:
            a = np.ascontiguousarray(getattr(self, k))
            h.update(k.encode())
            h.update(str(a.dtype).encode() + str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def save(self, path):
        """Write the draws to ``path`` (``.npz``) and run measurements beside it.

        Wall time and memory go to ``<path>.timing.json`` so the archive
        itself is a pure function of data, configuration and seed.
        """
        path = Path(path)
        meta = {"algorithm": self.algorithm, "chain": self.chain, "p": self.p}
        np.savez(path, meta=np.array(json.dumps(meta)), **{k: getattr(self, k) for k in self._ARRAYS})
        timing = {"wall_seconds": self.wall_seconds, "peak_rss_bytes": self.peak_rss_bytes}
        Path(str(path) + ".timing.json").write_text(json.dumps(timing))

    @classmethod
    def load(cls, path):
        path = Path(path)
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k: z[k] for k in cls._ARRAYS}
        side = Path(str(path) + ".timing.json")
        timing = json.loads(side.read_text()) if side.exists() else {}
        return cls(meta["algorithm"], meta["chain"], meta["p"], **arrays,
                   wall_seconds=timing.get("wall_seconds", float("nan")),
                   peak_rss_bytes=timing.get("peak_rss_bytes", 0))


# --------------------------------------------------------------- the chain


class _MemoryProbe:
    def __init__(self):
        self._proc = psutil.Process()
        self.peak = 0
        self.current = 0

    def sample(self):
        self.current = self._proc.memory_info().rss
        self.peak = max(self.peak, self.current)
        return self.current


class _Chain:
    """State and data plumbing for one chain; see :func:`run_chain`."""

    def __init__(self, store, basis, config, hyper, chain, workdir, diagnostics_path):
        if basis.p != store.p:
            raise SchemaError(f"basis covers {basis.p} voxels but the store has {store.p}")
        if config.algorithm != "gibbs" and config.subsample > min(store.batch_sizes):
            raise ConfigError(
                f"subsample size {config.subsample} exceeds the smallest batch ({min(store.batch_sizes)})")
        self.store, self.basis, self.cfg, self.hyper = store, basis, config, hyper
        self.chain = chain
        self.key_chain = 0 if config.shared_stream else chain
        self.H, self.m, self.n, self.L = store.n_exposures, store.m, store.n, basis.L
        self.lam = basis.lam
        self.sgld = config.algorithm != "gibbs"
        self.impute = config.algorithm == "sgld_impute"
        self.workdir = Path(workdir) if workdir is not None else None
        if self.sgld and self.workdir is None:
            raise ConfigError("SGLD chains need a work directory")
        self.diag_path = Path(diagnostics_path) if diagnostics_path is not None else None
        self.mem = _MemoryProbe()
        self.last_rss = None
        self.loglik = None

    # -- random numbers
    def rng(self, block, t):
        return chain_rng(self.cfg.seed, self.key_chain, block, t)

    # -- setup -----------------------------------------------------------
    def setup(self):
        store, basis = self.store, self.basis
        self.X = [store.X(b) for b in range(store.n_batches)]
        self.Z = [store.Z(b) for b in range(store.n_batches)]
        self.offsets = store.batch_offsets
        self.gr_rows = [np.arange(max(1, math.ceil(self.cfg.gr_fraction * nb))) for nb in store.batch_sizes]
        if self.sgld:
            self.workdir.mkdir(parents=True, exist_ok=True)
            self._setup_files()
        else:
            self._setup_memory()
        self.mem.sample()

    def _setup_memory(self):
        store, basis = self.store, self.basis
        self.Y = np.concatenate([store.masked_outcomes(b) for b in range(store.n_batches)], axis=0)
        self.Xall = np.concatenate(self.X, axis=0)
        self.Zall = np.concatenate(self.Z, axis=0)
        self.Ystar = basis.project(self.Y)
        self.Eta = np.zeros((self.n, self.L))
        self.stats = SufficientStats.from_arrays(self.Y, self.Xall, self.Zall, basis)
        self.yy = float(np.einsum("ij,ij->", self.Y, self.Y))
        self.ysq = float(np.einsum("ij,ij->", self.Ystar, self.Ystar))
        self.gr_index = np.concatenate([self.offsets[b] + r for b, r in enumerate(self.gr_rows)])

    def _file(self, kind, b):
        return self.workdir / f"{kind}_{b:04d}.npy"

    def _setup_files(self):
        store, basis = self.store, self.basis
        R = basis.n_regions
        self.stats = None
        gr_y, n_missing = [], 0
        self.yimp_offsets = [0]
        self.yy = self.ysq = 0.0
        for b in range(store.n_batches):
            Y = np.array(store.outcomes(b))
            M = store.mask(b)
            Y[~M] = 0.0
            part = SufficientStats.from_arrays(Y, self.X[b], self.Z[b], basis)
            if self.stats is None:
                self.stats = part
            else:
                self.stats.accumulate(part)
            ys = np.lib.format.open_memmap(self._file("ystar", b), "w+", np.float64, (Y.shape[0], self.L))
            ys[:] = basis.project(Y)
            self.yy += float(np.einsum("ij,ij->", Y, Y))
            self.ysq += float(np.einsum("ij,ij->", ys, ys))
            gr_y.append(np.array(ys[self.gr_rows[b]]))
            del ys
            eta = np.lib.format.open_memmap(self._file("eta", b), "w+", np.float64, (Y.shape[0], self.L))
            del eta
            if self.impute:
                ii, jj = np.nonzero(~M)
                reg = basis.region_of[jj]
                order = np.lexsort((jj, ii, reg))
                ii, jj, reg = ii[order], jj[order], reg[order]
                rptr = np.searchsorted(reg, np.arange(R + 1))
                rows = basis.row_in_region[jj]
                cols, cpos, cptr = [], np.empty(ii.size, dtype=np.int32), [0]
                for r in range(R):
                    s = slice(rptr[r], rptr[r + 1])
                    u, inv = np.unique(rows[s], return_inverse=True)
                    cols.append(u.astype(np.int32))
                    cpos[s] = inv
                    cptr.append(cptr[-1] + u.size)
                arrays = {"i": ii.astype(np.int32), "c": cpos, "rptr": rptr,
                          "cols": np.concatenate(cols) if cols else np.zeros(0, np.int32),
                          "cptr": np.array(cptr)}
                for key, arr in arrays.items():
                    np.save(self._file("miss" + key, b), arr)
                n_missing += ii.size
                self.yimp_offsets.append(n_missing)
            del Y, M
            self.mem.sample()
        self.gr_ystar = np.concatenate(gr_y, axis=0)
        self.gr_eta = np.zeros_like(self.gr_ystar)
        self.gr_X = np.concatenate([self.X[b][r] for b, r in enumerate(self.gr_rows)], axis=0)
        self.gr_Z = np.concatenate([self.Z[b][r] for b, r in enumerate(self.gr_rows)], axis=0)
        if self.impute:
            yimp = np.lib.format.open_memmap(self.workdir / "yimp.npy", "w+", np.float64, (max(1, n_missing),))
            del yimp

    def initial_state(self):
        cfg, basis, st = self.cfg, self.basis, self.stats
        state = ModelState.initial(basis, self.H, self.m, variance=cfg.init_variance,
                                   prior_incl=self.hyper.prior_incl)
        if self.hyper.sigma_beta2_fixed is not None:
            state.sigma_beta2 = self.hyper.sigma_beta2_fixed
        if cfg.init == "mua":
            # least squares of Y* on [X, Z] in projected space
            G = np.block([[st.xx, st.xz], [st.xz.T, st.zz]])
            C = np.concatenate([st.proj_x, st.proj_z], axis=1).T
            coef = np.linalg.lstsq(G, C, rcond=None)[0]
            state.theta_beta = coef[: self.H].copy()
            state.theta_gamma = coef[self.H:].copy()
        return state

    # -- block access ----------------------------------------------------
    def _open(self, kind, b, mode="r"):
        # plain ndarray view of the mapping; memmap subclass indexing is slow
        return np.asarray(np.load(self._file(kind, b), mmap_mode=mode))

    # -- iteration pieces --------------------------------------------------
    def refresh_gibbs_stats(self):
        """Recompute every data sum from the in-memory data."""
        s = self.stats
        s.xy = self.Xall.T @ self.Y
        s.proj_x = self.Ystar.T @ self.Xall
        s.proj_z = self.Ystar.T @ self.Zall
        s.eta_x = self.Eta.T @ self.Xall
        s.eta_z = self.Eta.T @ self.Zall

    def update_beta_gibbs(self, state, rng):
        for r in range(self.basis.n_regions):
            cond = beta_full_conditional(self.stats, state, self.basis, r)
            state.theta_beta[:, self.basis.slices[r]] = cond.sample(rng)

    def update_beta_sgld(self, state, rng, t, tau):
        b = (t - 1) % self.store.n_batches
        ys = self._open("ystar", b)
        eta = self._open("eta", b)
        X, Z = self.X[b], self.Z[b]
        nb, ns = X.shape[0], self.cfg.subsample
        for r in range(self.basis.n_regions):
            sl = self.basis.slices[r]
            idx = np.sort(rng.choice(nb, ns, replace=False))
            bI, GI = subsample_terms(ys[idx, sl], eta[idx, sl], X[idx], Z[idx], state.theta_gamma[:, sl])
            grad = beta_log_gradient(bI, GI, state, self.basis, r, self.n, ns)
            state.theta_beta[:, sl] = sgld_step_theta_beta(state.theta_beta[:, sl], grad, tau, rng)
        self.mem.sample()
        del ys, eta

    def update_gamma(self, state, rng):
        if self.m == 0:
            return
        dth = delta_theta(self.basis, state)
        for r in range(self.basis.n_regions):
            sl = self.basis.slices[r]
            for k in range(self.m):
                mean, var = gamma_full_conditional(self.stats, state, self.basis, r, k, dth)
                state.theta_gamma[k, sl] = mean + np.sqrt(var) * rng.standard_normal(mean.size)

    def update_delta(self, state, rng):
        beta = self.basis.expand(state.theta_beta)
        resid = delta_residual(self.stats, state, self.basis)
        sample_delta(self.stats, state, self.basis, rng, beta=beta, resid=resid,
                     shared=self.hyper.shared_delta)

    def eta_sweep(self, state, t):
        """Redraw all subject effects, then sigma_y2 and sigma_eta2."""
        dth = delta_theta(self.basis, state)
        rss = eta_quad = 0.0
        eta_x = np.zeros((self.L, self.H))
        eta_z = np.zeros((self.L, self.m))
        blocks = range(self.store.n_batches) if self.sgld else [None]
        for b in blocks:
            g = self.rng(1 + (0 if b is None else b), t)
            if b is None:
                ys, X, Z = self.Ystar, self.Xall, self.Zall
            else:
                ys, X, Z = self._open("ystar", b), self.X[b], self.Z[b]
            mean, var = eta_full_conditional(ys, X, Z, dth, state.theta_gamma, state, self.lam)
            new = mean + np.sqrt(var) * g.standard_normal(mean.shape)
            res = ys - X @ dth - Z @ state.theta_gamma - new
            rss += float(np.einsum("ij,ij->", res, res))
            eta_quad += float(np.einsum("ij,ij,j->", new, new, 1.0 / self.lam))
            eta_x += new.T @ X
            eta_z += new.T @ Z
            if b is None:
                self.Eta = new
            else:
                out = self._open("eta", b, "r+")
                out[:] = new
                self.gr_eta[self._gr_slice(b)] = new[self.gr_rows[b]]
                del out, ys
            self.mem.sample()
            del mean, new, res
        self.stats.eta_x, self.stats.eta_z = eta_x, eta_z
        n_res = n_eta = self.n * self.L
        if self.cfg.residual_space == "voxel":
            rss += self.out_of_span_rss(state)
            n_res = self.n * self.basis.p
        self.last_rss = rss
        variance_full_conditionals(state, self.hyper, self._sigma_rng(t), rss=rss, n_res=n_res, eta_quad=eta_quad, n_eta=n_eta,
                                   lam=self.lam, update=("y", "eta"))
        self.loglik = -0.5 * rss / state.sigma_y2 - 0.5 * n_res * math.log(state.sigma_y2)

    def out_of_span_rss(self, state):
        """Residual sum of squares of the image parts outside the basis span.

        Confounder and subject effects live inside the span, so only the
        outcomes and the masked exposure effect contribute.
        """
        st, basis = self.stats, self.basis
        b = basis.expand(state.theta_beta) * state.delta
        bp = basis.project(b)
        cross = np.einsum("hp,hp->h", st.xy, b) - np.einsum("lh,hl->h", st.proj_x, bp)
        gram = b @ b.T - bp @ bp.T
        return (self.yy - self.ysq) - 2.0 * cross.sum() + float(np.sum(st.xx * gram))

    def _sigma_rng(self, t):
        return self.rng(1 + self.store.n_batches, t)

    def _gr_slice(self, b):
        start = sum(r.size for r in self.gr_rows[:b])
        return slice(start, start + self.gr_rows[b].size)

    def impute_sweep(self, state, t):
        """Redraw every unobserved outcome and fold the changes into the stats."""
        basis = self.basis
        beta_delta = basis.expand(state.theta_beta) * state.delta
        gamma = basis.expand(state.theta_gamma)
        sd = math.sqrt(state.sigma_y2)
        yimp = np.asarray(np.load(self.workdir / "yimp.npy", mmap_mode="r+"))
        for b in range(self.store.n_batches):
            g = self.rng(2 + self.store.n_batches + b, t)
            ii, cpos, rptr, cols_all, cptr = (np.load(self._file("miss" + k, b))
                                              for k in ("i", "c", "rptr", "cols", "cptr"))
            if ii.size == 0:
                continue
            ys = self._open("ystar", b, "r+")
            eta = self._open("eta", b)
            X, Z = self.X[b], self.Z[b]
            base = self.yimp_offsets[b]
            for r in range(basis.n_regions):
                s = slice(int(rptr[r]), int(rptr[r + 1]))
                if s.start == s.stop:
                    continue
                sl = basis.slices[r]
                cols = cols_all[cptr[r]: cptr[r + 1]]
                vox = basis.voxels[r][cols]
                Qc = basis.Q(r)[cols]
                mean = X @ beta_delta[:, vox] + Z @ gamma[:, vox] + eta[:, sl] @ Qc.T
                ei, ec = ii[s], cpos[s]
                new = mean[ei, ec] + sd * g.standard_normal(ei.size)
                pos = slice(base + s.start, base + s.stop)
                change = np.zeros_like(mean)
                change[ei, ec] = new - yimp[pos]
                dstar = apply_imputation_block(self.stats, basis, r, cols, X, Z, change)
                self.yy += float(new @ new - yimp[pos] @ yimp[pos])
                self.ysq += float(np.einsum("ij,ij->", dstar, 2.0 * ys[:, sl] + dstar))
                ys[:, sl] += dstar
                yimp[pos] = new
            self.gr_ystar[self._gr_slice(b)] = ys[self.gr_rows[b]]
            self.mem.sample()
            del ys, eta
        del yimp

    def residual_norm(self, state):
        dth = delta_theta(self.basis, state)
        if self.sgld:
            ys, X, Z, E = self.gr_ystar, self.gr_X, self.gr_Z, self.gr_eta
        else:
            g = self.gr_index
            ys, X, Z, E = self.Ystar[g], self.Xall[g], self.Zall[g], self.Eta[g]
        res = ys - X @ dth - Z @ state.theta_gamma - E
        return float(np.sqrt(np.einsum("ij,ij->", res, res)))

    def iterate(self, state, t):
        rng = self.rng(0, t)
        if self.sgld:
            tau = self.cfg.step(t)
            self.update_beta_sgld(state, rng, t, tau)
        else:
            tau = 0.0
            self.refresh_gibbs_stats()
            self.update_beta_gibbs(state, rng)
        self.update_gamma(state, rng)
        self.update_delta(state, rng)
        variance_full_conditionals(state, self.hyper, rng, lam=self.lam, update=("gamma", "beta"))
        if t % self.cfg.eta_every == 0:
            self.eta_sweep(state, t)
            if self.impute:
                self.impute_sweep(state, t)
        check_finite_state(state, t, self.cfg.divergence_bound)
        return tau


# -------------------------------------------------------------- accumulator


class _Recorder:
    def __init__(self, cfg, H, L, p):
        M = cfg.n_retained
        self.p = p
        self.k = 0
        self.iterations = np.zeros(M, dtype=np.int64)
        self.theta = np.zeros((M, H, L))
        self.bits = np.zeros((M, H, (p + 7) // 8), dtype=np.uint8)
        self.var = np.zeros((M, 4))
        self.resid = np.zeros(M if cfg.track_residual else 0)
        self.pip_counts = np.zeros((H, p), dtype=np.int64)
        self.beta_sum = np.zeros((H, p))
        self.beta_delta_sum = np.zeros((H, p))

    def add(self, t, state, basis, resid=None):
        k = self.k
        beta = basis.expand(state.theta_beta)
        self.iterations[k] = t
        self.theta[k] = state.theta_beta
        self.bits[k] = np.packbits(state.delta, axis=-1, bitorder="little")
        self.var[k] = state.variances()
        if self.resid.size:
            self.resid[k] = resid
        self.pip_counts += state.delta
        self.beta_sum += beta
        self.beta_delta_sum += beta * state.delta
        self.k += 1

    BLOCKS = ("iterations", "theta", "bits", "var", "resid", "pip_counts", "beta_sum", "beta_delta_sum")


# ------------------------------------------------------------- checkpoints


def _write_checkpoint(path, header, blocks):
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    specs, payload, offset = [], [], 0
    for name, arr in blocks.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.kind == "f":
            a = a.astype("<f8")
        elif a.dtype == bool:
            a = a.astype("<f8")
        raw = a.tobytes()
        pad = (-len(raw)) % 8
        specs.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                      "orig": str(np.asarray(arr).dtype)})
        payload.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    head = json.dumps({**header, "blocks": specs}).encode()
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<Q", len(head)) + head)
        fh.write(b"\0" * ((-(12 + len(head))) % 8))
        for raw in payload:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise SchemaError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, 4)
    header = json.loads(raw[12: 12 + hlen])
    start = 12 + hlen + ((-(12 + hlen)) % 8)
    blocks = {}
    for spec in header["blocks"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        a = np.frombuffer(raw, dt, count, start + spec["offset"]).reshape(spec["shape"]).copy()
        blocks[spec["name"]] = a.astype(spec["orig"])
    return header, blocks


def _save_chain_checkpoint(ch, state, rec, t, ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    tmp = ckpt_dir.with_name(ckpt_dir.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    blocks = {
        "theta_beta": state.theta_beta, "theta_gamma": state.theta_gamma,
        "delta": state.delta, "prior_incl": state.prior_incl,
    }
    for k in SufficientStats.FIELDS:
        blocks["stats_" + k] = getattr(ch.stats, k)
    for k in _Recorder.BLOCKS:
        blocks["rec_" + k] = getattr(rec, k)
    if ch.sgld:
        blocks["gr_ystar"], blocks["gr_eta"] = ch.gr_ystar, ch.gr_eta
        for f in ch.workdir.iterdir():
            if f.suffix in (".npy", ".npz"):
                shutil.copy2(f, tmp / f.name)
    else:
        blocks["eta"] = ch.Eta
    header = {
        "iteration": t, "chain": ch.chain, "algorithm": ch.cfg.algorithm,
        "config": ch.cfg.to_dict(), "hyper": ch.hyper.to_dict(),
        "dims": {"n": ch.n, "p": ch.basis.p, "L": ch.L, "H": ch.H, "m": ch.m},
        "variances": state.variances().tolist(), "recorded": rec.k,
        "last_rss": ch.last_rss, "loglik": ch.loglik, "sumsq": [ch.yy, ch.ysq],
        "yimp_offsets": getattr(ch, "yimp_offsets", None),
        "rng": {"generator": "Philox", "key": [ch.cfg.seed, ch.key_chain], "counter": [0, 0, "block", t + 1]},
    }
    _write_checkpoint(tmp / "state.ckpt", header, blocks)
    if ckpt_dir.exists():
        shutil.rmtree(ckpt_dir)
    tmp.rename(ckpt_dir)


def _restore_chain_checkpoint(ch, rec, ckpt_dir):
    header, blocks = read_checkpoint(Path(ckpt_dir) / "state.ckpt")
    dims = {"n": ch.n, "p": ch.basis.p, "L": ch.L, "H": ch.H, "m": ch.m}
    if header["dims"] != dims or header["algorithm"] != ch.cfg.algorithm:
        raise SchemaError("checkpoint does not match the data, basis or algorithm")
    saved = SamplerConfig(**header["config"])
    if (saved.burn_in, saved.thin, saved.n_retained) != (ch.cfg.burn_in, ch.cfg.thin, ch.cfg.n_retained):
        raise SchemaError("checkpoint was written with a different burn-in or retention schedule")
    v = header["variances"]
    state = ModelState(blocks["theta_beta"], blocks["theta_gamma"], blocks["delta"],
                       v[0], v[1], v[2], v[3], blocks["prior_incl"])
    for k in SufficientStats.FIELDS:
        setattr(ch.stats, k, blocks["stats_" + k])
    for k in _Recorder.BLOCKS:
        setattr(rec, k, blocks["rec_" + k])
    rec.k = header["recorded"]
    ch.last_rss, ch.loglik = header["last_rss"], header["loglik"]
    ch.yy, ch.ysq = header["sumsq"]
    if ch.sgld:
        ch.gr_ystar, ch.gr_eta = blocks["gr_ystar"], blocks["gr_eta"]
        for f in Path(ckpt_dir).iterdir():
            if f.suffix in (".npy", ".npz"):
                shutil.copy2(f, ch.workdir / f.name)
    else:
        ch.Eta = blocks["eta"]
    return state, int(header["iteration"])


# -------------------------------------------------------------- public API


def run_chain(store, basis, config, hyper=None, *, chain=0, workdir=None, diagnostics=None,
              checkpoint_dir=None, resume_from=None):
    """Run one chain and return its :class:`ChainOutput`.

    Parameters
    ----------
    store : BatchStore
    basis : BasisSet
        Must cover the store's voxels.
    config : SamplerConfig
    hyper : Hyperparams, optional
    chain : int
        Chain index; selects the random stream.
    workdir : path, optional
        Scratch directory for per-batch files (required for SGLD).
    diagnostics : path, optional
        JSON-lines file receiving one record per iteration.
    checkpoint_dir : path, optional
        Written every ``config.checkpoint_every`` iterations.
    resume_from : path, optional
        Checkpoint directory to continue from.
    """
    hyper = hyper or Hyperparams()
    t0 = time.perf_counter()
    ch = _Chain(store, basis, config, hyper, chain, workdir, diagnostics)
    ch.setup()
    rec = _Recorder(config, ch.H, ch.L, basis.p)
    if resume_from is not None:
        state, start = _restore_chain_checkpoint(ch, rec, resume_from)
    else:
        state, start = ch.initial_state(), 0
    diag_fh = None
    if ch.diag_path is not None:
        kept = []
        if resume_from is not None and Path(ch.diag_path).exists():
            # drop records written after the checkpoint was taken
            with open(ch.diag_path) as fh:
                kept = [ln for ln in fh if json.loads(ln)["iteration"] <= start]
        diag_fh = open(ch.diag_path, "w")
        diag_fh.writelines(kept)
    try:
        for t in range(start + 1, config.iterations + 1):
            tau = ch.iterate(state, t)
            if config.is_retained(t):
                resid = ch.residual_norm(state) if config.track_residual else None
                rec.add(t, state, basis, resid)
            rss_now = ch.mem.sample()
            if diag_fh is not None:
                diag_fh.write(json.dumps({
                    "iteration": t, "tau": tau, "rss": ch.last_rss, "loglik": ch.loglik,
                    "rss_bytes": rss_now, "peak_rss_bytes": ch.mem.peak,
                    "elapsed_ms": round(1000 * (time.perf_counter() - t0), 3),
                }) + "\n")
            if checkpoint_dir is not None and config.checkpoint_every and t % config.checkpoint_every == 0:
                _save_chain_checkpoint(ch, state, rec, t, checkpoint_dir)
    finally:
        if diag_fh is not None:
            diag_fh.close()
    k = rec.k
    return ChainOutput(
        algorithm=config.algorithm, chain=chain, p=basis.p,
        iterations=rec.iterations[:k].copy(), theta_beta_draws=rec.theta[:k].copy(),
        delta_bits=rec.bits[:k].copy(), variance_draws=rec.var[:k].copy(),
        residual_norm=rec.resid[:k].copy(), pip_counts=rec.pip_counts, beta_sum=rec.beta_sum,
        beta_delta_sum=rec.beta_delta_sum, final_theta_beta=state.theta_beta.copy(),
        final_theta_gamma=state.theta_gamma.copy(), final_delta=state.delta.copy(),
        final_variances=state.variances(), wall_seconds=time.perf_counter() - t0,
        peak_rss_bytes=ch.mem.peak,
    )


def run_multichain(store, basis, config, hyper=None, *, out_dir, tail=1000, resume=False):
    """Run ``config.chains`` chains and a convergence check across them.

    The check uses the residual-norm series of the last ``tail`` retained
    iterations.  Returns ``(outputs, (psrf, upper))``; the PSRF pair is
    ``None`` for a single chain.  With ``resume`` each chain continues from
    its checkpoint under ``out_dir`` when one exists.
    """
    out_dir = Path(out_dir)
    cfg = SamplerConfig(**{**config.to_dict(), "track_residual": True})
    outputs = []
    for c in range(config.chains):
        cdir = out_dir / f"chain_{c}"
        cdir.mkdir(parents=True, exist_ok=True)
        ckpt = cdir / "checkpoint"
        outputs.append(run_chain(
            store, basis, cfg, hyper, chain=c, workdir=cdir / "work",
            diagnostics=cdir / "diagnostics.jsonl",
            checkpoint_dir=ckpt if cfg.checkpoint_every else None,
            resume_from=ckpt if resume and (ckpt / "state.ckpt").exists() else None))
    psrf = None
    if len(outputs) >= 2 and outputs[0].residual_norm.size >= 2:
        series = np.stack([o.residual_norm[-tail:] for o in outputs])
        psrf = gelman_rubin(series)
    return outputs, psrf
