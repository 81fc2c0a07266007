"""Posterior summaries, convergence checks, the voxelwise OLS baseline and
selection-accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import ConfigError, DataError

__all__ = [
    "PipAccumulator",
    "PosteriorSummary",
    "MuaResult",
    "compute_pip",
    "compute_rlar",
    "effect_sums",
    "percentage_decline",
    "gelman_rubin",
    "bh_adjust",
    "mua_fit",
    "roc_points",
    "tpr_at_fpr",
    "fdr_tpr_at_pip",
    "confusion",
]


class PipAccumulator:
    """Running count of ``delta = 1`` per voxel.

    Counts are integers, so the PIP equals the batch mean of the draws
    exactly.
    """

    def __init__(self, shape):
        self.counts = np.zeros(shape, dtype=np.int64)
        self.draws = 0

    def add(self, delta):
        self.counts += np.asarray(delta, dtype=bool)
        self.draws += 1

    @property
    def pip(self):
        if self.draws == 0:
            raise ConfigError("no draws accumulated")
        return self.counts / self.draws


def compute_pip(draws=None, *, accumulator=None):
    """PIP from stacked binary draws ``(M, ...)`` or from an accumulator."""
    if accumulator is not None:
        return accumulator.pip
    draws = np.asarray(draws)
    if draws.shape[0] < 1:
        raise ConfigError("PIP needs at least one draw")
    return draws.sum(axis=0) / draws.shape[0]


def compute_rlar(delta_draws, region_labels, level=0.95):
    """Region-level activation rate per draw, with mean and central interval.

    Returns a dict keyed by region label with ``draws``, ``mean``, ``lo``
    and ``hi``.
    """
    D = np.asarray(delta_draws, dtype=float)
    labels = np.asarray(region_labels)
    if D.ndim != 2 or D.shape[1] != labels.size:
        raise DataError("delta draws must be (M, p) with p matching the region map")
    alpha = (1 - level) / 2
    out = {}
    for reg in np.unique(labels):
        sel = labels == reg
        rate = D[:, sel].mean(axis=1)
        lo, hi = np.quantile(rate, [alpha, 1 - alpha])
        out[int(reg)] = {"draws": rate, "mean": float(rate.mean()), "lo": float(lo),
                         "hi": float(hi), "size": int(sel.sum())}
    return out


def effect_sums(beta_mean, pip, region_labels, pip_threshold=0.95):
    """Per region: (negative sum, negative count, positive sum, positive count).

    Voxels with PIP below the threshold count as zero effect.
    """
    if not 0 < pip_threshold < 1:
        raise ConfigError("pip_threshold must lie in (0, 1)")
    beta = np.where(np.asarray(pip) >= pip_threshold, np.asarray(beta_mean, dtype=float), 0.0)
    labels = np.asarray(region_labels)
    out = {}
    for reg in np.unique(labels):
        b = beta[labels == reg]
        neg, pos = b[b < 0], b[b > 0]
        out[int(reg)] = (float(neg.sum()), int(neg.size), float(pos.sum()), int(pos.size))
    return out


def percentage_decline(beta, beta_tilde, gamma1, gamma2, c1, c2, a0_years, a1_years,
                       exposure_mean=0.0, exposure_sd=1.0):
    """Percent change of the fitted signal between two ages.

    ``100 (beta da + beta_tilde da c1) / (beta a0 + beta_tilde a0 c1 +
    gamma1 c1 + gamma2 c2)`` where ``a0`` is the standardized starting age and
    ``da`` the standardized age difference.  Returns ``(percent, defined)``;
    ``percent`` is NaN wherever the denominator vanishes.
    """
    a0 = (a0_years - exposure_mean) / exposure_sd
    da = (a1_years - a0_years) / exposure_sd
    beta, beta_tilde = np.asarray(beta, float), np.asarray(beta_tilde, float)
    num = beta * da + beta_tilde * da * c1
    den = beta * a0 + beta_tilde * a0 * c1 + np.asarray(gamma1, float) * c1 + np.asarray(gamma2, float) * c2
    defined = np.abs(den) > 1e-300
    pct = np.full(np.broadcast(num, den).shape, np.nan)
    np.divide(100.0 * num, den, out=pct, where=defined)
    return pct, defined


def median_decline(pct, defined, pip, pip_threshold=0.95):
    sel = defined & (np.asarray(pip) >= pip_threshold)
    return float(np.median(pct[sel])) if sel.any() else float("nan")


# ----------------------------------------------------------------- PSRF


def gelman_rubin(chains, confidence=0.95):
    """Potential scale reduction factor and its upper confidence limit.

    ``chains`` is ``(n_chains, n_iter)``.  Follows the usual univariate
    construction with the degrees-of-freedom adjustment on the pooled
    variance and an F-quantile upper bound.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ConfigError("gelman_rubin needs at least two chains of length >= 2")
    m, n = x.shape
    s2 = x.var(axis=1, ddof=1)
    xbar = x.mean(axis=1)
    w = s2.mean()
    b = n * xbar.var(ddof=1)
    if w == 0:
        if b == 0:
            r = np.sqrt((n - 1) / n)
            return float(r), float(r)
        return float("inf"), float("inf")
    muhat = xbar.mean()
    var_w = s2.var(ddof=1) / m
    var_b = 2 * b * b / (m - 1)
    cov_s2_x2 = np.cov(s2, xbar ** 2, ddof=1)[0, 1]
    cov_s2_x = np.cov(s2, xbar, ddof=1)[0, 1]
    cov_wb = (n / m) * (cov_s2_x2 - 2 * muhat * cov_s2_x)
    V = (n - 1) * w / n + (1 + 1 / m) * b / n
    var_V = ((n - 1) ** 2 * var_w + (1 + 1 / m) ** 2 * var_b + 2 * (n - 1) * (1 + 1 / m) * cov_wb) / n ** 2
    df_adj = 1.0 if var_V <= 0 else ((2 * V * V / var_V) + 3) / ((2 * V * V / var_V) + 1)
    r_fixed = (n - 1) / n
    r_random = (1 + 1 / m) * (1 / n) * (b / w)
    w_df = np.inf if var_w == 0 else 2 * w * w / var_w
    q = (sps.chi2.ppf((1 + confidence) / 2, m - 1) / (m - 1) if not np.isfinite(w_df)
         else sps.f.ppf((1 + confidence) / 2, m - 1, w_df))
    point = np.sqrt(df_adj * (r_fixed + r_random))
    upper = np.sqrt(df_adj * (r_fixed + q * r_random))
    return float(point), float(upper)


# ------------------------------------------------------------------ MUA


def bh_adjust(p):
    """Benjamini-Hochberg step-up adjusted p-values (NaNs pass through)."""
    p = np.asarray(p, dtype=float)
    out = np.full(p.shape, np.nan)
    ok = ~np.isnan(p)
    q = p[ok]
    k = q.size
    if k == 0:
        return out
    order = np.argsort(q, kind="mergesort")
    scaled = q[order] * k / np.arange(1, k + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    res = np.empty(k)
    res[order] = np.minimum(adj, 1.0)
    out[ok] = res
    return out


@dataclass
class MuaResult:
    coef: np.ndarray
    t: np.ndarray
    p: np.ndarray
    p_adj: np.ndarray
    degenerate: np.ndarray
    df: int


def mua_fit(store, group_mask=None, exposure=0):
    """Voxelwise OLS of outcome on ``[1, X, Z]`` with missing entries set to 0.

    Cross products are accumulated batch by batch, so memory stays at one
    batch.  Voxels with no variation are flagged ``degenerate`` and get NaN
    p-values; BH runs over the remaining voxels inside ``group_mask``.
    """
    p = store.p
    q = 1 + store.n_exposures + store.m
    WtW = np.zeros((q, q))
    WtY = np.zeros((q, p))
    yy = np.zeros(p)
    for b in range(store.n_batches):
        Y = store.masked_outcomes(b)
        C = store.covariates(b)
        W = np.column_stack([np.ones(C.shape[0]), C])
        WtW += W.T @ W
        WtY += W.T @ Y
        yy += np.einsum("ij,ij->j", Y, Y)
    return mua_from_crossprod(WtW, WtY, yy, store.n, group_mask, exposure)


def mua_from_crossprod(WtW, WtY, yy, n, group_mask=None, exposure=0):
    q = WtW.shape[0]
    df = n - q
    if df < 1 or np.linalg.matrix_rank(WtW) < q:
        raise DataError("MUA design [1, X, Z] is rank deficient")
    inv = np.linalg.inv(WtW)
    coef = inv @ WtY
    rss = np.maximum(yy - np.einsum("qp,qp->p", coef, WtY), 0.0)
    tss = yy - WtY[0] ** 2 / WtW[0, 0]
    degenerate = tss <= 1e-12 * np.maximum(yy, 1e-300)
    sigma2 = rss / df
    col = 1 + exposure
    se = np.sqrt(sigma2 * inv[col, col])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef[col] / se, np.sign(coef[col]) * np.inf)
    t[degenerate] = np.nan
    pval = 2 * sps.t.sf(np.abs(t), df)
    pval[degenerate] = np.nan
    sel = np.ones_like(degenerate) if group_mask is None else np.asarray(group_mask, bool)
    padj = np.full(pval.shape, np.nan)
    padj[sel] = bh_adjust(pval[sel])
    return MuaResult(coef[col], t, pval, padj, degenerate, df)


# ------------------------------------------------------- selection metrics


def _check_truth(truth):
    truth = np.asarray(truth, dtype=bool)
    if truth.all() or not truth.any():
        raise ConfigError("truth needs at least one positive and one negative voxel")
    return truth


def roc_points(scores, truth, thresholds=20, rule="fixed"):
    """(FPR, TPR) at each threshold, selecting voxels with ``score >= t``.

    ``rule="fixed"`` uses ``thresholds`` evenly spaced points in [0, 1];
    ``rule="quantile"`` uses the empirical quantiles of ``scores`` at those
    probabilities (the lower order statistic), which makes the result depend
    on ranks only.
    """
    truth = _check_truth(truth)
    s = np.asarray(scores, dtype=float)
    grid = np.linspace(0.0, 1.0, thresholds)
    if rule == "fixed":
        ts = grid
    elif rule == "quantile":
        ts = np.quantile(s, grid, method="lower")
    else:
        raise ConfigError(f"unknown threshold rule {rule!r}")
    pos, neg = truth.sum(), (~truth).sum()
    sel = s[None, :] >= ts[:, None]
    tpr = (sel & truth).sum(axis=1) / pos
    fpr = (sel & ~truth).sum(axis=1) / neg
    return fpr, tpr


def tpr_at_fpr(scores, truth, target_fpr=0.1, thresholds=20, rule="fixed"):
    """TPR read off the piecewise-linear ROC through the threshold points.

    The curve is anchored at (0, 0).  Where several points share an FPR the
    curve jumps, so the left end of a segment takes the largest TPR at its FPR
    and the right end the smallest.  Targets outside the observed FPR range
    are clamped to the nearest end.
    """
    fpr, tpr = roc_points(scores, truth, thresholds, rule)
    fpr = np.concatenate([[0.0], fpr])
    tpr = np.concatenate([[0.0], tpr])
    if target_fpr >= fpr.max():
        return float(tpr[fpr == fpr.max()].max())
    exact = np.isclose(fpr, target_fpr, rtol=0, atol=1e-15)
    if exact.any():
        return float(tpr[exact].max())
    f_l = fpr[fpr < target_fpr].max()
    f_r = fpr[fpr > target_fpr].min()
    t_l = tpr[fpr == f_l].max()
    t_r = tpr[fpr == f_r].min()
    return float(t_l + (t_r - t_l) * (target_fpr - f_l) / (f_r - f_l))


def confusion(selected, truth):
    selected = np.asarray(selected, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int((selected & truth).sum())
    fp = int((selected & ~truth).sum())
    fn = int((~selected & truth).sum())
    tn = int((~selected & ~truth).sum())
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn,
            "fdr": fp / max(1, tp + fp), "tpr": tp / max(1, tp + fn)}


def fdr_tpr_at_pip(pip, truth, cutoff=0.95):
    """FDR and TPR of the selection ``PIP >= cutoff``."""
    truth = np.asarray(truth, dtype=bool)
    if not truth.any():
        raise ConfigError("truth has no positive voxels")
    c = confusion(np.asarray(pip) >= cutoff, truth)
    return c["fdr"], c["tpr"]


@dataclass
class PosteriorSummary:
    pip: np.ndarray
    beta_mean: np.ndarray
    beta_delta_mean: np.ndarray
    rlar: dict

    @classmethod
    def from_chains(cls, outputs, region_labels, term=0):
        """Pool retained draws of several chains (equal weights per draw)."""
        counts = sum(o.pip_counts[term] for o in outputs)
        draws = sum(o.n_retained for o in outputs)
        if draws == 0:
            raise ConfigError("chains retained no draws")
        beta = sum(o.beta_sum[term] for o in outputs) / draws
        bd = sum(o.beta_delta_sum[term] for o in outputs) / draws
        D = np.concatenate([o.delta_draws(term) for o in outputs], axis=0)
        return cls(counts / draws, beta, bd, compute_rlar(D, region_labels))
