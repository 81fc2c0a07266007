"""Parameter state and full conditionals of the image-on-scalar model.

Notation used throughout: ``H`` exposure terms with coefficient images
``beta_h(s) delta_h(s)``, ``m`` confounder images ``gamma_k(s)``, subject
effects ``eta_i(s)``, all expanded in a region-wise orthonormal basis with
coefficients ``theta``.  In projected space, for region ``r``,

    Y*_ir = sum_h X_ih D_dh theta_h + sum_k theta_gk Z_ik + theta_eta,i + eps*,

with ``D_dh = Q_r^T diag(delta_h) Q_r`` and ``eps* ~ N(0, sigma_y2 I)``.
Priors are ``theta ~ N(0, sigma2 * diag(lam))`` for each block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

from .errors import ConfigError, DivergenceError, MissingIndexError

__all__ = [
    "Hyperparams",
    "ModelState",
    "GaussianConditional",
    "project_outcome",
    "d_delta_apply",
    "d_delta_matrix",
    "delta_theta",
    "beta_data_term",
    "beta_full_conditional",
    "subsample_terms",
    "beta_log_gradient",
    "gamma_full_conditional",
    "delta_residual",
    "delta_full_conditional",
    "sample_delta",
    "eta_full_conditional",
    "sample_inverse_gamma",
    "variance_full_conditionals",
    "quad_prior",
    "impute_outcome",
    "model_mean_block",
    "check_finite_state",
]

JITTER = 1e-10


@dataclass
class Hyperparams:
    """Inverse-gamma ``(shape, scale)`` pairs and the inclusion prior.

    ``sigma_beta2_fixed`` switches sigma_beta^2 from sampled (``None``) to a
    fixed value.  ``shared_delta`` makes all exposure terms use one
    selection image.
    """

    ig_y: tuple = (0.1, 0.1)
    ig_eta: tuple = (0.1, 0.1)
    ig_gamma: tuple = (0.1, 0.1)
    ig_beta: tuple = (0.1, 0.1)
    sigma_beta2_fixed: float | None = None
    prior_incl: float = 0.5
    shared_delta: bool = False

    def __post_init__(self):
        for name in ("ig_y", "ig_eta", "ig_gamma", "ig_beta"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise ConfigError(f"{name} needs positive shape and scale, got {(a, b)}")
            setattr(self, name, (float(a), float(b)))
        if self.sigma_beta2_fixed is not None and not self.sigma_beta2_fixed > 0:
            raise ConfigError("fixed sigma_beta2 must be positive")
        if not 0 < self.prior_incl < 1:
            raise ConfigError("prior inclusion probability must lie in (0, 1)")

    def to_dict(self):
        return {
            "ig_y": list(self.ig_y), "ig_eta": list(self.ig_eta),
            "ig_gamma": list(self.ig_gamma), "ig_beta": list(self.ig_beta),
            "sigma_beta2_fixed": self.sigma_beta2_fixed,
            "prior_incl": self.prior_incl, "shared_delta": self.shared_delta,
        }


@dataclass
class ModelState:
    """All sampled quantities at one iteration.

    ``theta_eta`` may be ``None`` when the subject effects live in files
    managed by the sampler.
    """

    theta_beta: np.ndarray  # (H, L)
    theta_gamma: np.ndarray  # (m, L)
    delta: np.ndarray  # (H, p) bool
    sigma_y2: float = 1.0
    sigma_beta2: float = 1.0
    sigma_gamma2: float = 1.0
    sigma_eta2: float = 1.0
    prior_incl: np.ndarray = None
    theta_eta: np.ndarray = None  # (n, L)

    def __post_init__(self):
        self.theta_beta = np.atleast_2d(np.asarray(self.theta_beta, dtype=float))
        self.theta_gamma = np.asarray(self.theta_gamma, dtype=float).reshape(-1, self.theta_beta.shape[1])
        self.delta = np.atleast_2d(np.asarray(self.delta, dtype=bool))
        if self.prior_incl is None:
            self.prior_incl = np.full(self.delta.shape[1], 0.5)
        for name in ("sigma_y2", "sigma_beta2", "sigma_gamma2", "sigma_eta2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def H(self):
        return self.theta_beta.shape[0]

    @property
    def m(self):
        return self.theta_gamma.shape[0]

    @classmethod
    def initial(cls, basis, H, m, n=None, variance=1.0, prior_incl=0.5, theta_beta=None):
        L, p = basis.L, basis.p
        tb = np.zeros((H, L)) if theta_beta is None else np.array(theta_beta, dtype=float).reshape(H, L)
        return cls(
            theta_beta=tb, theta_gamma=np.zeros((m, L)), delta=np.ones((H, p), dtype=bool),
            sigma_y2=variance, sigma_beta2=variance, sigma_gamma2=variance, sigma_eta2=variance,
            prior_incl=np.full(p, float(prior_incl)),
            theta_eta=None if n is None else np.zeros((n, L)),
        )

    def copy(self):
        return ModelState(
            self.theta_beta.copy(), self.theta_gamma.copy(), self.delta.copy(),
            self.sigma_y2, self.sigma_beta2, self.sigma_gamma2, self.sigma_eta2,
            self.prior_incl.copy(), None if self.theta_eta is None else self.theta_eta.copy(),
        )

    def variances(self):
        return np.array([self.sigma_y2, self.sigma_beta2, self.sigma_gamma2, self.sigma_eta2])


@dataclass
class GaussianConditional:
    """Gaussian with mean ``mean`` and precision ``chol @ chol.T``."""

    mean: np.ndarray
    chol: np.ndarray
    shape: tuple = field(default=None)

    def sample(self, rng):
        z = rng.standard_normal(self.mean.size)
        x = self.mean.ravel() + linalg.solve_triangular(self.chol, z, lower=True, trans="T")
        return x.reshape(self.shape or self.mean.shape)

    def cov(self):
        inv = linalg.cho_solve((self.chol, True), np.eye(self.chol.shape[0]))
        return 0.5 * (inv + inv.T)


def project_outcome(Y, basis):
    """Concatenated ``Q_r^T Y_r`` over regions; works on ``(p,)`` or ``(n, p)``."""
    return basis.project(Y)


def d_delta_apply(Q, delta_r, v):
    """``Q^T diag(delta) Q v`` in O(p_r L_r) without forming the matrix."""
    return Q.T @ (delta_r * (Q @ v))


def d_delta_matrix(Q, delta_r):
    return (Q * delta_r[:, None]).T @ Q


def delta_theta(basis, state):
    """``D_dh theta_h`` for every term and region, shape ``(H, L)``."""
    out = np.empty_like(state.theta_beta)
    for r, vox in enumerate(basis.voxels):
        sl = basis.slices[r]
        Q = basis.Q(r)
        d = state.delta[:, vox].astype(float)
        out[:, sl] = (d * (state.theta_beta[:, sl] @ basis.Qt(r))) @ Q
    return out


def beta_data_term(stats, state, sl=slice(None)):
    """``sum_i X_ih (Y*_i - theta_eta,i - sum_k theta_gk Z_ik)`` as ``(H, L)``."""
    return (stats.proj_x[sl] - stats.eta_x[sl]).T - stats.xz @ state.theta_gamma[:, sl]


def _cholesky(P):
    try:
        return linalg.cholesky(P, lower=True)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cholesky(P + JITTER * np.eye(P.shape[0]), lower=True)
    except linalg.LinAlgError:
        raise DivergenceError("precision matrix is not positive definite even with jitter") from None


def beta_full_conditional(stats, state, basis, r):
    """Joint Gaussian conditional of ``theta_beta`` in region ``r``.

    For ``H`` terms the precision has blocks
    ``I[h=h'] D^-1 / sigma_beta2 + xx[h, h'] D_dh D_dh' / sigma_y2`` and the
    linear term for block ``h`` is ``D_dh b_h / sigma_y2`` where ``b_h`` is
    :func:`beta_data_term`.  Returned mean has shape ``(H, L_r)``.
    """
    sl = basis.slices[r]
    Q = basis.Q(r)
    lam = basis.regions[r].lam
    H, Lr = state.H, lam.size
    vox = basis.voxels[r]
    Dd = [d_delta_matrix(Q, state.delta[h, vox].astype(float)) for h in range(H)]
    b = beta_data_term(stats, state, sl)
    P = np.empty((H * Lr, H * Lr))
    rhs = np.empty(H * Lr)
    for h in range(H):
        hs = slice(h * Lr, (h + 1) * Lr)
        rhs[hs] = Dd[h] @ b[h] / state.sigma_y2
        for g in range(H):
            gs = slice(g * Lr, (g + 1) * Lr)
            P[hs, gs] = stats.xx[h, g] / state.sigma_y2 * (Dd[h] @ Dd[g])
        P[hs, hs] += np.diag(1.0 / (state.sigma_beta2 * lam))
    P = 0.5 * (P + P.T)
    C = _cholesky(P)
    mean = linalg.cho_solve((C, True), rhs)
    return GaussianConditional(mean.reshape(H, Lr), C, (H, Lr))


def subsample_terms(ystar, eta, X, Z, theta_gamma_r):
    """Subsample analogues of the data terms needed by the gradient.

    Parameters are the subsample's ``Y*`` and ``theta_eta`` rows for one
    region (``n_s x L_r``), covariates ``X`` (``n_s x H``), ``Z``
    (``n_s x m``) and ``theta_gamma`` for the region (``m x L_r``).
    Returns ``(b, G)`` with ``b = X^T (Y* - eta - Z theta_gamma)`` and
    ``G = X^T X``.
    """
    resid = ystar - eta - Z @ theta_gamma_r
    return X.T @ resid, X.T @ X


def beta_log_gradient(b, G, state, basis, r, n, n_s):
    """Gradient of the log prior plus ``n / n_s`` times the subsample log likelihood.

    ``b`` and ``G`` come from :func:`subsample_terms` (or the full-data
    :func:`beta_data_term` and ``stats.xx`` with ``n_s = n``).  Each
    ``D_delta`` product is applied as ``Q^T (delta * (Q v))``.
    """
    sl = basis.slices[r]
    Q = basis.Q(r)
    lam = basis.regions[r].lam
    vox = basis.voxels[r]
    theta = state.theta_beta[:, sl]
    H = theta.shape[0]
    d = state.delta[:, vox].astype(float)
    dth = np.stack([d_delta_apply(Q, d[h], theta[h]) for h in range(H)])
    inner = np.asarray(b, dtype=float).reshape(H, -1) - np.asarray(G, dtype=float).reshape(H, H) @ dth
    lik = np.stack([d_delta_apply(Q, d[h], inner[h]) for h in range(H)])
    return -theta / (state.sigma_beta2 * lam) + (n / n_s) * lik / state.sigma_y2


def gamma_full_conditional(stats, state, basis, r, k, dtheta=None):
    """Diagonal Gaussian conditional of ``theta_gamma,k`` in region ``r``.

    ``dtheta`` is :func:`delta_theta` for the current state; it is computed
    when omitted.
    """
    sl = basis.slices[r]
    lam = basis.regions[r].lam
    if dtheta is None:
        dtheta = delta_theta(basis, state)
    var = 1.0 / (1.0 / (state.sigma_gamma2 * lam) + stats.zz[k, k] / state.sigma_y2)
    others = state.theta_gamma[:, sl].T @ stats.zz[:, k] - state.theta_gamma[k, sl] * stats.zz[k, k]
    resid = stats.proj_z[sl, k] - stats.eta_z[sl, k] - others - dtheta[:, sl].T @ stats.xz[:, k]
    return var * resid / state.sigma_y2, var


def delta_residual(stats, state, basis, beta=None, gamma=None):
    """Voxel-level data term ``r_h(s)`` for each exposure, shape ``(H, p)``.

    ``r_h(s) = sum_i X_ih (Y_i(s) - eta_i(s) - sum_k gamma_k(s) Z_ik)``; the
    other exposure terms are handled in :func:`sample_delta`.
    """
    if gamma is None:
        gamma = basis.expand(state.theta_gamma)
    return stats.xy - basis.expand(stats.eta_x.T) - stats.xz @ gamma


def delta_full_conditional(beta, r, x_sumsq, sigma_y2, prior_incl):
    """Inclusion probability ``P(delta(s)=1 | rest)``; vectorised over voxels."""
    beta = np.asarray(beta, dtype=float)
    z = logit(prior_incl) + (2.0 * beta * r - beta * beta * x_sumsq) / (2.0 * sigma_y2)
    return expit(z)


def sample_delta(stats, state, basis, rng, beta=None, resid=None, shared=False):
    """Draw all selection indicators in place and return the probabilities.

    With per-term indicators each term is updated in turn given the others;
    with ``shared=True`` one image multiplies every term.
    """
    if beta is None:
        beta = basis.expand(state.theta_beta)
    if resid is None:
        resid = delta_residual(stats, state, basis)
    H = state.H
    lp = logit(state.prior_incl)
    if shared or H == 1:
        lin = np.einsum("hp,hp->p", beta, resid)
        quad = np.einsum("hp,hg,gp->p", beta, stats.xx, beta)
        prob = expit(lp + (2.0 * lin - quad) / (2.0 * state.sigma_y2))
        draw = rng.random(prob.size) < prob
        state.delta[:] = draw
        return np.broadcast_to(prob, state.delta.shape)
    probs = np.empty_like(beta)
    for h in range(H):
        r = resid[h].copy()
        for g in range(H):
            if g != h:
                r -= stats.xx[h, g] * beta[g] * state.delta[g]
        probs[h] = delta_full_conditional(beta[h], r, stats.xx[h, h], state.sigma_y2, state.prior_incl)
        state.delta[h] = rng.random(probs.shape[1]) < probs[h]
    return probs


def eta_full_conditional(ystar, X, Z, dtheta, theta_gamma, state, lam):
    """Conditional mean and (shared, diagonal) variance of subject effects.

    Rows of ``ystar`` (``n_b x L``) are subjects.  The variance vector has
    length ``L`` and is the same for all subjects.
    """
    var = 1.0 / (1.0 / (state.sigma_eta2 * lam) + 1.0 / state.sigma_y2)
    resid = ystar - X @ dtheta - Z @ theta_gamma
    return resid * (var / state.sigma_y2), var


def sample_inverse_gamma(shape, scale, rng):
    if not (shape > 0 and scale > 0):
        raise ConfigError(f"inverse-gamma needs positive parameters, got {(shape, scale)}")
    return scale / rng.gamma(shape)


def quad_prior(theta, lam):
    """``sum over rows of theta^T diag(lam)^-1 theta``."""
    return float(np.sum(np.asarray(theta) ** 2 / lam))


def variance_full_conditionals(state, hyper, rng, *, rss=None, n_res=None, eta_quad=None,
                               n_eta=None, lam=None, update=("gamma", "beta")):
    """Conjugate inverse-gamma updates, applied in place.

    ``update`` lists which of ``"y"``, ``"eta"``, ``"gamma"``, ``"beta"`` to
    draw, in that fixed order.  ``"y"`` needs the projected residual sum of
    squares ``rss`` over ``n_res`` values and ``"eta"`` the prior quadratic
    form ``eta_quad`` over ``n_eta`` coefficients.
    """
    if "y" in update:
        a, b = hyper.ig_y
        state.sigma_y2 = sample_inverse_gamma(a + 0.5 * n_res, b + 0.5 * rss, rng)
    if "eta" in update:
        a, b = hyper.ig_eta
        state.sigma_eta2 = sample_inverse_gamma(a + 0.5 * n_eta, b + 0.5 * eta_quad, rng)
    if "gamma" in update and state.m > 0:
        a, b = hyper.ig_gamma
        q = quad_prior(state.theta_gamma, lam)
        state.sigma_gamma2 = sample_inverse_gamma(a + 0.5 * state.theta_gamma.size, b + 0.5 * q, rng)
    if "beta" in update:
        if hyper.sigma_beta2_fixed is not None:
            state.sigma_beta2 = hyper.sigma_beta2_fixed
        else:
            a, b = hyper.ig_beta
            q = quad_prior(state.theta_beta, lam)
            state.sigma_beta2 = sample_inverse_gamma(a + 0.5 * state.theta_beta.size, b + 0.5 * q, rng)
    return state


def impute_outcome(state, basis, x_i, z_i, theta_eta_i, j, rng, *, index=None, subject=None):
    """Draw ``Y_i(s_j)`` from the model at a missing voxel.

    The mean is ``sum_h X_ih delta_h(j) beta_h(j) + sum_k gamma_k(j) Z_ik +
    eta_i(j)`` with every image evaluated through row ``j`` of the basis only.
    """
    if index is not None:
        index.locate(subject, j)
    elif subject is not None:
        raise MissingIndexError("subject given without a missing index")
    r = basis.region_of[j]
    sl = basis.slices[r]
    q = basis.Q(r)[basis.row_in_region[j]]
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    z_i = np.atleast_1d(np.asarray(z_i, dtype=float))
    mean = float(np.sum(x_i * state.delta[:, j] * (state.theta_beta[:, sl] @ q)))
    if z_i.size:
        mean += float(z_i @ (state.theta_gamma[:, sl] @ q))
    mean += float(np.asarray(theta_eta_i)[sl] @ q)
    return mean + np.sqrt(state.sigma_y2) * rng.standard_normal()


def model_mean_block(bd_r, gamma_r, eta_r, X, Z):
    """Model mean for a batch on a set of voxels.

    ``bd_r`` is ``(H, c)`` of ``delta * beta``, ``gamma_r`` ``(m, c)`` and
    ``eta_r`` ``(n_b, c)`` the subject effects on the same voxels.
    """
    return X @ bd_r + Z @ gamma_r + eta_r


def check_finite_state(state, iteration=None, bound=1e8, var_range=(1e-12, 1e12)):
    big = max(np.abs(state.theta_beta).max(initial=0.0), np.abs(state.theta_gamma).max(initial=0.0))
    if not np.isfinite(big) or big > bound:
        raise DivergenceError(
            f"coefficients diverged (max |theta| = {big:.3g})", iteration,
            {"max_abs_theta": float(big), "variances": state.variances().tolist()},
        )
    v = state.variances()
    if not np.all(np.isfinite(v)) or v.min() < var_range[0] or v.max() > var_range[1]:
        raise DivergenceError(
            f"variance left [{var_range[0]:g}, {var_range[1]:g}]: {v.tolist()}", iteration,
            {"variances": v.tolist()},
        )
