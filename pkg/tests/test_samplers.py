import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bayes_linreg, dense_q, random_basis
from sbios.datastore import SufficientStats
from sbios.errors import ConfigError, DivergenceError, SchemaError
from sbios.model_core import Hyperparams, ModelState, beta_full_conditional, beta_log_gradient, subsample_terms
from sbios.samplers import (
    ChainOutput,
    SamplerConfig,
    StepSchedule,
    _Chain,
    chain_rng,
    read_checkpoint,
    run_chain,
    run_multichain,
    sgld_step_theta_beta,
    step_size,
)

ALGS = ("gibbs", "sgld_zero", "sgld_impute")


def cfg(alg, **kw):
    base = dict(algorithm=alg, iterations=40, burn_in=20, subsample=10, eta_every=5, seed=3)
    base.update(kw)
    return SamplerConfig(**base)


# ---------------------------------------------------------- step schedule


def test_step_size_point_values():
    assert 7.5e-5 <= step_size(1, 1e-4, 1, 0.35) <= 8.2e-5
    assert step_size(1, 1e-4, 1, 0.35) == pytest.approx(1e-4 * 2**-0.35, rel=1e-14)
    assert 4.9e-6 <= step_size(5000, 1e-4, 1, 0.35) <= 5.3e-6
    assert step_size(5000, 1e-3, 10, 0.55) == pytest.approx(9.2e-6, rel=0.01)
    # the simulation schedule starts near 2.7e-4, not 2e-3
    assert step_size(1, 1e-3, 10, 0.55) == pytest.approx(2.67e-4, rel=0.01)
    with pytest.raises(ConfigError):
        step_size(-1, 1e-3, 10, 0.55)


@settings(max_examples=50, deadline=None)
@given(t=st.integers(0, 10**6), a=st.floats(1e-8, 1.0), b=st.floats(1e-3, 100.0), g=st.floats(0.51, 1.0))
def test_step_size_positive_and_decreasing(t, a, b, g):
    assert 0 < step_size(t + 1, a, b, g) <= step_size(t, a, b, g)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        StepSchedule(a=0.0)
    with pytest.warns(UserWarning):
        StepSchedule(gamma_exp=0.3)


def test_config_validation(tiny):
    with pytest.raises(ConfigError):
        SamplerConfig(algorithm="hmc")
    with pytest.raises(ConfigError):
        SamplerConfig(eta_every=0)
    with pytest.raises(ConfigError):
        SamplerConfig(residual_space="both")
    store, _, basis = tiny
    with pytest.raises(ConfigError):
        run_chain(store, basis, cfg("sgld_zero", subsample=21), workdir="unused")


# --------------------------------------------------------------- SGLD step


def test_sgld_step_trivial_cases():
    theta = np.array([[0.3, -1.2, 2.0]])
    assert np.array_equal(sgld_step_theta_beta(theta, np.ones_like(theta), 0.0, np.random.default_rng(0)), theta)
    tau = 0.04
    eps = np.random.default_rng(5).standard_normal(theta.shape)
    got = sgld_step_theta_beta(theta, np.zeros_like(theta), tau, np.random.default_rng(5))
    assert np.array_equal(got, theta + math.sqrt(tau) * eps)


def test_sgld_long_run_matches_conjugate_mean():
    # one region, L=2, n=200, delta fixed on, eta fixed at zero
    rng = np.random.default_rng(17)
    basis = random_basis(rng, [6], [2])
    n, n_s = 200, 50
    X = rng.standard_normal((n, 1))
    Z = np.zeros((n, 0))
    theta_true = np.array([0.4, -0.7])
    Ys = X * theta_true + rng.standard_normal((n, 2))
    state = ModelState(np.zeros((1, 2)), np.zeros((0, 2)), np.ones((1, 6), dtype=bool))
    want, cov = bayes_linreg(X, Ys[:, 0], np.array([basis.lam[0]]), 1.0)[0], None
    want = np.array([bayes_linreg(X, Ys[:, l], np.array([basis.lam[l]]), 1.0)[0][0] for l in range(2)])
    T, burn, tau = 20000, 2000, 2e-4
    draws = np.empty((T - burn, 2))
    for t in range(T):
        g = np.random.default_rng([17, t])
        idx = g.choice(n, n_s, replace=False)
        b, G = subsample_terms(Ys[idx], np.zeros((n_s, 2)), X[idx], Z[idx], np.zeros((0, 2)))
        grad = beta_log_gradient(b, G, state, basis, 0, n, n_s)
        state.theta_beta = sgld_step_theta_beta(state.theta_beta, grad, tau, g)
        if t >= burn:
            draws[t - burn] = state.theta_beta[0]
    # Monte-Carlo standard error from batch means
    batches = draws.reshape(60, -1, 2).mean(axis=1)
    se = batches.std(axis=0, ddof=1) / math.sqrt(batches.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - want) <= 2 * se + 1e-12), (draws.mean(0), want, se)


def test_gibbs_draws_match_conjugate_posterior():
    rng = np.random.default_rng(23)
    basis = random_basis(rng, [8], [3])
    Qd = dense_q(basis)
    n = 50
    X = rng.standard_normal((n, 1))
    Y = rng.standard_normal((n, 8)) + X * (Qd @ np.array([1.0, -0.5, 0.2]))
    stats = SufficientStats.from_arrays(Y, X, np.zeros((n, 0)), basis)
    state = ModelState(np.zeros((1, 3)), np.zeros((0, 3)), np.ones((1, 8), dtype=bool),
                       sigma_y2=0.8, sigma_beta2=1.5)
    want_mean, want_cov = bayes_linreg(np.kron(X, np.eye(3)), (Y @ Qd).ravel(), 1.5 * basis.lam, 0.8)
    cond = beta_full_conditional(stats, state, basis, 0)
    g = np.random.default_rng(0)
    draws = np.stack([cond.sample(g)[0] for _ in range(10000)])
    se = np.sqrt(np.diag(want_cov) / 10000)
    assert np.all(np.abs(draws.mean(0) - want_mean) <= 3 * se)
    var_se = np.diag(want_cov) * math.sqrt(2 / 9999)
    assert np.all(np.abs(draws.var(0, ddof=1) - np.diag(want_cov)) <= 3 * var_se)


# --------------------------------------------------------------- chains


def test_zero_iterations_returns_initial_state(tiny, tmp_path):
    store, _, basis = tiny
    out = run_chain(store, basis, cfg("sgld_zero", iterations=0, burn_in=0), workdir=tmp_path)
    assert out.n_retained == 0 and np.all(out.pip == 0)
    assert np.all(out.final_delta) and np.array_equal(out.final_variances, np.ones(4))


@pytest.mark.parametrize("alg", ALGS)
def test_chain_is_deterministic(tiny, tmp_path, alg):
    store, _, basis = tiny
    a = run_chain(store, basis, cfg(alg), workdir=tmp_path / "a")
    b = run_chain(store, basis, cfg(alg), workdir=tmp_path / "b")
    assert a.digest() == b.digest()
    c = run_chain(store, basis, cfg(alg, seed=4), workdir=tmp_path / "c")
    assert a.digest() != c.digest()


@pytest.mark.parametrize("alg", ALGS)
def test_resume_reproduces_uninterrupted_run(tiny, tmp_path, alg, monkeypatch):
    store, _, basis = tiny
    full = run_chain(store, basis, cfg(alg), workdir=tmp_path / "full")
    c = cfg(alg, checkpoint_every=15)
    orig = _Chain.iterate

    def crash(self, state, t):
        if t == 33:
            raise KeyboardInterrupt
        return orig(self, state, t)

    monkeypatch.setattr(_Chain, "iterate", crash)
    with pytest.raises(KeyboardInterrupt):
        run_chain(store, basis, c, workdir=tmp_path / "w1", checkpoint_dir=tmp_path / "ck")
    monkeypatch.setattr(_Chain, "iterate", orig)
    header, _ = read_checkpoint(tmp_path / "ck" / "state.ckpt")
    assert header["iteration"] == 30
    resumed = run_chain(store, basis, c, workdir=tmp_path / "w2", resume_from=tmp_path / "ck")
    assert resumed.digest() == full.digest()
    with pytest.raises(SchemaError):
        run_chain(store, basis, cfg(alg, iterations=60), workdir=tmp_path / "w3", resume_from=tmp_path / "ck")


def test_checkpoint_mismatch_rejected(tiny, tmp_path):
    store, _, basis = tiny
    run_chain(store, basis, cfg("sgld_zero", checkpoint_every=10), workdir=tmp_path / "w",
              checkpoint_dir=tmp_path / "ck")
    with pytest.raises(SchemaError):
        run_chain(store, basis, cfg("gibbs"), resume_from=tmp_path / "ck")


def test_retention_and_pip_range(tiny, tmp_path):
    store, _, basis = tiny
    c = cfg("sgld_zero", iterations=70, burn_in=10, max_retained=25)
    out = run_chain(store, basis, c, workdir=tmp_path)
    assert c.thin == 3 and out.n_retained == c.n_retained == 20
    assert np.all(np.diff(out.iterations) == 3) and out.iterations[-1] == 70
    assert np.all((out.pip >= 0) & (out.pip <= 1))
    assert np.array_equal(out.pip[0], out.delta_draws().mean(axis=0))
    out.save(tmp_path / "c.npz")
    back = ChainOutput.load(tmp_path / "c.npz")
    assert back.digest() == out.digest() and back.wall_seconds == out.wall_seconds
    # the archive carries no timing, so a rerun writes the same bytes
    out.wall_seconds += 1.0
    out.save(tmp_path / "d.npz")
    assert (tmp_path / "c.npz").read_bytes() == (tmp_path / "d.npz").read_bytes()


def test_batch_cycling(tiny, tmp_path, monkeypatch):
    store, _, basis = tiny
    seen = []
    orig = _Chain._open

    def spy(self, kind, b, mode="r"):
        if kind == "ystar":
            seen.append(b)
        return orig(self, kind, b, mode)

    monkeypatch.setattr(_Chain, "_open", spy)
    run_chain(store, basis, cfg("sgld_zero", iterations=9, burn_in=0, eta_every=100), workdir=tmp_path)
    assert seen == [0, 1, 2] * 3


def test_eta_cadence(tiny, tmp_path):
    store, _, basis = tiny
    run_chain(store, basis, cfg("sgld_impute", iterations=23, eta_every=4), workdir=tmp_path / "w",
              diagnostics=tmp_path / "d.jsonl")
    recs = [json.loads(line) for line in open(tmp_path / "d.jsonl")]
    assert [r["iteration"] for r in recs] == list(range(1, 24))
    rss = [r["rss"] for r in recs]
    assert all(v is None for v in rss[:3])
    changes = [recs[k]["iteration"] for k in range(1, len(recs)) if rss[k] != rss[k - 1]]
    assert changes == [4, 8, 12, 16, 20]
    assert all(r["peak_rss_bytes"] >= r["rss_bytes"] > 0 for r in recs)
    assert all(r["tau"] == pytest.approx(step_size(r["iteration"], 1e-3, 10, 0.55)) for r in recs)


def _hash_store(store):
    h = hashlib.sha256()
    for f in sorted(store.root.glob("batch_*")):
        h.update(f.read_bytes())
    return h.hexdigest()


def test_zero_mode_never_imputes(tiny, tmp_path):
    store, _, basis = tiny
    before = _hash_store(store)
    run_chain(store, basis, cfg("sgld_zero"), workdir=tmp_path)
    assert not (tmp_path / "yimp.npy").exists()
    assert not list(tmp_path.glob("miss*"))
    run_chain(store, basis, cfg("sgld_impute"), workdir=tmp_path / "imp")
    assert _hash_store(store) == before


def _imputed_outcomes(ch):
    """Dense outcomes with the chain's current imputations filled in."""
    basis, store = ch.basis, ch.store
    yimp = np.load(ch.workdir / "yimp.npy")
    out = []
    for b in range(store.n_batches):
        Y = store.masked_outcomes(b)
        ii, cpos, rptr, cols, cptr = (np.load(ch._file("miss" + k, b)) for k in ("i", "c", "rptr", "cols", "cptr"))
        base = ch.yimp_offsets[b]
        for r in range(basis.n_regions):
            s = slice(rptr[r], rptr[r + 1])
            vox = basis.voxels[r][cols[cptr[r]:cptr[r + 1]][cpos[s]]]
            Y[ii[s], vox] = yimp[base + s.start: base + s.stop]
        out.append(Y)
    return out


def test_incremental_stats_after_imputation_sweeps(tiny, tmp_path):
    store, _, basis = tiny
    ch = _Chain(store, basis, cfg("sgld_impute", eta_every=2), Hyperparams(), 0, tmp_path, None)
    ch.setup()
    state = ch.initial_state()
    for t in range(1, 13):
        ch.iterate(state, t)
    Ys = _imputed_outcomes(ch)
    Yall = np.concatenate(Ys)
    assert np.any(Yall[~np.concatenate([store.mask(b) for b in range(store.n_batches)])] != 0)
    fresh = SufficientStats.from_arrays(Yall, np.concatenate(ch.X), np.concatenate(ch.Z), basis)
    for k in ("xy", "proj_x", "proj_z", "xx", "xz", "zz"):
        a, b = getattr(ch.stats, k), getattr(fresh, k)
        assert np.abs(a - b).max() <= 1e-9 * max(1.0, np.abs(b).max())
    for b, Y in enumerate(Ys):
        assert np.allclose(np.load(ch._file("ystar", b)), basis.project(Y), atol=1e-10)
    assert ch.yy == pytest.approx(float(np.sum(Yall**2)), rel=1e-10)
    assert ch.ysq == pytest.approx(float(np.sum(basis.project(Yall) ** 2)), rel=1e-10)


@pytest.mark.parametrize("alg", ["gibbs", "sgld_zero"])
def test_voxel_residual_sum_of_squares(tiny, tmp_path, alg):
    store, _, basis = tiny
    ch = _Chain(store, basis, cfg(alg), Hyperparams(), 0, tmp_path, None)
    ch.setup()
    state = ch.initial_state()
    for t in range(1, 6):
        ch.iterate(state, t)
    rng = np.random.default_rng(1)
    state.delta = rng.random(state.delta.shape) < 0.5
    state.theta_beta = rng.standard_normal(state.theta_beta.shape)
    Y = np.concatenate([store.masked_outcomes(b) for b in range(store.n_batches)])
    X = np.concatenate(ch.X)
    Z = np.concatenate(ch.Z)
    if alg == "gibbs":
        E = ch.Eta
    else:
        E = np.concatenate([np.load(ch._file("eta", b)) for b in range(store.n_batches)])
    Q = dense_q(basis)
    bd = basis.expand(state.theta_beta) * state.delta
    voxel = Y - X @ bd - Z @ (state.theta_gamma @ Q.T) - E @ Q.T
    dth = np.stack([Q.T @ bd[h] for h in range(state.H)])
    proj = Y @ Q - X @ dth - Z @ state.theta_gamma - E
    total = float(np.sum(proj**2)) + ch.out_of_span_rss(state)
    assert total == pytest.approx(float(np.sum(voxel**2)), rel=1e-10)


def test_identical_streams_give_unit_psrf(tiny, tmp_path):
    store, _, basis = tiny
    c = cfg("sgld_zero", chains=2, shared_stream=True, iterations=60, burn_in=20)
    outs, psrf = run_multichain(store, basis, c, out_dir=tmp_path)
    assert outs[0].digest() == outs[1].digest()
    assert psrf[0] <= 1 + 1e-6
    c = cfg("sgld_zero", chains=2, iterations=60, burn_in=20)
    outs, psrf = run_multichain(store, basis, c, out_dir=tmp_path / "indep")
    assert outs[0].digest() != outs[1].digest() and np.isfinite(psrf[0])


def test_divergence_aborts(tiny, tmp_path):
    store, _, basis = tiny
    with pytest.raises(DivergenceError):
        run_chain(store, basis, cfg("sgld_zero", step=StepSchedule(a=1e18, b=1.0, gamma_exp=0.55)),
                  workdir=tmp_path)


def test_rng_streams_are_distinct():
    a = chain_rng(1, 0, 0, 5).standard_normal(4)
    assert np.array_equal(a, chain_rng(1, 0, 0, 5).standard_normal(4))
    for other in (chain_rng(1, 1, 0, 5), chain_rng(1, 0, 1, 5), chain_rng(1, 0, 0, 6), chain_rng(2, 0, 0, 5)):
        assert not np.array_equal(a, other.standard_normal(4))


def test_gibbs_run_needs_no_workdir(tiny):
    store, _, basis = tiny
    out = run_chain(store, basis, cfg("gibbs", iterations=5, burn_in=0))
    assert out.n_retained == 5
    with pytest.raises(ConfigError):
        run_chain(store, basis, cfg("sgld_zero"))
