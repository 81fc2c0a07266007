import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbios.datastore import (
    BatchStore,
    MissingIndex,
    ObservedProportion,
    SufficientStats,
    apply_imputation,
    apply_imputation_block,
    compute_stats,
    ingest,
    observed_proportion,
    read_mask,
    restrict,
    standardize,
)
from sbios.errors import DataError, MissingIndexError, SchemaError
from sbios.kernel_basis import MaternParams, TruncationConfig, VoxelGrid, build_basis


def subjects(Y, M, C):
    for y, m, c in zip(Y, M, C):
        yield y, m, c


def random_data(rng, n, p, width=3, missing=0.2):
    Y = rng.standard_normal((n, p))
    M = rng.random((n, p)) >= missing
    C = rng.standard_normal((n, width))
    return Y, M, C


def small_basis(p_side=4, blocks=(2, 1)):
    grid = VoxelGrid.lattice((p_side, 3), blocks)
    return grid, build_basis(grid, MaternParams(2.0, 0.5), TruncationConfig(mode="count", fraction=0.5))


def test_batch_sizes(tmp_path):
    rng = np.random.default_rng(0)
    store = ingest(subjects(*random_data(rng, 10, 5)), 4, tmp_path)
    assert store.batch_sizes == [4, 4, 2]
    assert store.n == 10 and store.p == 5 and store.m == 2
    assert BatchStore.open(tmp_path).manifest == store.manifest


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 12), p=st.integers(1, 17),
       bs=st.integers(1, 5))
def test_round_trip_bit_exact(tmp_path_factory, seed, n, p, bs):
    rng = np.random.default_rng(seed)
    Y, M, C = random_data(rng, n, p)
    Y[0, 0] = -0.0
    store = ingest(subjects(Y, M, C), bs, tmp_path_factory.mktemp("rt"))
    back_Y = np.concatenate([np.array(store.outcomes(b)) for b in range(store.n_batches)])
    back_M = np.concatenate([store.mask(b) for b in range(store.n_batches)])
    back_C = np.concatenate([store.covariates(b) for b in range(store.n_batches)])
    assert back_Y.tobytes() == Y.tobytes()
    assert np.array_equal(back_M, M)
    assert back_C.tobytes() == C.tobytes()


def test_outcome_file_layout(tmp_path):
    Y = np.arange(6.0).reshape(2, 3)  # 2 subjects, 3 voxels
    store = ingest(subjects(Y, np.ones((2, 3)), np.zeros((2, 1))), 5, tmp_path)
    raw = (tmp_path / store.manifest["batches"][0]["outcomes"]).read_bytes()
    tag, version, p, n_b = struct.unpack_from("<4sIQQ", raw)
    assert (tag, version, p, n_b) == (b"SBIO", 1, 3, 2)
    # column-major p x n_b: subject 0's voxels come first
    assert np.frombuffer(raw, "<f8", offset=24).tolist() == [0, 1, 2, 3, 4, 5]
    mk = (tmp_path / store.manifest["batches"][0]["masks"]).read_bytes()
    assert mk[:4] == b"SBMK" and mk[24] == 0b111111
    cv = (tmp_path / store.manifest["batches"][0]["covariates"]).read_bytes()
    assert cv[:4] == b"SBCV" and struct.unpack_from("<QQ", cv, 4) == (2, 1)


def test_mask_bits_lsb_first(tmp_path):
    M = np.zeros((1, 9), dtype=bool)
    M[0, [0, 3, 8]] = True
    ingest(subjects(np.zeros((1, 9)), M, np.zeros((1, 1))), 1, tmp_path)
    raw = (tmp_path / "batch_0000.sbmk").read_bytes()[24:]
    assert list(raw) == [0b00001001, 0b00000001]
    assert np.array_equal(read_mask(tmp_path / "batch_0000.sbmk"), M)


def test_ingest_schema_errors(tmp_path):
    with pytest.raises(SchemaError):
        ingest(iter([(np.zeros(3), np.ones(3), [1.0]), (np.zeros(4), np.ones(4), [1.0])]), 5, tmp_path / "a")
    with pytest.raises(SchemaError):
        ingest(iter([(np.zeros(3), np.ones(3), [1.0]), (np.zeros(3), np.ones(3), [1.0, 2.0])]), 5, tmp_path / "b")
    with pytest.raises(SchemaError):
        ingest(iter([(np.zeros(3), np.array([0, 2, 1]), [1.0])]), 5, tmp_path / "c")


def test_corrupt_files_rejected(tmp_path):
    rng = np.random.default_rng(1)
    store = ingest(subjects(*random_data(rng, 3, 4)), 3, tmp_path)
    path = tmp_path / store.manifest["batches"][0]["outcomes"]
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(SchemaError):
        store.outcomes(0)
    with pytest.raises(DataError):
        BatchStore.open(tmp_path / "nowhere")


def test_all_missing_subject(tmp_path):
    M = np.ones((3, 5), dtype=bool)
    M[1] = False
    store = ingest(subjects(np.ones((3, 5)), M, np.zeros((3, 2))), 2, tmp_path)
    masks = np.concatenate([store.mask(b) for b in range(store.n_batches)])
    idx = MissingIndex.from_masks(masks)
    assert len(idx) == 5
    assert idx.subject(1)[0].tolist() == [0, 1, 2, 3, 4]
    assert idx.subject(0)[0].size == 0


def test_standardize_two_subjects(tmp_path):
    Y = np.array([[1.0, 5.0], [3.0, 5.0]])
    store = ingest(subjects(Y, np.ones((2, 2)), np.array([[1.0], [2.0]])), 2, tmp_path / "raw")
    out, info = standardize(store, tmp_path / "std")
    Z = np.array(out.outcomes(0))
    assert Z[:, 0] == pytest.approx([-1 / np.sqrt(2), 1 / np.sqrt(2)], abs=1e-12)
    assert info.zero_variance.tolist() == [False, True]
    assert np.all(Z[:, 1] == 0)


def test_standardize_moments_and_idempotence(tmp_path):
    rng = np.random.default_rng(2)
    Y, M, C = random_data(rng, 40, 6, missing=0.3)
    Y = 3.0 + 2.0 * Y
    store = ingest(subjects(Y, M, C), 15, tmp_path / "raw")
    once, info = standardize(store, tmp_path / "s1")
    Z = np.concatenate([np.array(once.outcomes(b)) for b in range(once.n_batches)])
    for j in range(6):
        obs = Z[M[:, j], j]
        assert obs.mean() == pytest.approx(0, abs=1e-8)
        assert obs.std(ddof=1) == pytest.approx(1, abs=1e-8)
    assert np.all(Z[~M] == 0)
    X = np.concatenate([once.X(b)[:, 0] for b in range(once.n_batches)])
    assert X.mean() == pytest.approx(0, abs=1e-12) and X.std(ddof=1) == pytest.approx(1)
    assert info.to_standard_exposure(C[:, 0]) == pytest.approx(X)
    twice, _ = standardize(once, tmp_path / "s2")
    Z2 = np.concatenate([np.array(twice.outcomes(b)) for b in range(twice.n_batches)])
    assert np.abs(Z2 - Z).max() <= 1e-8


def test_observed_proportion_counts(tmp_path):
    M = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
    store = ingest(subjects(np.zeros((2, 3)), M, np.zeros((2, 1))), 1, tmp_path)
    op = observed_proportion(store)
    assert op.h.tolist() == [1.0, 0.5, 0.0]
    assert op.group_mask.tolist() == [True, True, False]
    assert np.array_equal(op.h * op.n, op.counts)
    op.save(tmp_path / "c.npy")
    assert np.array_equal(ObservedProportion.load(tmp_path / "c.npy", 2).h, op.h)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), threshold=st.floats(0.0, 1.0))
def test_observed_proportion_matches_direct_count(tmp_path_factory, seed, threshold):
    rng = np.random.default_rng(seed)
    Y, M, C = random_data(rng, 13, 7, missing=0.4)
    store = ingest(subjects(Y, M, C), 4, tmp_path_factory.mktemp("op"))
    op = observed_proportion(store, threshold)
    assert np.array_equal(op.counts, M.sum(axis=0))
    assert np.array_equal(op.group_mask, M.mean(axis=0) >= threshold)


def test_restrict_keeps_columns(tmp_path):
    rng = np.random.default_rng(3)
    grid = VoxelGrid.lattice((2, 3), (1, 3))
    Y, M, C = random_data(rng, 5, 6)
    store = ingest(subjects(Y, M, C), 2, tmp_path / "a", region_map=grid)
    keep = np.array([1, 0, 1, 1, 0, 1], dtype=bool)  # drops region 2
    sub = restrict(store, keep, tmp_path / "b")
    got = np.concatenate([np.array(sub.outcomes(b)) for b in range(sub.n_batches)])
    assert np.array_equal(got, Y[:, keep])
    assert sub.region_map().region_labels.tolist() == [1, 2, 1, 2]


def dense_stats(Y, X, Z, basis):
    Qd = np.zeros((basis.p, basis.L))
    for r, vox in enumerate(basis.voxels):
        Qd[np.ix_(vox, np.arange(basis.L)[basis.slices[r]])] = basis.Q(r)
    Ys = Y @ Qd
    return dict(xy=X.T @ Y, proj_x=Ys.T @ X, proj_z=Ys.T @ Z, xx=X.T @ X, xz=X.T @ Z, zz=Z.T @ Z)


def test_stats_trivial_cases():
    _, basis = small_basis()
    p = basis.p
    e = np.zeros((1, p))
    e[0, 4] = 1.0
    st_ = SufficientStats.from_arrays(e, [[1.0]], [[0.5, 0.2]], basis)
    assert np.array_equal(st_.xy[0], e[0])
    st0 = SufficientStats.from_arrays(np.ones((3, p)), np.zeros((3, 1)), np.ones((3, 2)), basis)
    assert np.all(st0.xy == 0) and st0.x_sumsq.tolist() == [0.0]


def test_compute_stats_matches_dense(tmp_path):
    rng = np.random.default_rng(4)
    grid, basis = small_basis()
    n, p = 20, grid.p
    Y, M, C = random_data(rng, n, p)
    store = ingest(subjects(Y, M, C), 6, tmp_path, region_map=grid)
    idx = MissingIndex.from_masks(M)
    idx.values = rng.standard_normal(len(idx))
    got = compute_stats(store, basis, idx)
    Yi = np.where(M, Y, 0.0) + idx.dense(p)
    want = dense_stats(Yi, C[:, :1], C[:, 1:], basis)
    for k, v in want.items():
        assert np.allclose(getattr(got, k), v, rtol=1e-10, atol=1e-12)
    zero = compute_stats(store, basis)
    assert np.allclose(zero.xy, dense_stats(np.where(M, Y, 0.0), C[:, :1], C[:, 1:], basis)["xy"])


def test_apply_imputation_noop_is_bitwise():
    rng = np.random.default_rng(5)
    _, basis = small_basis()
    st0 = SufficientStats.from_arrays(rng.standard_normal((5, basis.p)), rng.standard_normal((5, 1)),
                                      rng.standard_normal((5, 2)), basis)
    before = st0.copy()
    apply_imputation(st0, basis, [0.3], [0.1, 0.2], 3, 1.25, 1.25)
    for k in SufficientStats.FIELDS:
        assert getattr(st0, k).tobytes() == getattr(before, k).tobytes()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), steps=st.integers(1, 100))
def test_incremental_matches_recompute(seed, steps):
    rng = np.random.default_rng(seed)
    _, basis = small_basis()
    n, p = 5, basis.p
    Y = rng.standard_normal((n, p))
    M = rng.random((n, p)) < 0.6
    M[0, 0] = False
    X, Z = rng.standard_normal((n, 1)), rng.standard_normal((n, 2))
    idx = MissingIndex.from_masks(M)
    Y[~M] = 0.0
    stats = SufficientStats.from_arrays(Y, X, Z, basis)
    rows = np.repeat(np.arange(n), np.diff(idx.offsets))
    for _ in range(steps):
        k = rng.integers(len(idx))
        i, j = rows[k], idx.indices[k]
        new = rng.standard_normal()
        apply_imputation(stats, basis, X[i], Z[i], j, Y[i, j], new, index=idx, subject=i)
        Y[i, j] = new
    assert stats.max_rel_diff(SufficientStats.from_arrays(Y, X, Z, basis)) <= 1e-9


def test_apply_imputation_rejects_observed_entry():
    _, basis = small_basis()
    M = np.ones((2, basis.p), dtype=bool)
    M[1, 2] = False
    idx = MissingIndex.from_masks(M)
    stats = SufficientStats.from_arrays(np.zeros((2, basis.p)), np.ones((2, 1)), np.ones((2, 1)), basis)
    with pytest.raises(MissingIndexError):
        apply_imputation(stats, basis, [1.0], [1.0], 2, 0.0, 1.0, index=idx, subject=0)
    apply_imputation(stats, basis, [1.0], [1.0], 2, 0.0, 1.0, index=idx, subject=1)


def test_block_update_matches_recompute():
    rng = np.random.default_rng(6)
    _, basis = small_basis()
    n, p = 7, basis.p
    Y = rng.standard_normal((n, p))
    X, Z = rng.standard_normal((n, 1)), rng.standard_normal((n, 2))
    stats = SufficientStats.from_arrays(Y, X, Z, basis)
    cols = np.array([0, 2, 3])
    delta = rng.standard_normal((n, cols.size))
    apply_imputation_block(stats, basis, 1, cols, X, Z, delta)
    Y[:, basis.voxels[1][cols]] += delta
    assert stats.max_rel_diff(SufficientStats.from_arrays(Y, X, Z, basis)) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_missing_index_invariants(seed):
    rng = np.random.default_rng(seed)
    M = rng.random((6, 11)) < 0.5
    idx = MissingIndex.from_masks(M)
    assert len(idx) == (~M).sum() == idx.values.size
    assert np.all(np.diff(idx.offsets) >= 0)
    for i in range(6):
        sub = idx.subject(i)[0]
        assert np.all(np.diff(sub) > 0)
        assert set(sub.tolist()) == set(np.flatnonzero(~M[i]).tolist())
