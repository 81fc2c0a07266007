"""Batched on-disk storage of outcome images, masks and covariates.

A store is a directory with a JSON manifest and, per batch, three binary
files (outcomes, masks, covariates).  Outcomes are read through
``numpy.memmap`` so that only one batch needs to be resident at a time.

Binary layouts (all little-endian):

* outcomes ``SBIO``: u32 version, u64 p, u64 n_b, then float64 values with
  one subject per column of a ``p x n_b`` column-major matrix.
* masks ``SBMK``: same header, then the ``p x n_b`` 0/1 matrix bit-packed in
  column-major order, least significant bit first.
* covariates ``SBCV``: u64 n_b, u64 width, then float64 row-major.  Columns
  are the exposures followed by the confounders.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, MissingIndexError, SchemaError
from .kernel_basis import VoxelGrid

__all__ = [
    "BatchStore",
    "MissingIndex",
    "ObservedProportion",
    "Standardization",
    "SufficientStats",
    "apply_imputation",
    "apply_imputation_block",
    "compute_stats",
    "ingest",
    "observed_proportion",
    "read_region_map",
    "restrict",
    "standardize",
    "write_region_map",
]

MANIFEST_SCHEMA = 1
_IO_HEADER = struct.Struct("<4sIQQ")
_CV_HEADER = struct.Struct("<4sQQ")
OUTCOME_OFFSET = _IO_HEADER.size


# ---------------------------------------------------------------- raw formats


def _write_exact(fh, buf):
    n = fh.write(buf)
    if n != len(buf):
        raise OSError(f"short write: {n} of {len(buf)} bytes")


def write_outcomes(path, Y):
    """Write ``Y`` of shape ``(n_b, p)``; row ``i`` is subject ``i``."""
    Y = np.ascontiguousarray(Y, dtype="<f8")
    with open(path, "wb") as fh:
        _write_exact(fh, _IO_HEADER.pack(b"SBIO", 1, Y.shape[1], Y.shape[0]))
        _write_exact(fh, Y.tobytes())


def _read_header(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read(_IO_HEADER.size)
    if len(raw) < _IO_HEADER.size:
        raise SchemaError(f"{path}: file too short")
    tag, version, p, n_b = _IO_HEADER.unpack(raw)
    if tag != magic:
        raise SchemaError(f"{path}: bad magic {tag!r}")
    if version != 1:
        raise SchemaError(f"{path}: unsupported version {version}")
    return p, n_b


def open_outcomes(path, mode="r"):
    """Memory-map an outcome file as an ``(n_b, p)`` array."""
    p, n_b = _read_header(path, b"SBIO")
    expected = OUTCOME_OFFSET + 8 * p * n_b
    if os.path.getsize(path) != expected:
        raise SchemaError(f"{path}: size does not match header")
    if n_b == 0 or p == 0:
        return np.zeros((n_b, p))
    return np.memmap(path, dtype="<f8", mode=mode, offset=OUTCOME_OFFSET, shape=(n_b, p))


def write_mask(path, M):
    M = np.ascontiguousarray(M, dtype=bool)
    with open(path, "wb") as fh:
        _write_exact(fh, _IO_HEADER.pack(b"SBMK", 1, M.shape[1], M.shape[0]))
        _write_exact(fh, np.packbits(M.ravel(), bitorder="little").tobytes())


def read_mask(path):
    p, n_b = _read_header(path, b"SBMK")
    raw = Path(path).read_bytes()[_IO_HEADER.size:]
    if len(raw) != (p * n_b + 7) // 8:
        raise SchemaError(f"{path}: size does not match header")
    bits = np.unpackbits(np.frombuffer(raw, np.uint8), count=p * n_b, bitorder="little")
    return bits.astype(bool).reshape(n_b, p)


def write_covariates(path, C):
    C = np.ascontiguousarray(C, dtype="<f8")
    with open(path, "wb") as fh:
        _write_exact(fh, _CV_HEADER.pack(b"SBCV", C.shape[0], C.shape[1]))
        _write_exact(fh, C.tobytes())


def read_covariates(path):
    raw = Path(path).read_bytes()
    if len(raw) < _CV_HEADER.size:
        raise SchemaError(f"{path}: file too short")
    tag, n_b, width = _CV_HEADER.unpack_from(raw)
    if tag != b"SBCV":
        raise SchemaError(f"{path}: bad magic {tag!r}")
    if len(raw) != _CV_HEADER.size + 8 * n_b * width:
        raise SchemaError(f"{path}: size does not match header")
    return np.frombuffer(raw, "<f8", offset=_CV_HEADER.size).reshape(n_b, width).astype(np.float64)


def write_region_map(path, grid):
    coords = np.zeros((grid.p, 3), dtype=grid.coords.dtype)
    coords[:, : grid.coords.shape[1]] = grid.coords
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["voxel_id", "x", "y", "z", "region"])
        for j in range(grid.p):
            w.writerow([j, *coords[j].tolist(), int(grid.region_labels[j])])


def read_region_map(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty region map")
    try:
        vid = np.array([int(r["voxel_id"]) for r in rows])
        xyz = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
        reg = np.array([int(r["region"]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed region map ({exc})") from None
    if not np.array_equal(np.sort(vid), np.arange(len(rows))):
        raise SchemaError(f"{path}: voxel ids must be 0..p-1")
    order = np.argsort(vid)
    xyz, reg = xyz[order], reg[order]
    if np.all(xyz[:, 2] == 0):
        xyz = xyz[:, :2]
    if np.all(xyz == np.round(xyz)):
        xyz = xyz.astype(np.int64)
    return VoxelGrid(xyz, reg)


# ---------------------------------------------------------------- the store


@dataclass
class BatchStore:
    """Handle on an ingested dataset.

    Nothing but the manifest is held in memory; batch contents are opened on
    demand.  ``X(b)`` and ``Z(b)`` split the covariate block into the
    ``n_exposures`` exposure columns and the ``m`` confounders.
    """

    root: Path
    manifest: dict

    @classmethod
    def open(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            manifest = json.loads(path.read_text())
        except FileNotFoundError:
            raise DataError(f"no manifest at {path}") from None
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None
        for key in ("n", "p", "m", "batches"):
            if key not in manifest:
                raise SchemaError(f"{path}: manifest lacks {key!r}")
        manifest.setdefault("n_exposures", 1)
        store = cls(path.parent, manifest)
        if sum(b["n_b"] for b in manifest["batches"]) != manifest["n"]:
            raise SchemaError(f"{path}: batch sizes do not add up to n")
        return store

    @property
    def n(self):
        return int(self.manifest["n"])

    @property
    def p(self):
        return int(self.manifest["p"])

    @property
    def m(self):
        return int(self.manifest["m"])

    @property
    def n_exposures(self):
        return int(self.manifest["n_exposures"])

    @property
    def n_batches(self):
        return len(self.manifest["batches"])

    @property
    def batch_sizes(self):
        return [int(b["n_b"]) for b in self.manifest["batches"]]

    @property
    def batch_offsets(self):
        return np.concatenate([[0], np.cumsum(self.batch_sizes)]).astype(np.int64)

    def _path(self, b, kind):
        return self.root / self.manifest["batches"][b][kind]

    def outcomes(self, b, mode="r"):
        Y = open_outcomes(self._path(b, "outcomes"), mode)
        if Y.shape != (self.batch_sizes[b], self.p):
            raise SchemaError(f"batch {b}: outcome shape {Y.shape} disagrees with manifest")
        return Y

    def mask(self, b):
        M = read_mask(self._path(b, "masks"))
        if M.shape != (self.batch_sizes[b], self.p):
            raise SchemaError(f"batch {b}: mask shape disagrees with manifest")
        return M

    def covariates(self, b):
        C = read_covariates(self._path(b, "covariates"))
        if C.shape != (self.batch_sizes[b], self.n_exposures + self.m):
            raise SchemaError(f"batch {b}: covariate shape disagrees with manifest")
        return C

    def X(self, b):
        return self.covariates(b)[:, : self.n_exposures]

    def Z(self, b):
        return self.covariates(b)[:, self.n_exposures:]

    def all_covariates(self):
        return np.concatenate([self.covariates(b) for b in range(self.n_batches)], axis=0)

    def region_map(self):
        ref = self.manifest.get("region_map")
        if ref is None:
            return None
        return read_region_map(self.root / ref)

    def masked_outcomes(self, b):
        """Outcomes of batch ``b`` with unobserved entries set to zero."""
        Y = np.array(self.outcomes(b))
        Y[~self.mask(b)] = 0.0
        return Y


def _save_manifest(root, manifest):
    (Path(root) / "manifest.json").write_text(json.dumps(manifest, indent=2))


def ingest(subjects, batch_size, out_dir, *, n_exposures=1, region_map=None, extra=None):
    """Write a stream of ``(outcome, mask, covariates)`` triples to disk.

    Parameters
    ----------
    subjects : iterable
        Yields per-subject ``(y, mask, c)`` with ``y`` and ``mask`` of length
        ``p`` and ``c`` of length ``n_exposures + m``.
    batch_size : int
        Subjects per batch; the last batch may be smaller.
    region_map : VoxelGrid, optional
        Written next to the manifest as a CSV.
    """
    if batch_size < 1:
        raise SchemaError("batch_size must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = width = None
    batches, ys, ms, cs = [], [], [], []

    def flush():
        b = len(batches)
        names = {
            "outcomes": f"batch_{b:04d}.sbio",
            "masks": f"batch_{b:04d}.sbmk",
            "covariates": f"batch_{b:04d}.sbcv",
        }
        write_outcomes(out_dir / names["outcomes"], np.stack(ys))
        write_mask(out_dir / names["masks"], np.stack(ms))
        write_covariates(out_dir / names["covariates"], np.stack(cs))
        batches.append({**names, "n_b": len(ys)})
        ys.clear(), ms.clear(), cs.clear()

    for y, mk, c in subjects:
        y = np.asarray(y, dtype=np.float64).ravel()
        mk = np.asarray(mk).ravel()
        c = np.atleast_1d(np.asarray(c, dtype=np.float64)).ravel()
        if p is None:
            p, width = y.size, c.size
            if width < n_exposures:
                raise SchemaError("covariate row narrower than the exposure count")
        if y.size != p or mk.size != p:
            raise SchemaError(f"subject outcome/mask length {y.size}/{mk.size} != {p}")
        if c.size != width:
            raise SchemaError(f"covariate width {c.size} != {width}")
        if not np.all((mk == 0) | (mk == 1)):
            raise SchemaError("mask entries must be 0 or 1")
        ys.append(y), ms.append(mk.astype(bool)), cs.append(c)
        if len(ys) == batch_size:
            flush()
    if ys:
        flush()
    if p is None:
        raise SchemaError("no subjects to ingest")
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "n": sum(b["n_b"] for b in batches),
        "p": p,
        "m": width - n_exposures,
        "n_exposures": n_exposures,
        "batches": batches,
    }
    if region_map is not None:
        if region_map.p != p:
            raise SchemaError("region map voxel count differs from outcome length")
        write_region_map(out_dir / "regions.csv", region_map)
        manifest["region_map"] = "regions.csv"
    if extra:
        manifest.update(extra)
    _save_manifest(out_dir, manifest)
    return BatchStore(out_dir, manifest)


def _derived_store(store, out_dir, transform, *, p=None, region_map=None, extra=None):
    """Write a new store whose batches are ``transform(Y, M, C, b)``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    batches = []
    for b in range(store.n_batches):
        Y, M, C = transform(np.array(store.outcomes(b)), store.mask(b), store.covariates(b), b)
        names = {k: store.manifest["batches"][b][k] for k in ("outcomes", "masks", "covariates")}
        write_outcomes(out_dir / names["outcomes"], Y)
        write_mask(out_dir / names["masks"], M)
        write_covariates(out_dir / names["covariates"], C)
        batches.append({**names, "n_b": int(Y.shape[0])})
    manifest = {k: v for k, v in store.manifest.items() if k not in ("batches", "region_map", "observed_proportion")}
    manifest["batches"] = batches
    if p is not None:
        manifest["p"] = p
    grid = region_map if region_map is not None else store.region_map()
    if grid is not None:
        write_region_map(out_dir / "regions.csv", grid)
        manifest["region_map"] = "regions.csv"
    if extra:
        manifest.update(extra)
    _save_manifest(out_dir, manifest)
    return BatchStore(out_dir, manifest)


# ----------------------------------------------------------- standardization


@dataclass
class Standardization:
    voxel_mean: np.ndarray
    voxel_sd: np.ndarray
    zero_variance: np.ndarray
    exposure_mean: float
    exposure_sd: float

    def to_json(self):
        return {
            "exposure_mean": self.exposure_mean,
            "exposure_sd": self.exposure_sd,
            "n_zero_variance": int(self.zero_variance.sum()),
        }

    def to_standard_exposure(self, x):
        return (np.asarray(x, dtype=float) - self.exposure_mean) / self.exposure_sd


def standardize(store, out_dir, *, scale_exposure=True):
    """Per-voxel z-scoring over observed entries, plus the first exposure.

    Unobserved entries are written as 0 (the observed mean after scaling).
    Voxels with zero observed variance, or fewer than two observations, are
    flagged in ``zero_variance`` and left at 0.
    """
    if store.n < 2:
        raise DataError("standardization needs at least two subjects")
    p = store.p
    count = np.zeros(p)
    total = np.zeros(p)
    xs = []
    for b in range(store.n_batches):
        M = store.mask(b)
        Y = np.where(M, store.outcomes(b), 0.0)
        count += M.sum(axis=0)
        total += Y.sum(axis=0)
        xs.append(store.X(b)[:, 0])
    mean = np.divide(total, count, out=np.zeros(p), where=count > 0)
    ss = np.zeros(p)
    for b in range(store.n_batches):
        M = store.mask(b)
        D = np.where(M, store.outcomes(b) - mean, 0.0)
        ss += np.einsum("ij,ij->j", D, D)
    var = np.divide(ss, count - 1, out=np.zeros(p), where=count > 1)
    sd = np.sqrt(var)
    zero_var = (count < 2) | (sd <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    safe_sd = np.where(zero_var, 1.0, sd)

    x = np.concatenate(xs)
    x_mean, x_sd = (float(x.mean()), float(x.std(ddof=1))) if scale_exposure else (0.0, 1.0)
    if scale_exposure and x_sd == 0:
        raise DataError("exposure has zero variance")

    def transform(Y, M, C, b):
        Z = np.where(M & ~zero_var, (Y - mean) / safe_sd, 0.0)
        C = C.copy()
        C[:, 0] = (C[:, 0] - x_mean) / x_sd
        return Z, M, C

    out = _derived_store(store, out_dir, transform, extra={"standardized": True})
    return out, Standardization(mean, sd, zero_var, x_mean, x_sd)


# ---------------------------------------------------------------- masks / OP


@dataclass
class ObservedProportion:
    h: np.ndarray
    counts: np.ndarray
    n: int
    threshold: float = 0.5
    group_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.group_mask = self.h >= self.threshold

    def save(self, path):
        np.save(path, self.counts)

    @classmethod
    def load(cls, path, n, threshold=0.5):
        counts = np.load(path)
        return cls(counts / n, counts, n, threshold)


def observed_proportion(store, threshold=0.5):
    """Fraction of subjects observing each voxel; group mask is ``h >= threshold``."""
    counts = np.zeros(store.p, dtype=np.int64)
    for b in range(store.n_batches):
        counts += store.mask(b).sum(axis=0)
    return ObservedProportion(counts / store.n, counts, store.n, threshold)


def restrict(store, keep, out_dir):
    """Copy of ``store`` keeping only the voxels flagged in ``keep``."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (store.p,):
        raise SchemaError("voxel selector must have length p")
    grid = store.region_map()
    sub = None
    if grid is not None:
        labels = grid.region_labels[keep]
        # relabel so that regions emptied by the selection disappear
        _, labels = np.unique(labels, return_inverse=True)
        sub = VoxelGrid(grid.coords[keep], labels + 1)
    kept = np.flatnonzero(keep)
    return _derived_store(
        store, out_dir, lambda Y, M, C, b: (Y[:, kept], M[:, kept], C),
        p=int(kept.size), region_map=sub, extra={"source_voxels": kept.tolist()},
    )


# ------------------------------------------------------------ missing index


class MissingIndex:
    """Unobserved (subject, voxel) pairs in compressed per-subject form.

    ``indices[offsets[i]:offsets[i+1]]`` are the sorted missing voxels of
    subject ``i`` and ``values`` (``Y_imp``) holds the current imputed value
    of each entry at the same position.
    """

    def __init__(self, offsets, indices, values=None, region_of=None):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.indices = np.asarray(indices)
        if values is None:
            values = np.zeros(self.indices.size)
        self.values = values
        if self.offsets[0] != 0 or self.offsets[-1] != self.indices.size or np.any(np.diff(self.offsets) < 0):
            raise SchemaError("missing-index offsets are inconsistent")
        if len(self.values) != self.indices.size:
            raise SchemaError("Y_imp length differs from the number of missing entries")
        self._region_of = region_of

    @classmethod
    def from_masks(cls, masks, region_of=None):
        masks = np.asarray(masks, dtype=bool)
        rows, cols = np.nonzero(~masks)
        counts = np.bincount(rows, minlength=masks.shape[0])
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return cls(offsets, cols.astype(np.int32), None, region_of)

    @property
    def n(self):
        return self.offsets.size - 1

    def __len__(self):
        return int(self.indices.size)

    def subject(self, i):
        s = slice(int(self.offsets[i]), int(self.offsets[i + 1]))
        return self.indices[s], s

    def locate(self, i, j):
        idx, s = self.subject(i)
        k = int(np.searchsorted(idx, j))
        if k >= idx.size or idx[k] != j:
            raise MissingIndexError(f"voxel {j} is observed for subject {i}")
        return s.start + k

    def region_entries(self, i, r):
        """Positions in ``values`` of subject ``i``'s missing voxels in region ``r``."""
        if self._region_of is None:
            raise SchemaError("missing index was built without a region map")
        idx, s = self.subject(i)
        return s.start + np.flatnonzero(self._region_of[idx] == r)

    def dense(self, p):
        """Dense ``(n, p)`` array holding ``values`` at missing entries, 0 elsewhere."""
        out = np.zeros((self.n, p))
        rows = np.repeat(np.arange(self.n), np.diff(self.offsets))
        out[rows, self.indices] = self.values
        return out

    def save(self, directory, stem):
        directory = Path(directory)
        np.save(directory / f"{stem}_offsets.npy", self.offsets)
        np.save(directory / f"{stem}_indices.npy", self.indices)

    @classmethod
    def load(cls, directory, stem, values=None, region_of=None, mmap=True):
        directory = Path(directory)
        mode = "r" if mmap else None
        off = np.load(directory / f"{stem}_offsets.npy")
        idx = np.load(directory / f"{stem}_indices.npy", mmap_mode=mode)
        return cls(off, idx, values, region_of)


# ------------------------------------------------------- sufficient stats


@dataclass
class SufficientStats:
    """Data summaries that the Gibbs steps for gamma and delta depend on.

    Shapes use ``H`` exposures, ``m`` confounders, ``p`` voxels and ``L``
    basis coefficients.

    xy : (H, p)     sum_i X_ih Y_i(s)
    proj_x : (L, H) sum_i X_ih Y*_i
    proj_z : (L, m) sum_i Y*_i Z_ik
    xx : (H, H)     sum_i X_ih X_ih'
    xz : (H, m)     sum_i X_ih Z_ik
    zz : (m, m)     sum_i Z_ik Z_ik'
    eta_x : (L, H)  sum_i X_ih theta_eta,i   (state dependent)
    eta_z : (L, m)  sum_i theta_eta,i Z_ik  (state dependent)
    """

    xy: np.ndarray
    proj_x: np.ndarray
    proj_z: np.ndarray
    xx: np.ndarray
    xz: np.ndarray
    zz: np.ndarray
    n: int
    eta_x: np.ndarray = None
    eta_z: np.ndarray = None

    def __post_init__(self):
        L, H = self.proj_x.shape
        if self.eta_x is None:
            self.eta_x = np.zeros((L, H))
        if self.eta_z is None:
            self.eta_z = np.zeros((L, self.proj_z.shape[1]))

    @property
    def x_sumsq(self):
        return np.diag(self.xx).copy()

    @property
    def z_sumsq(self):
        return np.diag(self.zz).copy()

    FIELDS = ("xy", "proj_x", "proj_z", "xx", "xz", "zz", "eta_x", "eta_z")

    def copy(self):
        return SufficientStats(**{k: getattr(self, k).copy() for k in self.FIELDS}, n=self.n)

    def max_rel_diff(self, other):
        worst = 0.0
        for k in self.FIELDS:
            a, b = getattr(self, k), getattr(other, k)
            scale = max(1.0, float(np.abs(b).max(initial=0.0)))
            worst = max(worst, float(np.abs(a - b).max(initial=0.0)) / scale)
        return worst

    @classmethod
    def from_arrays(cls, Y, X, Z, basis):
        """Dense construction; ``Y`` is ``(n, p)`` with imputations in place."""
        X = np.atleast_2d(np.asarray(X, dtype=float).reshape(len(Y), -1))
        Z = np.asarray(Z, dtype=float).reshape(len(Y), -1)
        Ys = basis.project(Y)
        return cls(
            xy=X.T @ Y, proj_x=Ys.T @ X, proj_z=Ys.T @ Z,
            xx=X.T @ X, xz=X.T @ Z, zz=Z.T @ Z, n=len(Y),
        )

    def accumulate(self, other):
        for k in self.FIELDS:
            getattr(self, k).__iadd__(getattr(other, k))
        self.n += other.n


def compute_stats(store, basis, imputation=None):
    """Stream over batches and build :class:`SufficientStats`.

    ``imputation`` is an optional :class:`MissingIndex` over all subjects whose
    values replace the unobserved entries; without it they are taken as 0.
    """
    if basis.p != store.p:
        raise SchemaError(f"basis covers {basis.p} voxels but the store has {store.p}")
    total = None
    offsets = store.batch_offsets
    for b in range(store.n_batches):
        Y = store.masked_outcomes(b)
        if imputation is not None:
            for ii in range(Y.shape[0]):
                idx, s = imputation.subject(offsets[b] + ii)
                Y[ii, idx] = imputation.values[s]
        part = SufficientStats.from_arrays(Y, store.X(b), store.Z(b), basis)
        if total is None:
            total = part
        else:
            total.accumulate(part)
    return total


def apply_imputation(stats, basis, x_i, z_i, j, old_value, new_value, *, index=None, subject=None):
    """Update ``stats`` in place after ``Y_i(s_j)`` changes.

    Only the ``L_r`` coefficients of voxel ``j``'s region move, so the cost is
    ``O(L_r (H + m))``.  When ``index`` and ``subject`` are given the entry is
    checked to be a missing one first.
    """
    if index is not None:
        index.locate(subject, j)
    d = float(new_value) - float(old_value)
    if d == 0.0:
        return stats
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    z_i = np.atleast_1d(np.asarray(z_i, dtype=float))
    r = basis.region_of[j]
    sl = basis.slices[r]
    q = basis.Q(r)[basis.row_in_region[j]]
    stats.xy[:, j] += x_i * d
    stats.proj_x[sl] += np.outer(q * d, x_i)
    stats.proj_z[sl] += np.outer(q * d, z_i)
    return stats


def apply_imputation_block(stats, basis, r, cols, X, Z, delta):
    """Vectorised form of :func:`apply_imputation` for one region.

    ``cols`` are row positions inside region ``r`` and ``delta`` is the
    ``(n_b, len(cols))`` matrix of value changes for a batch with covariates
    ``X`` (``n_b x H``) and ``Z`` (``n_b x m``).  Returns the change of the
    batch's projected outcomes, ``delta @ Q_r[cols]``, for the caller to store.
    """
    vox = basis.voxels[r][cols]
    stats.xy[:, vox] += X.T @ delta
    dstar = delta @ basis.Q(r)[cols]
    sl = basis.slices[r]
    stats.proj_x[sl] += dstar.T @ X
    stats.proj_z[sl] += dstar.T @ Z
    return dstar
