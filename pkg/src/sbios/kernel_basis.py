"""Region-wise Matern kernels and truncated orthonormal eigenbases.

The prior covariance of every spatial coefficient image is block diagonal over
regions.  Within region ``r`` the kernel matrix is eigendecomposed and the
leading eigenvectors, re-orthonormalised with a QR step, form the basis ``Q_r``
(``p_r x L_r``) with eigenvalues ``lam`` (``L_r``).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from numpy.polynomial import hermite
from scipy import special

from .errors import ConfigError, DegenerateKernelError, DomainError, SchemaError

__all__ = [
    "VoxelGrid",
    "MaternParams",
    "RegionBasis",
    "BasisSet",
    "TruncationConfig",
    "matern_kernel",
    "pairwise_argument",
    "build_region_kernel",
    "tune_kernel_params",
    "eigenbasis",
    "hermite_basis",
    "build_basis",
    "save_region_basis",
    "load_region_basis",
]

_QR_MAGIC = b"SBQR"
_QR_VERSION = 1


@dataclass
class VoxelGrid:
    """Voxel lattice positions with a region label (``1..R``) per voxel."""

    coords: np.ndarray
    region_labels: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        if self.coords.ndim == 1:
            self.coords = self.coords[:, None]
        self.region_labels = np.asarray(self.region_labels, dtype=np.int64)
        if self.coords.shape[0] != self.region_labels.shape[0]:
            raise SchemaError("coords and region_labels disagree on voxel count")
        if self.coords.shape[1] not in (1, 2, 3):
            raise SchemaError("coords must be 1D, 2D or 3D")
        if len(np.unique(self.coords, axis=0)) != self.coords.shape[0]:
            raise SchemaError("voxel coordinates must be unique")
        labels = np.unique(self.region_labels)
        if labels.size and (labels[0] != 1 or labels[-1] != labels.size):
            raise SchemaError("region labels must cover 1..R with every region nonempty")

    @property
    def p(self):
        return self.coords.shape[0]

    @property
    def n_regions(self):
        return int(self.region_labels.max()) if self.p else 0

    def region_voxels(self, region_id):
        idx = np.flatnonzero(self.region_labels == region_id)
        if idx.size == 0:
            raise ConfigError(f"region {region_id} is empty")
        return idx

    @classmethod
    def lattice(cls, dims, blocks):
        """Full rectangular lattice split evenly into ``blocks`` boxes.

        ``lattice((90, 90), (3, 3))`` is the 9-region 2D design; voxels are
        ordered C-style over ``dims``.
        """
        dims = tuple(int(d) for d in dims)
        blocks = tuple(int(b) for b in blocks)
        if len(dims) != len(blocks) or any(d % b for d, b in zip(dims, blocks)):
            raise ConfigError(f"dims {dims} not divisible by region grid {blocks}")
        coords = np.stack(np.unravel_index(np.arange(np.prod(dims)), dims), axis=1)
        block_idx = coords // (np.array(dims) // np.array(blocks))
        labels = np.ravel_multi_index(block_idx.T, blocks) + 1
        return cls(coords, labels)


@dataclass(frozen=True)
class MaternParams:
    rho: float
    nu: float

    def __post_init__(self):
        if not (self.rho > 0 and self.nu > 0):
            raise ConfigError(f"Matern parameters must be positive, got rho={self.rho}, nu={self.nu}")


@dataclass(frozen=True)
class TruncationConfig:
    """How many eigenvectors to keep per region.

    ``mode="energy"`` keeps the smallest L whose eigenvalues reach ``energy`` of
    the total; ``mode="count"`` keeps ``ceil(fraction * p_r)`` of them.
    """

    mode: str = "energy"
    energy: float = 0.9
    fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in ("energy", "count"):
            raise ConfigError(f"unknown truncation mode {self.mode!r}")
        if not 0 < self.energy <= 1 or not 0 < self.fraction <= 1:
            raise ConfigError("energy and fraction must lie in (0, 1]")


@dataclass
class RegionBasis:
    region_id: int
    Q: np.ndarray
    lam: np.ndarray

    @property
    def p_r(self):
        return self.Q.shape[0]

    @property
    def L_r(self):
        return self.Q.shape[1]


def matern_kernel(d, nu):
    """Matern correlation ``C_nu(d)``, vectorised over ``d``.

    ``d`` is used as given; callers decide whether it is a plain or squared
    distance (see :func:`pairwise_argument`).
    """
    d = np.asarray(d, dtype=np.float64)
    nu = float(nu)
    if not np.all(np.isfinite(d)) or not math.isfinite(nu):
        raise DomainError("matern_kernel needs finite inputs")
    if nu <= 0 or np.any(d < 0):
        raise DomainError("matern_kernel needs nu > 0 and d >= 0")
    x = np.sqrt(2.0 * nu) * d
    out = np.ones_like(x)
    pos = x > 1e-12
    xp = x[pos]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        logc = (
            (1.0 - nu) * math.log(2.0)
            - special.gammaln(nu)
            + nu * np.log(xp)
            + np.log(special.kve(nu, xp))
            - xp
        )
        vals = np.exp(logc)
    # kve underflow at huge x gives log(0) = -inf -> 0, which is the limit
    vals[np.isnan(vals)] = 0.0
    out[pos] = np.minimum(vals, 1.0)
    return out if out.ndim else float(out)


def pairwise_argument(coords, rho, distance="squared"):
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    if distance == "squared":
        return sq / rho
    if distance == "plain":
        return np.sqrt(sq) / rho
    raise ConfigError(f"distance must be 'squared' or 'plain', got {distance!r}")


def build_region_kernel(grid, region_id, params, distance="squared"):
    coords = grid.coords[grid.region_voxels(region_id)]
    K = matern_kernel(pairwise_argument(coords, params.rho, distance), params.nu)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    return K


def tune_kernel_params(empirical_cov, grid_rho, grid_nu, grid, region_id, distance="squared"):
    """Grid search for the Matern parameters closest in Frobenius norm.

    Ties go to the smallest ``rho``, then the smallest ``nu``.
    """
    grid_rho = sorted(float(r) for r in grid_rho)
    grid_nu = sorted(float(v) for v in grid_nu)
    if not grid_rho or not grid_nu:
        raise ConfigError("tuning grids must be nonempty")
    S = np.asarray(empirical_cov, dtype=np.float64)
    coords = grid.coords[grid.region_voxels(region_id)]
    if S.shape != (coords.shape[0], coords.shape[0]):
        raise SchemaError("empirical covariance does not match region size")
    sq = pairwise_argument(coords, 1.0, distance)
    best, best_err = None, np.inf
    for rho in grid_rho:
        arg = sq / rho
        for nu in grid_nu:
            K = matern_kernel(arg, nu)
            np.fill_diagonal(K, 1.0)
            err = np.linalg.norm(S - K)
            if err < best_err:
                best, best_err = (rho, nu), err
    return MaternParams(*best)


def _fix_signs(Q):
    """Make the first clearly nonzero entry of each column positive."""
    scale = np.abs(Q).max(axis=0)
    first = np.argmax(np.abs(Q) > 1e-8 * scale, axis=0)
    signs = np.sign(Q[first, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return Q * signs


def _orthonormalise(V):
    Q, _ = np.linalg.qr(V)
    return np.ascontiguousarray(_fix_signs(Q))


def eigenbasis(kernel, energy=0.9, *, count_fraction=None, region_id=0):
    """Truncated eigenbasis of a symmetric PSD kernel matrix.

    By default keeps the smallest ``L`` whose cumulative eigenvalue share is at
    least ``energy``.  Passing ``count_fraction`` keeps ``ceil(count_fraction *
    p_r)`` vectors instead.  Only strictly positive eigenvalues are kept.
    """
    K = np.asarray(kernel, dtype=np.float64)
    K = 0.5 * (K + K.T)
    lam, V = np.linalg.eigh(K)
    lam, V = lam[::-1], V[:, ::-1]
    if lam.size == 0 or lam[0] <= 0:
        raise DegenerateKernelError("kernel has no positive eigenvalue")
    n_pos = int(np.sum(lam > lam[0] * K.shape[0] * np.finfo(float).eps))
    if count_fraction is not None:
        if not 0 < count_fraction <= 1:
            raise ConfigError("count_fraction must lie in (0, 1]")
        L = int(math.ceil(count_fraction * K.shape[0] - 1e-9))
    else:
        if not 0 < energy <= 1:
            raise ConfigError("energy must lie in (0, 1]")
        share = np.cumsum(lam) / lam[lam > 0].sum()
        L = int(np.searchsorted(share, energy - 1e-12) + 1)
    L = max(1, min(L, n_pos))
    return RegionBasis(region_id, _orthonormalise(V[:, :L]), lam[:L].copy())


def _hermite_1d(x, degree, a, b):
    c = math.sqrt(a * a + 2 * a * b)
    env = np.exp(-(c - a) * x * x)
    out = np.empty((degree + 1, x.size))
    for k in range(degree + 1):
        coef = np.zeros(k + 1)
        coef[k] = 1.0
        out[k] = env * hermite.hermval(math.sqrt(2 * c) * x, coef)
    return out


def hermite_basis(coords, a=0.01, b=1.0, degree=10, region_id=1):
    """Single-kernel basis for the modified squared-exponential kernel.

    ``k(x, x') = exp(-a(|x|^2 + |x'|^2) - b|x - x'|^2)`` has Hermite-polynomial
    eigenfunctions; every multi-index of total degree ``<= degree`` is used.
    Coordinates are centred and scaled into ``[-1, 1]``.  The Mercer
    eigenvalues are multiplied by the voxel count so they live on the same
    scale as kernel-matrix eigenvalues.
    """
    X = np.asarray(coords, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    X = X - X.mean(axis=0)
    X = X / np.abs(X).max()
    d = X.shape[1]
    c = math.sqrt(a * a + 2 * a * b)
    A = a + b + c
    B = b / A
    per_dim = [_hermite_1d(X[:, j], degree, a, b) for j in range(d)]
    idx = [k for k in product(range(degree + 1), repeat=d) if sum(k) <= degree]
    idx.sort(key=lambda k: (sum(k), tuple(-v for v in k)))
    Phi = np.empty((X.shape[0], len(idx)))
    lam = np.empty(len(idx))
    for col, k in enumerate(idx):
        v = np.ones(X.shape[0])
        for j in range(d):
            v = v * per_dim[j][k[j]]
        Phi[:, col] = v
        lam[col] = (2 * a / A) ** (d / 2) * B ** sum(k)
    if len(idx) > X.shape[0]:
        raise ConfigError("more Hermite basis functions than voxels")
    return RegionBasis(region_id, _orthonormalise(Phi), lam * X.shape[0])


@dataclass
class BasisSet:
    """All region bases plus the voxel membership of each region.

    ``voxels[r]`` holds the global voxel indices (ascending) of the rows of
    ``regions[r].Q``.  Coefficient vectors for all regions are concatenated in
    region order; ``slices[r]`` addresses region ``r`` inside them.
    """

    regions: list
    voxels: list
    p: int
    slices: list = field(init=False)
    lam: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.regions) != len(self.voxels):
            raise SchemaError("one voxel list per region basis is required")
        seen = np.zeros(self.p, dtype=np.int64)
        for rb, vox in zip(self.regions, self.voxels):
            if rb.Q.shape[0] != len(vox):
                raise SchemaError(f"region {rb.region_id}: basis rows != region voxels")
            seen[vox] += 1
        if not np.all(seen == 1):
            raise SchemaError("region voxel lists must partition the voxels")
        self.slices = []
        start = 0
        for rb in self.regions:
            self.slices.append(slice(start, start + rb.L_r))
            start += rb.L_r
        self.lam = np.concatenate([rb.lam for rb in self.regions])
        self.region_of = np.empty(self.p, dtype=np.int64)
        self.row_in_region = np.empty(self.p, dtype=np.int64)
        for r, vox in enumerate(self.voxels):
            self.region_of[vox] = r
            self.row_in_region[vox] = np.arange(len(vox))
        self._Qt = [np.ascontiguousarray(rb.Q.T) for rb in self.regions]

    @property
    def L(self):
        return int(self.lam.size)

    @property
    def n_regions(self):
        return len(self.regions)

    def Q(self, r):
        return self.regions[r].Q

    def Qt(self, r):
        return self._Qt[r]

    def project(self, Y):
        """``Q^T Y`` region by region; ``Y`` is ``(..., p)``, result ``(..., L)``."""
        Y = np.asarray(Y, dtype=np.float64)
        out = np.empty(Y.shape[:-1] + (self.L,))
        for r, vox in enumerate(self.voxels):
            out[..., self.slices[r]] = Y[..., vox] @ self.regions[r].Q
        return out

    def expand(self, theta):
        """Voxel image ``Q theta`` from concatenated coefficients ``(..., L)``."""
        theta = np.asarray(theta, dtype=np.float64)
        out = np.empty(theta.shape[:-1] + (self.p,))
        for r, vox in enumerate(self.voxels):
            out[..., vox] = theta[..., self.slices[r]] @ self._Qt[r]
        return out

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for rb in self.regions:
            name = f"region_{rb.region_id:04d}.sbqr"
            save_region_basis(directory / name, rb)
            files.append(name)
        meta = {"p": self.p, "files": files, "region_ids": [int(rb.region_id) for rb in self.regions]}
        (directory / "basis.json").write_text(json.dumps(meta, indent=2))
        np.save(directory / "voxels.npy", np.concatenate(
            [np.full(len(v), i) for i, v in enumerate(self.voxels)])[np.argsort(np.concatenate(self.voxels))])

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "basis.json").read_text())
        owner = np.load(directory / "voxels.npy")
        regions = [load_region_basis(directory / f) for f in meta["files"]]
        voxels = [np.flatnonzero(owner == i) for i in range(len(regions))]
        return cls(regions, voxels, int(meta["p"]))


def build_basis(grid, params, truncation=TruncationConfig(), distance="squared"):
    """Eigenbasis for every region of ``grid``.

    ``params`` is one :class:`MaternParams` for all regions or a mapping from
    region id to parameters.
    """
    regions, voxels = [], []
    for rid in range(1, grid.n_regions + 1):
        prm = params[rid] if isinstance(params, dict) else params
        K = build_region_kernel(grid, rid, prm, distance)
        if truncation.mode == "count":
            rb = eigenbasis(K, count_fraction=truncation.fraction, region_id=rid)
        else:
            rb = eigenbasis(K, truncation.energy, region_id=rid)
        regions.append(rb)
        voxels.append(grid.region_voxels(rid))
    return BasisSet(regions, voxels, grid.p)


def save_region_basis(path, rb):
    Q = np.asarray(rb.Q, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_QR_MAGIC)
        fh.write(struct.pack("<IQQ", _QR_VERSION, Q.shape[0], Q.shape[1]))
        fh.write(np.asarray(rb.lam, dtype="<f8").tobytes())
        fh.write(Q.tobytes(order="F"))


def load_region_basis(path, region_id=None):
    raw = Path(path).read_bytes()
    if raw[:4] != _QR_MAGIC:
        raise SchemaError(f"{path}: not a basis file")
    version, p_r, L_r = struct.unpack_from("<IQQ", raw, 4)
    if version != _QR_VERSION:
        raise SchemaError(f"{path}: unsupported basis version {version}")
    off = 4 + struct.calcsize("<IQQ")
    if len(raw) != off + 8 * (L_r + p_r * L_r):
        raise SchemaError(f"{path}: truncated basis file")
    lam = np.frombuffer(raw, "<f8", L_r, off).astype(np.float64)
    Q = np.frombuffer(raw, "<f8", p_r * L_r, off + 8 * L_r).reshape((p_r, L_r), order="F")
    if region_id is None:
        stem = Path(path).stem
        region_id = int(stem.split("_")[-1]) if stem.split("_")[-1].isdigit() else 0
    return RegionBasis(region_id, np.ascontiguousarray(Q, dtype=np.float64), lam)
