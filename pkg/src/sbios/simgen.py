"""Synthetic image-on-scalar datasets with known selection truth.

Two layouts are provided:

* ``lattice``: a rectangular 2D (or 3D) image split into a grid of box
  regions, with the true coefficient image made of thresholded Gaussian
  bumps.
* ``brain``: an ellipsoidal "brain" inside a ``45 x 54 x 45`` cube (about
  19k voxels) split into box regions, with a smooth coefficient image that
  is cut off outside a handful of regions.

Subject masks follow two missingness patterns.  A centred core is always
observed; outside it each subject observes each voxel with probability
``op_level``.  Pattern I lets the missing zone cover part of the active
set, pattern II keeps the zone off the active set.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datastore import ObservedProportion, ingest
from .errors import ConfigError
from .kernel_basis import MaternParams, TruncationConfig, VoxelGrid, build_basis

__all__ = ["SimConfig", "GroundTruth", "generate", "make_missing_masks", "beta_bumps",
           "brain_grid", "core_mask", "sim_rng"]

BRAIN_CUBE = (45, 54, 45)
BRAIN_AXES = (17.0, 21.5, 12.5)

# centres in fractional image coordinates: one in the always-observed core,
# three in the periphery so that pattern I hides a good share of the signal
_BUMPS = ((0.50, 0.50), (0.12, 0.30), (0.15, 0.80), (0.85, 0.60))


@dataclass
class SimConfig:
    """Simulation settings; the defaults give the 90 x 90, 9-region design."""

    layout: str = "lattice"
    dims: tuple = (90, 90)
    region_grid: tuple = (3, 3)
    n: int = 1000
    batch_size: int = 500
    m: int = 2
    sigma_y: float = 1.0
    op_level: float = 0.5
    pattern: str = "I"
    beta_shape: object = "bumps"
    amplitude: float = 0.2
    bump_width: float = 0.045
    bump_centres: tuple = _BUMPS
    rho: float = 2.0
    nu: float = 0.2
    basis_fraction: float = 0.1
    basis_energy: float | None = None
    core_fraction: float = 0.4
    active_regions: tuple = ()
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.region_grid = tuple(int(b) for b in self.region_grid)
        self.bump_centres = tuple(tuple(float(x) for x in c) for c in self.bump_centres)
        if self.layout not in ("lattice", "brain"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if not 0 < self.op_level <= 1:
            raise ConfigError(f"op_level must lie in (0, 1], got {self.op_level}")
        if self.pattern not in ("I", "II", "none"):
            raise ConfigError(f"pattern must be I, II or none, got {self.pattern!r}")
        if self.n < 1 or self.batch_size < 1 or self.m < 0:
            raise ConfigError("n and batch_size must be positive and m nonnegative")
        if self.sigma_y < 0:
            raise ConfigError("sigma_y must be nonnegative")
        if not 0 < self.core_fraction < 1:
            raise ConfigError("core_fraction must lie in (0, 1)")
        if self.layout == "lattice" and (len(self.dims) != len(self.region_grid)
                                         or any(d % b for d, b in zip(self.dims, self.region_grid))):
            raise ConfigError(f"dims {self.dims} are not divisible by the region grid {self.region_grid}")

    def to_json(self):
        d = asdict(self)
        if isinstance(self.beta_shape, np.ndarray):
            d["beta_shape"] = "user"
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        for k in ("dims", "region_grid", "active_regions"):
            if k in d:
                d[k] = tuple(d[k])
        if "bump_centres" in d:
            d["bump_centres"] = tuple(tuple(c) for c in d["bump_centres"])
        return cls(**d)

    def truncation(self):
        if self.basis_energy is not None:
            return TruncationConfig(mode="energy", energy=self.basis_energy)
        return TruncationConfig(mode="count", fraction=self.basis_fraction)

    def kernel(self):
        return MaternParams(self.rho, self.nu)


@dataclass
class GroundTruth:
    beta_true: np.ndarray
    delta_true: np.ndarray = field(init=False)
    zone: np.ndarray = None
    observed: ObservedProportion = None
    theta_gamma: np.ndarray = None
    theta_eta: np.ndarray = None

    def __post_init__(self):
        self.delta_true = self.beta_true != 0

    def save(self, directory):
        directory = Path(directory)
        with open(directory / "truth.csv", "w") as fh:
            fh.write("voxel_id,beta_true,delta_true\n")
            for j, (b, d) in enumerate(zip(self.beta_true, self.delta_true)):
                fh.write(f"{j},{b!r},{int(d)}\n")
        extra = {} if self.theta_eta is None else {"theta_eta": self.theta_eta}
        np.savez(directory / "truth.npz", beta_true=self.beta_true, zone=self.zone,
                 theta_gamma=self.theta_gamma, **extra)

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        with np.load(directory / "truth.npz") as z:
            gt = cls(z["beta_true"], zone=z["zone"], theta_gamma=z["theta_gamma"],
                     theta_eta=z["theta_eta"] if "theta_eta" in z else None)
        return gt


def sim_rng(seed, stream, index=0):
    return np.random.Generator(np.random.Philox(key=[seed % 2**64, 0x51A], counter=[0, 0, stream, index]))


# ------------------------------------------------------------- geometry


def core_mask(coords, dims, fraction):
    """Centred box (lattice) covering ``fraction`` of the bounding volume."""
    coords = np.asarray(coords, dtype=float)
    d = len(dims)
    side = fraction ** (1.0 / d)
    lo = np.array([(1 - side) / 2 * n for n in dims])
    hi = np.array([(1 + side) / 2 * n for n in dims])
    centre = coords + 0.5
    return np.all((centre >= lo) & (centre <= hi), axis=1)


def brain_grid(region_grid=(4, 5, 3)):
    """Ellipsoidal voxel set in the ``45 x 54 x 45`` cube cut into box regions.

    Boxes holding fewer than 40 voxels are merged into their nearest
    neighbouring box so every region is large enough for a kernel basis.
    """
    dims = np.array(BRAIN_CUBE)
    axes = np.array(BRAIN_AXES)
    centre = (dims - 1) / 2
    g = np.stack(np.unravel_index(np.arange(np.prod(dims)), dims), axis=1)
    inside = np.sum(((g - centre) / axes) ** 2, axis=1) <= 1.0
    coords = g[inside]
    lo = coords.min(axis=0)
    span = coords.max(axis=0) - lo + 1
    blocks = np.array(region_grid)
    box = np.minimum(((coords - lo) * blocks) // span, blocks - 1)
    label = np.ravel_multi_index(box.T, blocks)
    ids, counts = np.unique(label, return_counts=True)
    centres = {i: coords[label == i].mean(axis=0) for i in ids}
    for i, c in sorted(zip(ids, counts), key=lambda x: x[1]):
        if c >= 40:
            continue
        others = [k for k in centres if k != i and np.any(label == k)]
        tgt = min(others, key=lambda k: np.sum((centres[k] - centres[i]) ** 2))
        label[label == i] = tgt
    _, label = np.unique(label, return_inverse=True)
    return VoxelGrid(coords, label + 1)


def _normalised_radius(coords):
    centre = (np.array(BRAIN_CUBE) - 1) / 2
    return np.sqrt(np.sum(((coords - centre) / np.array(BRAIN_AXES)) ** 2, axis=1))


def beta_bumps(coords, dims, amplitude=0.5, width=0.045, centres=_BUMPS):
    """Sum of Gaussian bumps with values under 10% of the peak set to 0."""
    coords = np.asarray(coords, dtype=float)
    w = width * min(dims)
    out = np.zeros(coords.shape[0])
    for c in centres:
        c = np.array([ci * (n - 1) for ci, n in zip(c, dims)])
        out += np.exp(-np.sum((coords - c) ** 2, axis=1) / (2 * w * w))
    out[out < 0.1] = 0.0
    return amplitude * out


def beta_brain(grid, regions, amplitude=1.0):
    """``exp(-0.01 |x - x0|^2 / 3)`` on the chosen regions, 0 elsewhere."""
    sel = np.isin(grid.region_labels, regions)
    if not sel.any():
        raise ConfigError("active regions hold no voxels")
    x0 = grid.coords[sel].mean(axis=0)
    d2 = np.sum((grid.coords - x0) ** 2, axis=1)
    out = np.where(sel, np.exp(-0.01 * d2 / grid.coords.shape[1]), 0.0)
    out[out < 0.1] = 0.0
    return amplitude * out


def default_brain_regions(grid, k=4):
    """``k`` regions nearest a point off the centre along the long axis."""
    target = np.array([22.0, 36.0, 22.0])
    labels = np.unique(grid.region_labels)
    cent = np.array([grid.coords[grid.region_labels == r].mean(axis=0) for r in labels])
    order = np.argsort(np.sum((cent - target) ** 2, axis=1))
    return tuple(int(labels[i]) for i in order[:k])


def make_missing_masks(core, active, pattern, op_level, n, rng):
    """Per-subject observation masks, shape ``(n, p)``.

    Voxels in ``core`` are always observed.  The missing zone is the
    complement of the core (pattern I) or that complement minus the active
    set (pattern II); there each subject observes each voxel independently
    with probability ``op_level``.
    """
    core = np.asarray(core, dtype=bool)
    active = np.asarray(active, dtype=bool)
    p = core.size
    if pattern == "none" or op_level >= 1:
        return np.ones((n, p), dtype=bool), np.zeros(p, dtype=bool)
    zone = ~core
    if pattern == "I":
        if not (zone & active).any():
            raise ConfigError("pattern I needs the missing zone to overlap the active set")
    elif pattern == "II":
        zone &= ~active
    else:
        raise ConfigError(f"unknown pattern {pattern!r}")
    masks = np.ones((n, p), dtype=bool)
    masks[:, zone] = rng.random((n, int(zone.sum()))) < op_level
    return masks, zone


def _layout(cfg):
    if cfg.layout == "lattice":
        grid = VoxelGrid.lattice(cfg.dims, cfg.region_grid)
        dims = cfg.dims
        core = core_mask(grid.coords, dims, cfg.core_fraction)
        if isinstance(cfg.beta_shape, np.ndarray):
            beta = np.asarray(cfg.beta_shape, dtype=float).reshape(-1)
            if beta.size != grid.p:
                raise ConfigError("user beta image does not match dims")
        elif cfg.beta_shape == "bumps":
            beta = beta_bumps(grid.coords, dims, cfg.amplitude, cfg.bump_width, cfg.bump_centres)
        else:
            raise ConfigError(f"unknown beta preset {cfg.beta_shape!r} for a lattice")
    else:
        grid = brain_grid(cfg.region_grid)
        core = _normalised_radius(grid.coords) <= cfg.core_fraction ** (1 / 3)
        regions = cfg.active_regions or default_brain_regions(grid)
        beta = beta_brain(grid, regions, cfg.amplitude)
    return grid, core, beta


def generate(cfg, out_dir, basis=None):
    """Write a simulated dataset to ``out_dir``; returns ``(store, truth, basis)``.

    ``gamma_k`` and ``eta_i`` are expanded in the configured kernel basis with
    standard normal coefficients; ``X`` and ``Z`` are standard normal.
    Unobserved outcome entries are stored as 0.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid, core, beta = _layout(cfg)
    active = beta != 0
    if not active.any():
        raise ConfigError("the true coefficient image has no active voxels")
    if basis is None:
        basis = build_basis(grid, cfg.kernel(), cfg.truncation())
    L, p = basis.L, grid.p
    theta_gamma = sim_rng(cfg.seed, 1).standard_normal((cfg.m, L))
    gamma = basis.expand(theta_gamma)
    keep_eta = cfg.n * L <= 5_000_000
    etas, zone_seen = [], None
    counts = np.zeros(p, dtype=np.int64)
    n_batches = math.ceil(cfg.n / cfg.batch_size)

    def subjects():
        nonlocal zone_seen
        for b in range(n_batches):
            rng = sim_rng(cfg.seed, 2, b)
            nb = min(cfg.batch_size, cfg.n - b * cfg.batch_size)
            X = rng.standard_normal(nb)
            Z = rng.standard_normal((nb, cfg.m))
            th_eta = rng.standard_normal((nb, L))
            eps = rng.standard_normal((nb, p))
            masks, zone_seen = make_missing_masks(core, active, cfg.pattern, cfg.op_level, nb, rng)
            Y = X[:, None] * beta[None, :] + Z @ gamma + basis.expand(th_eta) + cfg.sigma_y * eps
            Y[~masks] = 0.0
            counts[:] += masks.sum(axis=0)
            if keep_eta:
                etas.append(th_eta)
            for i in range(nb):
                yield Y[i], masks[i], np.concatenate([[X[i]], Z[i]])

    store = ingest(subjects(), cfg.batch_size, out_dir, n_exposures=1, region_map=grid)
    op = ObservedProportion(counts / cfg.n, counts, cfg.n)
    op.save(out_dir / "observed_counts.npy")
    store.manifest["observed_proportion"] = "observed_counts.npy"
    (out_dir / "manifest.json").write_text(json.dumps(store.manifest, indent=2))
    truth = GroundTruth(beta, zone=zone_seen, observed=op, theta_gamma=theta_gamma,
                        theta_eta=np.concatenate(etas) if keep_eta else None)
    truth.save(out_dir)
    (out_dir / "sim_config.json").write_text(json.dumps(cfg.to_json(), indent=2, default=list))
    return store, truth, basis
