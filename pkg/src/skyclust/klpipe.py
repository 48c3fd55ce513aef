"""
Karhunen-Loeve likelihood engine.

Spherical cells on a hexagonal close-packed lattice are filled from a
galaxy catalog and a weighted random catalog; cells with enough sky coverage
give the overdensity data vector. The fiducial cell covariance (signal plus
shot noise) is diagonalized once, the data are projected onto the leading
eigenmodes, and the Gaussian likelihood of the projected data is scanned over
a parameter grid.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import warnings
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .catalog import Catalog, SelectionFunction, StripeLayout
from .cosmomodel import SpectrumParams, TabulatedXi, comoving_distance, kaiser_boost, xi_from_pk

__all__ = [
    "BoxRegion",
    "SurveyRegion",
    "CellLattice",
    "CellCounts",
    "OverdensityVector",
    "CovarianceMatrix",
    "CovarianceModel",
    "KLBasis",
    "LikelihoodSurface",
    "BoundaryPeakWarning",
    "hcp_points",
    "build_lattice",
    "count_cells",
    "count_galaxies",
    "overdensities",
    "build_covariance",
    "kl_decompose",
    "kl_project",
    "log_likelihood",
    "gaussian_loglike",
    "likelihood_grid",
    "refine_peak",
    "combine_surfaces",
    "save_array",
    "load_array",
]

logger = logging.getLogger(__name__)


class BoundaryPeakWarning(UserWarning):
    """The likelihood maximum lies on the edge of the parameter grid."""


# ---------------------------------------------------------------------------
# regions and lattice

@dataclasses.dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box in comoving coordinates (Mpc/h)."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError("box region needs lo < hi in three dimensions")

    def bounds(self):
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)

    def contains(self, pos):
        lo, hi = self.bounds()
        pos = np.asarray(pos, dtype=float)
        return np.all((pos >= lo) & (pos <= hi), axis=-1)

    @property
    def volume(self) -> float:
        lo, hi = self.bounds()
        return float(np.prod(hi - lo))


@dataclasses.dataclass(frozen=True)
class SurveyRegion:
    """Stripe footprint between two comoving distances.

    Cartesian coordinates put the observer at the origin with the x axis
    towards the middle of the footprint in right ascension (see
    :class:`skyclust.mocks.VolumeGeometry`, which uses the same convention).
    """

    layout: StripeLayout
    d_min: float
    d_max: float
    omega_m: float = 0.3

    def __post_init__(self):
        if not 0 <= self.d_min < self.d_max:
            raise ValueError("need 0 <= d_min < d_max")

    @functools.cached_property
    def geometry(self):
        from .mocks import VolumeGeometry
        return VolumeGeometry(self.layout, self.d_min, self.d_max, self.omega_m)

    def bounds(self):
        g = self.geometry.grid(1.0)
        lo = np.asarray(g.origin)
        return lo, lo + np.asarray(g.shape) * g.spacing

    def contains(self, pos):
        ra, dec, dist = self.geometry.cartesian_to_sky(pos)
        return self.layout.contains(ra, dec) & (dist >= self.d_min) & (dist <= self.d_max)

    def to_cartesian(self, ra, dec, dist):
        return self.geometry.sky_to_cartesian(ra, dec, dist)

    def catalog_positions(self, catalog: Catalog):
        """Cartesian positions of records with redshifts (others are dropped)."""
        has = catalog.has_redshift
        z = np.ma.getdata(catalog.redshift)[has]
        dist = comoving_distance(z, self.omega_m)
        return self.to_cartesian(catalog.ra[has], catalog.dec[has], dist), has

    @property
    def volume(self) -> float:
        area = self.layout.area_deg2() * (math.pi / 180.0) ** 2
        return area * (self.d_max**3 - self.d_min**3) / 3.0


def hcp_points(lo, hi, spacing: float, origin=None) -> np.ndarray:
    """Hexagonal close-packed points with nearest-neighbor distance ``spacing`` covering a box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    origin = 0.5 * (lo + hi) if origin is None else np.asarray(origin, dtype=float)
    a = float(spacing)
    dy = a * math.sqrt(3.0) / 2.0
    dz = a * math.sqrt(2.0 / 3.0)
    ranges = []
    for lo_i, hi_i, o, step in zip(lo, hi, origin, (a, dy, dz)):
        ranges.append(np.arange(math.floor((lo_i - o) / step) - 1, math.ceil((hi_i - o) / step) + 2))
    i, j, k = np.meshgrid(*ranges, indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    # ABAB stacking: B layers shift by (a/2, a/(2 sqrt 3)) in the plane
    b = np.mod(k, 2)
    x = (i + 0.5 * np.mod(j, 2) + 0.5 * b) * a
    y = j * dy + b * a / (2.0 * math.sqrt(3.0))
    z = k * dz
    pts = np.stack([x, y, z], axis=-1) + origin
    keep = np.all((pts >= lo) & (pts <= hi), axis=-1)
    return pts[keep]


@dataclasses.dataclass(frozen=True)
class CellLattice:
    """Non-overlapping spherical cells of a common radius."""

    centers: np.ndarray
    radius: float
    region_id: np.ndarray

    def __len__(self):
        return len(self.centers)

    @functools.cached_property
    def separations(self) -> np.ndarray:
        d = self.centers[:, None, :] - self.centers[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", d, d))


def _lattice(region, radius: float) -> np.ndarray:
    lo, hi = region.bounds()
    pts = hcp_points(lo, hi, 2.0 * radius)
    return pts[region.contains(pts)]


def build_lattice(region, radius: float | None = None, target_count: int | None = None,
                  region_id: int = 0, max_iter: int = 40) -> CellLattice:
    """HCP lattice of spheres clipped to ``region`` (cell centers inside).

    With ``target_count`` the radius is tuned until the count is within 20%
    of the target; ``radius`` then only seeds the search.
    """
    if radius is not None and not radius > 0:
        raise ValueError("cell radius must be positive")
    if target_count is None:
        if radius is None:
            raise ValueError("give a radius or a target count")
        pts = _lattice(region, radius)
    else:
        if target_count < 1:
            raise ValueError("target count must be positive")
        # HCP packing: one cell per 4 sqrt(2) R^3 of volume
        r = radius or (region.volume / (4.0 * math.sqrt(2.0) * target_count)) ** (1 / 3)
        best = None
        for _ in range(max_iter):
            pts = _lattice(region, r)
            err = abs(len(pts) - target_count) / target_count
            if best is None or err < best[0]:
                best = (err, r, pts)
            if err <= 0.05:
                break
            r *= (max(len(pts), 1) / target_count) ** (1 / 3) if len(pts) else 0.7
        err, radius, pts = best
        if err > 0.2:
            raise ValueError(f"could not tune lattice to {target_count} cells (best {len(pts)})")
    if len(pts) == 0 or region.volume < 4.0 / 3.0 * math.pi * radius**3:
        raise ValueError("region too small for a single cell of this radius")
    return CellLattice(pts, float(radius), np.full(len(pts), region_id, dtype=np.int64))


# ---------------------------------------------------------------------------
# counting

@dataclasses.dataclass(frozen=True)
class CellCounts:
    """Observed and expected counts per cell.

    ``sel_sum`` and ``full_sum`` are the per-cell random sums of ``w phi``
    and ``phi``; ``norm`` scales them so the total over all randoms matches
    the observed galaxy total, giving ``n_sel`` and ``n_full``.
    ``random_cell`` gives the cell index of each random (-1 outside every
    cell), ``random_dist`` its distance and ``random_wphi`` its ``w phi``
    weight, kept for systematics attribution.
    """

    n_obs: np.ndarray
    sel_sum: np.ndarray
    full_sum: np.ndarray
    n_randoms: np.ndarray
    norm: float
    random_cell: np.ndarray | None = None
    random_dist: np.ndarray | None = None
    random_wphi: np.ndarray | None = None

    @property
    def n_sel(self) -> np.ndarray:
        return self.norm * self.sel_sum

    @property
    def n_full(self) -> np.ndarray:
        return self.norm * self.full_sum

    @property
    def completeness(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(self.full_sum > 0, self.sel_sum / self.full_sum, 0.0)
        return np.clip(c, 0.0, 1.0)

    @property
    def unconstrained(self) -> np.ndarray:
        return self.n_randoms == 0

    @property
    def wphi_total(self) -> float:
        return float(np.sum(self.random_wphi))

    def with_observed(self, n_obs, n_total: int) -> "CellCounts":
        """Same geometry with new observed counts, renormalized to ``n_total`` galaxies."""
        return dataclasses.replace(self, n_obs=np.asarray(n_obs, dtype=float),
                                   norm=n_total / self.wphi_total)


def _assign_cells(tree: cKDTree, pos, radius):
    if len(pos) == 0:
        return np.zeros(0, dtype=np.int64)
    d, idx = tree.query(pos, k=1, distance_upper_bound=radius)
    idx = np.where(np.isfinite(d) & (d <= radius), idx, -1)
    return idx.astype(np.int64)


def count_galaxies(catalog: Catalog, lattice: CellLattice, region: SurveyRegion) -> np.ndarray:
    """Galaxies inside each cell sphere, and the number of galaxies placed."""
    pos, _ = region.catalog_positions(catalog)
    cell = _assign_cells(cKDTree(lattice.centers), pos, lattice.radius)
    return np.bincount(cell[cell >= 0], minlength=len(lattice)).astype(float), len(pos)


def count_cells(catalog: Catalog, randoms: Catalog, lattice: CellLattice,
                selection: SelectionFunction, region: SurveyRegion,
                min_density_ratio: float = 50.0) -> CellCounts:
    """Fill cells with galaxies and expected counts from weighted randoms.

    ``n_obs`` counts galaxies within ``radius`` of each center. For each
    random ``j`` with weight ``w_j`` at distance ``d_j``, ``n_sel`` sums
    ``w_j phi(d_j)`` and ``n_full`` sums ``phi(d_j)`` over the cell, both
    scaled so that ``sum_j w_j phi(d_j)`` over all randoms equals the number
    of galaxies in the catalog.
    """
    tree = cKDTree(lattice.centers)
    ncell = len(lattice)
    gpos, _ = region.catalog_positions(catalog)
    gcell = _assign_cells(tree, gpos, lattice.radius)
    n_obs = np.bincount(gcell[gcell >= 0], minlength=ncell).astype(float)

    rpos, has = region.catalog_positions(randoms)
    rdist = np.sqrt(np.sum(rpos**2, axis=-1))
    w = randoms.weight[has]
    phi = selection.phi(rdist)
    rcell = _assign_cells(tree, rpos, lattice.radius)
    inc = rcell >= 0
    n_r = np.bincount(rcell[inc], minlength=ncell)
    wphi = w * phi
    total = float(np.sum(wphi))
    if total <= 0:
        raise ValueError("random catalog carries no selected weight")
    norm = len(gpos) / total
    sel_sum = np.bincount(rcell[inc], weights=wphi[inc], minlength=ncell)
    full_sum = np.bincount(rcell[inc], weights=phi[inc], minlength=ncell)
    ratio = inc.sum() / max(n_obs.sum(), 1.0)
    if n_obs.sum() > 0 and ratio < min_density_ratio:
        logger.warning("randoms are only %.1fx denser than galaxies in the cells", ratio)
    if np.any(n_r == 0):
        logger.warning("%d cells contain no randoms; treated as completeness 0", int(np.sum(n_r == 0)))
    return CellCounts(n_obs, sel_sum, full_sum, n_r, norm, rcell, rdist, wphi)


@dataclasses.dataclass(frozen=True)
class OverdensityVector:
    """Overdensities of the surviving cells and their shot-noise variances."""

    x: np.ndarray
    shot_noise: np.ndarray
    index: np.ndarray
    expected: np.ndarray

    def __len__(self):
        return self.x.size


def overdensities(counts: CellCounts, threshold: float = 0.75) -> OverdensityVector:
    """Keep cells with completeness ``>= threshold``; ``x = n_obs / n_sel - 1``.

    ``n_sel = completeness * n_full`` is the expected count under the actual
    coverage, so the shot-noise variance of ``x`` is ``1 / n_sel``.
    """
    if not 0 < threshold <= 1:
        raise ValueError("completeness threshold must lie in (0, 1]")
    comp = counts.completeness
    keep = (comp >= threshold) & (counts.n_sel > 0) & ~counts.unconstrained
    if not np.any(keep):
        raise ValueError(f"no cell reaches completeness {threshold}")
    idx = np.flatnonzero(keep)
    expected = counts.n_sel[idx]
    x = counts.n_obs[idx] / expected - 1.0
    return OverdensityVector(x, 1.0 / expected, idx, expected)


# ---------------------------------------------------------------------------
# covariance

@dataclasses.dataclass(frozen=True)
class CovarianceMatrix:
    """``C = S + N (+ C_sys)``; ``C`` is symmetrized exactly."""

    S: np.ndarray
    N: np.ndarray
    sys: np.ndarray | None = None

    @functools.cached_property
    def C(self) -> np.ndarray:
        c = self.S + np.diag(self.N)
        if self.sys is not None:
            c = c + self.sys
        return 0.5 * (c + c.T)

    def __len__(self):
        return self.N.size


class CovarianceModel:
    """Rebuilds the cell covariance for arbitrary parameters.

    Parameters
    ----------
    lattice : CellLattice
    xvec : OverdensityVector
        Supplies the surviving-cell index and the shot-noise diagonal.
    n_r : int
        Number of log-spaced radii in the smoothed correlation table.
    """

    def __init__(self, lattice: CellLattice, xvec: OverdensityVector, n_r: int = 384,
                 k_max: float = 10.0):
        self.radius = lattice.radius
        self.noise = np.asarray(xvec.shot_noise, dtype=float)
        sep = lattice.separations[np.ix_(xvec.index, xvec.index)]
        self.sep = sep
        self.r_max = max(float(sep.max()), 4.0 * self.radius) * 1.02
        self.r_grid = np.geomspace(0.25 * self.radius, self.r_max, n_r)
        self.k_max = k_max
        off = ~np.eye(len(sep), dtype=bool)
        self._off = off
        self._log_sep = np.log(np.where(off, sep, self.r_grid[0]))
        self._cache: dict = {}

    def xi_table(self, params) -> TabulatedXi:
        key = params
        tab = self._cache.get(key)
        if tab is None:
            tab = xi_from_pk(params, self.r_grid, smoothing_radius=self.radius, k_max=self.k_max)
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = tab
        return tab

    def signal(self, params, xi: TabulatedXi | None = None) -> np.ndarray:
        tab = self.xi_table(params) if xi is None else xi
        if self.sep.max() > tab.r_max * (1 + 1e-12):
            raise ValueError(f"cell separation {self.sep.max():.6g} exceeds xi table range {tab.r_max:.6g}")
        if tab.variance is None:
            raise ValueError("cell covariance needs a cell-smoothed xi table with its variance")
        s = np.interp(self._log_sep, np.log(tab.r), tab.xi)
        np.fill_diagonal(s, tab.variance)
        s *= kaiser_boost(params) if isinstance(params, SpectrumParams) else 1.0
        return 0.5 * (s + s.T)

    def covariance(self, params, sys: np.ndarray | None = None) -> CovarianceMatrix:
        return CovarianceMatrix(self.signal(params), self.noise.copy(), sys)


def build_covariance(lattice: CellLattice, xvec: OverdensityVector, params: SpectrumParams,
                     xi: TabulatedXi | None = None) -> CovarianceMatrix:
    """Signal from the cell-smoothed correlation plus diagonal shot noise.

    ``S_ij = kaiser * xi_cell(|c_i - c_j|)`` off the diagonal and the smoothed
    variance on it. ``xi`` may be supplied precomputed (it must carry the
    smoothing radius and variance); otherwise it is derived from ``params``.
    """
    model = CovarianceModel(lattice, xvec)
    return CovarianceMatrix(model.signal(params, xi), model.noise.copy())


# ---------------------------------------------------------------------------
# eigenmodes

@dataclasses.dataclass(frozen=True)
class KLBasis:
    """Eigenvalues (descending), eigenvectors (columns) and the kept-mode index."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    kept: np.ndarray

    @property
    def m(self) -> int:
        return int(self.kept.size)

    @property
    def B(self) -> np.ndarray:
        return self.eigenvectors[:, self.kept]

    def with_kept(self, kept) -> "KLBasis":
        return dataclasses.replace(self, kept=np.asarray(kept, dtype=np.int64))


def _keep_count(n: int, keep) -> int:
    if keep is None:
        return int(math.ceil(n / 3))
    if isinstance(keep, (float, np.floating)):
        if not 0 < keep <= 1:
            raise ValueError("kept fraction must lie in (0, 1]")
        return int(math.ceil(keep * n - 1e-9))
    k = int(keep)
    if not 1 <= k <= n:
        raise ValueError(f"kept count {k} outside [1, {n}]")
    return k


def kl_decompose(C, keep=None, check: bool = True) -> KLBasis:
    """Full symmetric eigendecomposition sorted by decreasing eigenvalue.

    ``keep`` is a fraction in (0, 1] or a mode count; the default keeps
    ``ceil(n/3)`` modes.
    """
    C = C.C if isinstance(C, CovarianceMatrix) else np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(C, C.T, rtol=0, atol=1e-12 * np.max(np.abs(C))):
        raise ValueError("covariance is not symmetric")
    try:
        lam, vec = linalg.eigh(C, driver="evd")
    except linalg.LinAlgError as exc:
        raise linalg.LinAlgError(f"eigendecomposition failed for {C.shape} matrix: {exc}") from exc
    order = np.argsort(lam, kind="stable")[::-1]
    lam, vec = lam[order], vec[:, order]
    if check:
        scale = max(np.max(np.abs(lam)), np.finfo(float).tiny)
        resid = np.linalg.norm(C @ vec - vec * lam, axis=0) / np.maximum(np.abs(lam), 1e-300)
        ortho = np.max(np.abs(vec.T @ vec - np.eye(len(lam))))
        bad = (np.abs(lam) > 1e-10 * scale) & (resid > 1e-6)
        if ortho > 1e-8 or np.any(bad):
            raise linalg.LinAlgError(
                f"eigendecomposition inaccurate: max |B^T B - I| = {ortho:.3g}, "
                f"max residual = {np.max(resid[np.abs(lam) > 1e-10 * scale]):.3g}")
    m = _keep_count(len(lam), keep)
    return KLBasis(lam, vec, np.arange(m))


def kl_project(x, basis: KLBasis) -> np.ndarray:
    """Coefficients ``y = B^T x`` of the kept modes."""
    x = x.x if isinstance(x, OverdensityVector) else np.asarray(x, dtype=float)
    if x.shape[0] != basis.eigenvectors.shape[0]:
        raise ValueError(f"data length {x.shape[0]} does not match basis dimension "
                         f"{basis.eigenvectors.shape[0]}")
    return basis.B.T @ x


def gaussian_loglike(y, Cp) -> float:
    """``-y^T C^-1 y / 2 - ln|C| / 2`` via Cholesky."""
    y = np.asarray(y, dtype=float)
    Cp = np.asarray(Cp, dtype=float)
    try:
        L = linalg.cholesky(Cp, lower=True)
    except linalg.LinAlgError:
        w = np.linalg.eigvalsh(Cp)
        raise linalg.LinAlgError(
            f"projected covariance not positive definite: eigenvalues in "
            f"[{w.min():.3g}, {w.max():.3g}], condition {abs(w.max() / w.min()) if w.min() else np.inf:.3g}")
    d = np.diag(L)
    if d.min() <= 0 or (d.max() / d.min()) ** 2 > 1e14:
        raise linalg.LinAlgError(f"projected covariance numerically singular "
                                 f"(condition ~ {(d.max() / d.min()) ** 2:.3g})")
    z = linalg.solve_triangular(L, y, lower=True)
    return float(-0.5 * z @ z - np.sum(np.log(d)))


def log_likelihood(y, params, basis: KLBasis, model: CovarianceModel, sys=None) -> float:
    """Subspace likelihood ``ln L`` of KL coefficients ``y`` under ``params``.

    The covariance is rebuilt for ``params`` and projected onto the kept
    fiducial modes, ``C' = B^T C(params) B``.
    """
    B = basis.B
    C = model.covariance(params, sys).C
    Cp = B.T @ C @ B
    return gaussian_loglike(y, 0.5 * (Cp + Cp.T))


# ---------------------------------------------------------------------------
# parameter grid

@dataclasses.dataclass
class LikelihoodSurface:
    """ln L over a parameter grid, its peak and the Fisher matrix there."""

    names: tuple
    axes: tuple
    lnL: np.ndarray
    peak_index: tuple
    fisher: np.ndarray
    boundary_peak: bool = False

    @property
    def peak(self) -> dict:
        return {n: float(a[i]) for n, a, i in zip(self.names, self.axes, self.peak_index)}

    @property
    def peak_lnL(self) -> float:
        return float(self.lnL[self.peak_index])

    def sigma(self) -> np.ndarray:
        """Marginal 1-sigma errors from the inverse Fisher matrix."""
        try:
            with np.errstate(invalid="ignore"):
                return np.sqrt(np.diag(np.linalg.inv(self.fisher)))
        except np.linalg.LinAlgError:
            return np.full(len(self.names), np.nan)

    def to_text(self) -> str:
        rows = [",".join(list(self.names) + ["lnL"])]
        for idx in np.ndindex(self.lnL.shape):
            vals = [repr(float(a[i])) for a, i in zip(self.axes, idx)]
            rows.append(",".join(vals + [repr(float(self.lnL[idx]))]))
        return "\n".join(rows) + "\n"

    def summary(self) -> str:
        lines = ["# peak " + " ".join(f"{n}={v!r}" for n, v in self.peak.items()),
                 f"# peak_lnL {self.peak_lnL!r}",
                 f"# boundary_peak {self.boundary_peak}"]
        for row in np.atleast_2d(self.fisher).tolist():
            lines.append("# fisher " + " ".join(repr(v) for v in row))
        for n, s, v in zip(self.names, self.sigma().tolist(), self.peak.values()):
            lines.append(f"# interval_1sigma {n} {v - s!r} {v + s!r}")
        return "\n".join(lines) + "\n"


def _fisher(fn, center: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Negative Hessian by central differences."""
    n = len(center)
    F = np.zeros((n, n))
    f0 = fn(center)
    for i in range(n):
        e = np.zeros(n)
        e[i] = steps[i]
        F[i, i] = -(fn(center + e) - 2 * f0 + fn(center - e)) / steps[i] ** 2
        for j in range(i):
            u = np.zeros(n)
            u[j] = steps[j]
            val = (fn(center + e + u) - fn(center + e - u) - fn(center - e + u) + fn(center - e - u))
            F[i, j] = F[j, i] = -val / (4 * steps[i] * steps[j])
    return F


def likelihood_grid(y, axes: Mapping[str, Sequence[float]], basis: KLBasis, model: CovarianceModel,
                    base: SpectrumParams = SpectrumParams(), sys=None,
                    fisher_step: float = 0.02, workers: int = 1) -> LikelihoodSurface:
    """Evaluate ``ln L`` at every node of the product grid ``axes``.

    The Fisher matrix is the negative Hessian at the peak node by central
    differences with steps of ``fisher_step`` times each axis spacing.
    Nodes are independent; with ``workers > 1`` they are evaluated in a
    thread pool and gathered in grid order, so the result does not depend
    on the worker count.
    """
    names = tuple(axes)
    grids = tuple(np.asarray(axes[n], dtype=float) for n in names)
    if not names or any(g.size == 0 for g in grids):
        raise ValueError("parameter axes must be non-empty")

    def fn(vec):
        return log_likelihood(y, base.replace(**dict(zip(names, map(float, vec)))), basis, model, sys)

    lnL = np.empty(tuple(g.size for g in grids))
    nodes = [np.array([g[i] for g, i in zip(grids, idx)]) for idx in np.ndindex(lnL.shape)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(fn, nodes))
    else:
        vals = [fn(v) for v in nodes]
    lnL[...] = np.reshape(vals, lnL.shape)
    peak = np.unravel_index(int(np.argmax(lnL)), lnL.shape)
    boundary = any(g.size > 1 and i in (0, g.size - 1) for g, i in zip(grids, peak))
    if boundary:
        warnings.warn(f"likelihood peak on grid boundary at {peak}", BoundaryPeakWarning, stacklevel=2)
    spacing = np.array([np.min(np.diff(g)) if g.size > 1 else np.nan for g in grids])
    center = np.array([g[i] for g, i in zip(grids, peak)])
    if np.all(np.isfinite(spacing)):
        F = _fisher(fn, center, fisher_step * spacing)
    else:
        F = np.full((len(names), len(names)), np.nan)
    return LikelihoodSurface(names, grids, lnL, tuple(int(i) for i in peak), F, boundary)


def refine_peak(y, name: str, bounds, basis: KLBasis, model: CovarianceModel,
                base: SpectrumParams = SpectrumParams(), sys=None, xtol: float = 1e-5) -> float:
    """Continuous maximum of ``ln L`` along one parameter (bounded Brent search)."""
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda v: -log_likelihood(y, base.replace(**{name: float(v)}), basis, model, sys),
                          bounds=bounds, method="bounded", options={"xatol": xtol})
    return float(res.x)


def combine_surfaces(surfaces: Sequence[LikelihoodSurface], fisher_step: float = 0.02) -> LikelihoodSurface:
    """Sum of independent-region surfaces on a common grid.

    Fisher matrices add when all regions peak at the same node; otherwise
    the summed matrix evaluated at each region's peak is an approximation
    and is reported as is.
    """
    surfaces = list(surfaces)
    first = surfaces[0]
    for s in surfaces[1:]:
        if s.names != first.names or any(a.shape != b.shape or not np.array_equal(a, b)
                                         for a, b in zip(s.axes, first.axes)):
            raise ValueError("surfaces use different parameter grids")
    lnL = np.sum([s.lnL for s in surfaces], axis=0)
    peak = np.unravel_index(int(np.argmax(lnL)), lnL.shape)
    boundary = any(g.size > 1 and i in (0, g.size - 1) for g, i in zip(first.axes, peak))
    F = np.sum([s.fisher for s in surfaces], axis=0)
    return LikelihoodSurface(first.names, first.axes, lnL, tuple(int(i) for i in peak), F, boundary)


# ---------------------------------------------------------------------------
# binary arrays

def save_array(path, array) -> None:
    """Little-endian float64 ``.npy`` file (its header records shape and dtype)."""
    np.save(path, np.ascontiguousarray(array, dtype="<f8"), allow_pickle=False)


def load_array(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)
