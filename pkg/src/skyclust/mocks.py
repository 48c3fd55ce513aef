"""
Synthetic catalogs: Gaussian and lognormal density fields on periodic grids,
Poisson sampling onto the stripe layout, unclustered randoms with angular
completeness weights, and per-(stripe, camcol) zero-point tables.

Every generator draws from its own generator derived from ``(seed, name)``
so results do not depend on call order.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
import numpy as np

from .catalog import Catalog, MaskSet, SelectionFunction, StripeLayout
from .cosmomodel import SpectrumParams, _as_power, redshift_at_distance

__all__ = [
    "GridResolutionError",
    "rng_for",
    "GridSpec",
    "MockConfig",
    "WeightMap",
    "AngularGeometry",
    "VolumeGeometry",
    "ZeroPointTable",
    "gaussian_field",
    "lognormal_field",
    "density_field",
    "poisson_sample",
    "expected_total",
    "thin_by_weight",
    "random_catalog",
    "draw_zeropoints",
    "load_zeropoints",
    "resample_distances",
    "power_periodogram",
]


class GridResolutionError(ValueError):
    """The grid is too coarse for the requested band limit."""


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the operation ``name`` under ``seed``."""
    key = zlib.crc32(name.encode())
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


# ---------------------------------------------------------------------------
# grids

@dataclasses.dataclass(frozen=True)
class GridSpec:
    """Regular periodic grid. ``origin`` is the corner of cell 0, in array-axis order."""

    shape: tuple
    spacing: float
    origin: tuple | None = None

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if not shape or any(n < 1 for n in shape):
            raise ValueError(f"bad grid shape {self.shape}")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "shape", shape)
        origin = (0.0,) * len(shape) if self.origin is None else tuple(float(o) for o in self.origin)
        if len(origin) != len(shape):
            raise ValueError("origin and shape dimensionality differ")
        object.__setattr__(self, "origin", origin)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.ndim

    def kmag(self) -> np.ndarray:
        ks = [2 * np.pi * np.fft.fftfreq(n, d=self.spacing) for n in self.shape]
        k2 = sum(np.meshgrid(*[k**2 for k in ks], indexing="ij", sparse=True))
        return np.sqrt(k2)

    def centers(self) -> np.ndarray:
        """Cell-center coordinates, shape ``(size, ndim)`` in C order."""
        axes = [o + (np.arange(n) + 0.5) * self.spacing for o, n in zip(self.origin, self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def nyquist(self) -> float:
        return math.pi / self.spacing


def _band_limit(grid: GridSpec, k_max: float | None) -> float:
    # at least 4 cells per retained wavelength
    limit = 0.5 * math.pi / grid.spacing
    if k_max is None:
        return limit
    if k_max > limit * (1 + 1e-12):
        raise GridResolutionError(
            f"grid spacing {grid.spacing:g} cannot carry k_max = {k_max:g}; "
            f"use spacing <= {0.5 * math.pi / k_max:.6g} (4 cells per wavelength)")
    return float(k_max)


def _grid_power(power, grid: GridSpec, k_max: float | None) -> np.ndarray:
    pk = _as_power(power)
    kmax = _band_limit(grid, k_max)
    k = np.broadcast_to(grid.kmag(), grid.shape)
    out = np.zeros(grid.shape)
    keep = (k > 0) & (k <= kmax)
    out[keep] = pk(k[keep])
    if np.any(out < 0) or not np.all(np.isfinite(out)):
        raise ValueError("power spectrum must be finite and non-negative")
    return out


def _white_modes(grid: GridSpec, seed: int, name: str) -> np.ndarray:
    white = rng_for(seed, name).standard_normal(grid.shape)
    return np.fft.fftn(white)


def _field_from_modes(modes: np.ndarray, grid_power: np.ndarray, cell_volume: float) -> np.ndarray:
    """Complex inverse transform of shaped white-noise modes (imaginary part ~ rounding)."""
    amp = np.sqrt(grid_power / cell_volume)
    return np.fft.ifftn(modes * amp)


def gaussian_field(power, grid: GridSpec, seed: int, k_max: float | None = None) -> np.ndarray:
    """Zero-mean Gaussian random field with spectrum ``power``.

    Parameters
    ----------
    power : SpectrumParams or callable
        Target spectrum in units of ``spacing**ndim``.
    grid : GridSpec
    seed : int
    k_max : float, optional
        Band limit; modes above it are zeroed. Defaults to a quarter of the
        sampling frequency (4 cells per wavelength), which is also the largest
        value allowed.

    Returns
    -------
    ndarray of shape ``grid.shape``
    """
    gp = _grid_power(power, grid, k_max)
    if not np.any(gp):
        return np.zeros(grid.shape)
    field = _field_from_modes(_white_modes(grid, seed, "gaussian_field"), gp, grid.cell_volume)
    return field.real


def lognormal_field(power, grid: GridSpec, seed: int, k_max: float | None = None) -> np.ndarray:
    """Lognormal overdensity whose grid two-point function matches ``power``.

    The target grid correlation ``xi`` is mapped to the Gaussian correlation
    ``ln(1 + xi)``; its spectrum (clipped at zero) drives a Gaussian field
    ``G`` and the result is ``exp(G - var(G)/2) - 1``.
    """
    gp = _grid_power(power, grid, k_max)
    if not np.any(gp):
        return np.zeros(grid.shape)
    xi = np.fft.ifftn(gp).real / grid.cell_volume
    if np.min(xi) <= -1:
        raise ValueError("target correlation reaches -1; lognormal mapping undefined")
    pg = np.fft.fftn(np.log1p(xi)).real * grid.cell_volume
    pg[(0,) * grid.ndim] = 0.0
    pg = np.clip(pg, 0.0, None)
    var = pg.sum() / (grid.cell_volume * grid.size)
    g = _field_from_modes(_white_modes(grid, seed, "lognormal_field"), pg, grid.cell_volume).real
    return np.expm1(g - 0.5 * var)


def density_field(power, grid: GridSpec, seed: int, method: str = "lognormal",
                  k_max: float | None = None) -> np.ndarray:
    """Overdensity with ``1 + delta >= 0``: lognormal (default) or clipped Gaussian."""
    if method == "lognormal":
        return lognormal_field(power, grid, seed, k_max)
    if method == "clip":
        return np.maximum(gaussian_field(power, grid, seed, k_max), -1.0)
    raise ValueError(f"unknown density method {method!r}")


def power_periodogram(field: np.ndarray, grid: GridSpec, edges) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shell-averaged periodogram ``|F|^2 V_cell / N``.

    Returns ``(k_mean, power, n_modes)`` per shell ``[edges[i], edges[i+1])``.
    """
    f = np.fft.fftn(field)
    p = (np.abs(f) ** 2 * grid.cell_volume / grid.size).ravel()
    k = np.broadcast_to(grid.kmag(), grid.shape).ravel()
    idx = np.digitize(k, edges) - 1
    nb = len(edges) - 1
    ok = (idx >= 0) & (idx < nb) & (k > 0)
    n = np.bincount(idx[ok], minlength=nb).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        pm = np.bincount(idx[ok], weights=p[ok], minlength=nb) / n
        km = np.bincount(idx[ok], weights=k[ok], minlength=nb) / n
    return km, pm, n


# ---------------------------------------------------------------------------
# angular completeness

@dataclasses.dataclass(frozen=True)
class WeightMap:
    """Piecewise-constant angular completeness.

    ``regions`` is a sequence of ``(Rect | Circle, value)``; later entries
    override earlier ones, and points in no region take ``default``.
    """

    regions: tuple = ()
    default: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple((r, float(v)) for r, v in self.regions))
        for _, v in self.regions:
            if not 0 <= v <= 1:
                raise ValueError("weights must lie in [0, 1]")
        if not 0 <= self.default <= 1:
            raise ValueError("weights must lie in [0, 1]")

    @classmethod
    def from_masks(cls, masks: MaskSet, default: float = 1.0) -> "WeightMap":
        return cls(tuple((r, 0.0) for r in masks), default)

    def __call__(self, ra, dec) -> np.ndarray:
        ra = np.asarray(ra, dtype=float)
        w = np.full(ra.shape, self.default)
        for region, value in self.regions:
            w[region.contains(ra, dec)] = value
        return w


def thin_by_weight(catalog: Catalog, weights: WeightMap, seed: int) -> Catalog:
    """Keep each record with probability ``w(ra, dec)`` and store ``w`` as its weight."""
    w = weights(catalog.ra, catalog.dec)
    u = rng_for(seed, "thin_by_weight").random(len(catalog))
    keep = u < w
    cols = {k: v[keep] for k, v in catalog.columns().items()}
    cols["weight"] = w[keep]
    return Catalog(**cols, validate=False)


# ---------------------------------------------------------------------------
# geometries mapping grid coordinates to the sky

@dataclasses.dataclass(frozen=True)
class AngularGeometry:
    """Flat grid over one stripe, arcmin units.

    Array axis 0 is cross-scan (``y``), axis 1 is along-scan (``x``). The grid
    extends ``pad`` arcmin beyond the stripe on every side so periodic
    wrap-around does not correlate opposite stripe edges.
    """

    layout: StripeLayout
    stripe: int
    pad: float = 0.0

    def grid(self, spacing: float = 1.0) -> GridSpec:
        ny = int(math.ceil((self.layout.width * 60 + 2 * self.pad) / spacing))
        nx = int(math.ceil((self.layout.length * 60 + 2 * self.pad) / spacing))
        return GridSpec((ny, nx), spacing, (-self.pad, -self.pad))

    def to_sky(self, pos: np.ndarray):
        ra, dec = self.layout.from_stripe(pos[:, 1] / 60.0, pos[:, 0] / 60.0, self.stripe)
        return ra, dec, None

    def selection_at(self, centers, selection):
        if selection is not None:
            raise ValueError("radial selection needs a volume geometry")
        return np.ones(len(centers))


@dataclasses.dataclass(frozen=True)
class VolumeGeometry:
    """Comoving Cartesian box (Mpc/h) with the observer at the origin.

    The x axis points to ``(ra_center, 0)`` so the survey wedge sits close to
    the x axis.
    """

    layout: StripeLayout
    d_min: float
    d_max: float
    omega_m: float = 0.3

    @property
    def ra_center(self) -> float:
        lo, hi = self.layout.ra_bounds(self.layout.stripe_ids)
        return 0.5 * (float(np.min(lo)) + float(np.max(hi)))

    def sky_to_cartesian(self, ra, dec, dist):
        a = np.radians(np.asarray(ra, dtype=float) - self.ra_center)
        b = np.radians(np.asarray(dec, dtype=float))
        dist = np.asarray(dist, dtype=float)
        return np.stack([dist * np.cos(b) * np.cos(a), dist * np.cos(b) * np.sin(a),
                         dist * np.sin(b)], axis=-1)

    def cartesian_to_sky(self, pos):
        pos = np.asarray(pos, dtype=float)
        dist = np.sqrt(np.sum(pos**2, axis=-1))
        ra = (np.degrees(np.arctan2(pos[..., 1], pos[..., 0])) + self.ra_center) % 360.0
        dec = np.degrees(np.arcsin(np.clip(pos[..., 2] / np.where(dist > 0, dist, 1.0), -1, 1)))
        return ra, dec, dist

    def grid(self, spacing: float, pad: float = 0.0) -> GridSpec:
        """Smallest grid that covers the footprint wedge between ``d_min`` and ``d_max``."""
        lo, hi = self.layout.ra_bounds(self.layout.stripe_ids)
        ra = np.linspace(float(np.min(lo)), float(np.max(hi)), 65)
        dec_lo = self.layout.dec_start
        dec_hi = dec_lo + self.layout.n_stripes * self.layout.width
        dec = np.linspace(dec_lo, dec_hi, 65)
        rr, dd, cc = np.meshgrid(ra, dec, [self.d_min, self.d_max], indexing="ij")
        pts = self.sky_to_cartesian(rr, dd, cc).reshape(-1, 3)
        # the far cap bulges beyond its corners; its apex is at distance d_max
        pts = np.vstack([pts, self.sky_to_cartesian(self.ra_center, 0.5 * (dec_lo + dec_hi), self.d_max)])
        lo3 = pts.min(axis=0) - pad - spacing
        hi3 = pts.max(axis=0) + pad + spacing
        shape = tuple(int(math.ceil((h - l) / spacing)) for l, h in zip(lo3, hi3))
        return GridSpec(shape, spacing, tuple(lo3))

    def to_sky(self, pos: np.ndarray):
        return self.cartesian_to_sky(pos)

    def selection_at(self, centers, selection):
        if selection is None:
            return np.ones(len(centers))
        return selection.phi(np.sqrt(np.sum(centers**2, axis=-1)))


# ---------------------------------------------------------------------------
# Poisson sampling

def _cell_intensity(field, grid, mean_density, geometry, selection):
    if np.shape(field) != grid.shape:
        raise ValueError("field shape does not match grid")
    one_plus = np.clip(1.0 + np.asarray(field, dtype=float), 0.0, None).ravel()
    phi = geometry.selection_at(grid.centers(), selection)
    return mean_density * grid.cell_volume * one_plus * phi


def expected_total(field, grid: GridSpec, mean_density: float, geometry, selection=None) -> float:
    """Expected number of points drawn by :func:`poisson_sample` before the footprint cut."""
    return float(np.sum(_cell_intensity(field, grid, mean_density, geometry, selection)))


def poisson_sample(field, grid: GridSpec, mean_density: float, seed: int, geometry,
                   selection: SelectionFunction | None = None, weights: WeightMap | None = None,
                   mag_range=(14.0, 21.0), keep_outside: bool = False) -> Catalog:
    """Poisson-sample a density grid into a catalog.

    Cell ``c`` receives ``Poisson(n V (1 + delta_c) phi(d_c))`` points placed
    uniformly inside it; points are then mapped to the sky, cut to the stripe
    footprint and tagged with their ``(stripe, camcol, field)`` ids. With a
    weight map, records are additionally thinned by angular completeness.
    """
    if mean_density < 0:
        raise ValueError("mean density must be non-negative")
    if mean_density == 0:
        return Catalog.empty()
    rng = rng_for(seed, "poisson_sample")
    lam = _cell_intensity(field, grid, mean_density, geometry, selection)
    counts = rng.poisson(lam)
    n = int(counts.sum())
    cells = np.repeat(np.arange(grid.size), counts)
    corner = np.stack(np.unravel_index(cells, grid.shape), axis=-1) * grid.spacing + np.asarray(grid.origin)
    pos = corner + rng.random((n, grid.ndim)) * grid.spacing
    ra, dec, dist = geometry.to_sky(pos)
    inside = geometry.layout.contains(ra, dec) | keep_outside
    if dist is not None and selection is not None:
        inside &= (dist >= selection.d_min) & (dist <= selection.d_max)
    ra, dec = ra[inside], dec[inside]
    st, cc, fd = geometry.layout.assign(ra, dec, clip=keep_outside)
    mag_u = rng.random(n)[inside]
    if dist is not None:
        dist = dist[inside]
        z = redshift_at_distance(dist, geometry.omega_m)
        # apparent magnitude of a luminosity tag drawn near the sample limit
        mag = mag_range[1] - 2.5 * np.log10(1.0 + 9.0 * mag_u) + 5 * np.log10(dist / geometry.d_max)
    else:
        z = None
        mag = mag_range[0] + (mag_range[1] - mag_range[0]) * mag_u
    cat = Catalog(ra % 360.0, dec, z, mag, st, cc, fd, np.ones(ra.size), validate=False)
    if weights is not None:
        cat = thin_by_weight(cat, weights, seed)
    return cat


# ---------------------------------------------------------------------------
# randoms

def random_catalog(layout: StripeLayout, count: int, seed: int, weights: WeightMap | None = None,
                   thin: bool = True, pad_deg: float = 0.0, dist_range=None,
                   omega_m: float = 0.3, batch: int = 1 << 20) -> Catalog:
    """Points uniform on the sphere over the stripe footprint.

    ``count`` points are generated inside the footprint (expanded by
    ``pad_deg``), uniform in right ascension and in ``sin(dec)``. Each point
    carries the completeness ``w(ra, dec)`` as its weight; points in the
    padding get weight 0. With ``thin`` the points are kept with probability
    ``w``. With ``dist_range = (d_lo, d_hi)`` distances are drawn uniform in
    volume and stored as redshifts.
    """
    if count <= 0:
        raise ValueError("random count must be positive")
    rng = rng_for(seed, "random_catalog")
    ra_lo, ra_hi = layout.ra_bounds(layout.stripe_ids)
    cosmin = float(np.min(layout.cos_center(layout.stripe_ids)))
    pad_ra = pad_deg / max(cosmin, 1e-6)
    a0, a1 = float(np.min(ra_lo)) - pad_ra, float(np.max(ra_hi)) + pad_ra
    d0 = max(layout.dec_start - pad_deg, -90.0)
    d1 = min(layout.dec_start + layout.n_stripes * layout.width + pad_deg, 90.0)
    s0, s1 = math.sin(math.radians(d0)), math.sin(math.radians(d1))
    ra_parts, dec_parts, got = [], [], 0
    while got < count:
        ra = rng.uniform(a0, a1, batch)
        dec = np.degrees(np.arcsin(rng.uniform(s0, s1, batch)))
        if pad_deg > 0:
            ok = _near_footprint(layout, ra, dec, pad_deg)
        else:
            ok = layout.contains(ra, dec)
        ra, dec = ra[ok], dec[ok]
        ra_parts.append(ra[: count - got])
        dec_parts.append(dec[: count - got])
        got += min(ra.size, count - got)
    ra = np.concatenate(ra_parts)
    dec = np.concatenate(dec_parts)
    inside = layout.contains(ra, dec)
    w = np.ones(count) if weights is None else weights(ra, dec)
    w = np.where(inside, w, 0.0)
    st, cc, fd = layout.assign(ra, dec, clip=True)
    z = None
    if dist_range is not None:
        lo, hi = dist_range
        dist = np.cbrt(lo**3 + (hi**3 - lo**3) * rng.random(count))
        z = redshift_at_distance(dist, omega_m)
    cat = Catalog(ra % 360.0, dec, z, np.zeros(count), st, cc, fd, w, validate=False)
    if thin:
        keep = rng.random(count) < w
        cat = cat.take(keep)
    return cat


def _near_footprint(layout: StripeLayout, ra, dec, pad_deg):
    # within pad_deg of the footprint, measured in the local tangent plane
    top = layout.dec_start + layout.n_stripes * layout.width
    ok = (dec >= layout.dec_start - pad_deg) & (dec <= top + pad_deg)
    dc = np.clip(dec, layout.dec_start, top)
    st = layout.stripe_of(dc)
    lo, hi = layout.ra_bounds(st)
    cosd = np.cos(np.radians(dec))
    dra = np.maximum(np.maximum(lo - ra, ra - hi), 0.0) * cosd
    return ok & (dra <= pad_deg)


# ---------------------------------------------------------------------------
# zero points

@dataclasses.dataclass(frozen=True)
class ZeroPointTable:
    """Magnitude shift per ``(stripe, camcol)`` unit."""

    stripe: np.ndarray
    camcol: np.ndarray
    delta_m: np.ndarray

    def __post_init__(self):
        for name in ("stripe", "camcol"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        object.__setattr__(self, "delta_m", np.asarray(self.delta_m, dtype=float))
        keys = list(zip(self.stripe.tolist(), self.camcol.tolist()))
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (stripe, camcol) rows")

    def __len__(self):
        return self.delta_m.size

    def scaled(self, factor: float) -> "ZeroPointTable":
        return ZeroPointTable(self.stripe, self.camcol, factor * self.delta_m)

    def lookup(self, stripe, camcol) -> np.ndarray:
        table = {k: v for k, v in zip(zip(self.stripe.tolist(), self.camcol.tolist()), self.delta_m.tolist())}
        return np.array([table[(s, c)] for s, c in zip(np.ravel(stripe).tolist(), np.ravel(camcol).tolist())])

    def to_text(self) -> str:
        rows = ["stripe,camcol,delta_m"]
        rows += [f"{s},{c},{d!r}" for s, c, d in zip(self.stripe.tolist(), self.camcol.tolist(), self.delta_m.tolist())]
        return "\n".join(rows) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


def load_zeropoints(path) -> ZeroPointTable:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ZeroPointTable(data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2])


def draw_zeropoints(layout: StripeLayout, std: float, seed: int) -> ZeroPointTable:
    """Independent Gaussian magnitude shifts, one per ``(stripe, camcol)``."""
    if std < 0:
        raise ValueError("zero-point std must be non-negative")
    units = np.array(layout.units(), dtype=np.int64).reshape(-1, 2)
    z = rng_for(seed, "draw_zeropoints").standard_normal(len(units))
    return ZeroPointTable(units[:, 0], units[:, 1], std * z)


def resample_distances(catalog: Catalog, zp: ZeroPointTable, selection: SelectionFunction,
                       seed: int, omega_m: float = 0.3) -> Catalog:
    """Redraw every galaxy distance from its unit's zero-point-modulated radial distribution."""
    rng = rng_for(seed, "resample_distances")
    dm = zp.lookup(catalog.stripe, catalog.camcol)
    dist = np.empty(len(catalog))
    for shift in np.unique(dm):
        sel = dm == shift
        dist[sel] = selection.sample_distances(int(sel.sum()), rng, delta_m=float(shift))
    cols = catalog.columns()
    cols["redshift"] = redshift_at_distance(dist, omega_m)
    return Catalog(**cols, validate=False)


# ---------------------------------------------------------------------------
# configuration

@dataclasses.dataclass(frozen=True)
class MockConfig:
    """Parameters of a mock realization.

    ``mean_density`` is per arcmin^2 for angular mocks and per (Mpc/h)^3 for
    volume mocks; ``spacing`` is in the same length unit.
    """

    params: SpectrumParams = SpectrumParams()
    n_stripes: int = 10
    stripe_width: float = 2.5
    stripe_length: float = 10.0
    mean_density: float = 1.0
    spacing: float = 1.0
    method: str = "lognormal"
    seed: int = 0

    def __post_init__(self):
        if self.stripe_width <= 0 or self.n_stripes < 1:
            raise ValueError("invalid stripe geometry")
        if self.mean_density < 0:
            raise ValueError("mean density must be non-negative")

    def layout(self, **kw) -> StripeLayout:
        return StripeLayout(n_stripes=self.n_stripes, width=self.stripe_width,
                            length=self.stripe_length, **kw)
