"""
Gridded angular two-point function.

Galaxies and masks are mapped onto a per-stripe grid, the windowed pair
counts DD, DR and RR over all lag vectors are obtained with zero-padded FFT
correlations, and the Landy-Szalay estimator is formed per lag. The scan
streak at zero cross-scan lag is censored before azimuthal averaging, and
per-stripe results are combined with their stripe-to-stripe scatter.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
from scipy import fft as sfft

from .catalog import Catalog, MaskSet, StripeLayout

__all__ = [
    "EmptyWindowError",
    "GridField",
    "PairCountSet",
    "CorrelationMap",
    "AngularCorrelation",
    "grid_catalog",
    "fft_paircounts",
    "direct_paircounts",
    "landy_szalay",
    "ls_estimator",
    "censor_scan_streak",
    "azimuthal_average",
    "combine_stripes",
    "log_bins",
    "stripe_correlation",
    "write_map",
    "read_map",
    "write_wtheta",
    "read_wtheta",
]

RR_FLOOR = 1e-12


class EmptyWindowError(ValueError):
    """The window (random) grid has no support."""


@dataclasses.dataclass(frozen=True)
class GridField:
    """Data counts ``D`` and window ``R`` on a stripe grid.

    Array axis 0 is cross-scan (``y``), axis 1 along-scan (``x``). ``origin``
    is the ``(y, x)`` stripe coordinate, in arcmin, of the corner of cell 0.
    """

    D: np.ndarray
    R: np.ndarray
    cell: float = 1.0
    origin: tuple = (0.0, 0.0)
    stripe: int | None = None
    empty: bool = False

    def __post_init__(self):
        if self.D.shape != self.R.shape or self.D.ndim != 2:
            raise ValueError("D and R must be 2D arrays of equal shape")
        if np.any(self.R < 0) or np.any(self.R > 1):
            raise ValueError("window values must lie in [0, 1]")

    @property
    def shape(self):
        return self.D.shape


def grid_catalog(catalog: Catalog, masks: MaskSet, stripe: int, layout: StripeLayout,
                 cell: float = 1.0, supersample: int = 1, weights=None) -> GridField:
    """Map one stripe's galaxies and masks onto a grid of ``cell`` arcmin.

    ``D`` counts galaxies that fall outside every mask. ``R`` is the unmasked
    fraction of each cell, estimated on ``supersample**2`` sub-points (0 or 1
    at the default of one point per cell), optionally times an angular
    completeness map ``weights(ra, dec)``.
    """
    if cell <= 0 or supersample < 1:
        raise ValueError("cell must be positive and supersample >= 1")
    ny = int(math.ceil(layout.width * 60.0 / cell - 1e-9))
    nx = int(math.ceil(layout.length * 60.0 / cell - 1e-9))
    # window from sub-cell sample points
    s = supersample
    sub = (np.arange(s) + 0.5) / s
    yy = ((np.arange(ny)[:, None] + sub[None, :]) * cell).ravel()
    xx = ((np.arange(nx)[:, None] + sub[None, :]) * cell).ravel()
    Y, X = np.meshgrid(yy, xx, indexing="ij")
    inside = (Y <= layout.width * 60.0) & (X <= layout.length * 60.0)
    ra, dec = layout.from_stripe(X / 60.0, Y / 60.0, stripe)
    good = inside.astype(float)
    if len(masks):
        good[masks.contains(ra, dec)] = 0.0
    if weights is not None:
        good *= weights(ra, dec)
    R = good.reshape(ny, s, nx, s).mean(axis=(1, 3))

    sel = catalog.stripe == stripe
    D = np.zeros((ny, nx))
    if not np.any(sel):
        return GridField(D, R, cell, (0.0, 0.0), stripe, empty=True)
    ra_g, dec_g = catalog.ra[sel], catalog.dec[sel]
    if len(masks):
        keep = ~masks.contains(ra_g, dec_g)
        ra_g, dec_g = ra_g[keep], dec_g[keep]
    x, y = layout.to_stripe(ra_g, dec_g, stripe)
    iy = np.floor(y * 60.0 / cell).astype(np.int64)
    ix = np.floor(x * 60.0 / cell).astype(np.int64)
    ok = (iy >= 0) & (iy < ny) & (ix >= 0) & (ix < nx)
    np.add.at(D, (iy[ok], ix[ok]), 1.0)
    return GridField(D, R, cell, (0.0, 0.0), stripe, empty=not np.any(ok))


# ---------------------------------------------------------------------------
# pair counts

@dataclasses.dataclass(frozen=True)
class PairCountSet:
    """Raw windowed pair sums over lag vectors and their normalizations.

    ``dd, dr, rr`` have shape ``(2*ly + 1, 2*lx + 1)`` with zero lag at the
    center; ``dr`` is symmetrized. Normalized counts divide by ``sum_d**2``,
    ``sum_d*sum_r`` and ``sum_r**2``.
    """

    dd: np.ndarray
    dr: np.ndarray
    rr: np.ndarray
    sum_d: float
    sum_r: float
    self_pairs: float
    cell: float = 1.0

    @property
    def DD(self):
        return self.dd / self.sum_d**2 if self.sum_d > 0 else np.zeros_like(self.dd)

    @property
    def DR(self):
        return self.dr / (self.sum_d * self.sum_r) if self.sum_d > 0 else np.zeros_like(self.dr)

    @property
    def RR(self):
        return self.rr / self.sum_r**2

    @property
    def max_lag(self):
        return (self.dd.shape[0] // 2, self.dd.shape[1] // 2)

    def lags(self):
        """Integer lag components ``(dy, dx)`` broadcastable to the arrays."""
        ly, lx = self.max_lag
        return np.arange(-ly, ly + 1)[:, None], np.arange(-lx, lx + 1)[None, :]

    def DD_pairs(self):
        """DD with self-pairs removed, normalized by ``N (N - 1)``.

        For integer counts this is the unbiased pair density of a Poisson
        (multinomial) sample, whereas ``DD`` carries a ``-1/N`` offset.
        """
        n = self.sum_d
        if n * (n - 1) <= 0:
            return np.zeros_like(self.dd)
        dd = self.dd.copy()
        ly, lx = self.max_lag
        dd[ly, lx] -= self.self_pairs
        return dd / (n * (n - 1))


def _crop(c: np.ndarray, ny, nx, ly, lx):
    iy = np.arange(-ly, ly + 1) % c.shape[0]
    ix = np.arange(-lx, lx + 1) % c.shape[1]
    return c[np.ix_(iy, ix)]


def fft_paircounts(grid: GridField, max_lag: int | tuple | None = None) -> PairCountSet:
    """Windowed pair sums by zero-padded FFT correlation.

    ``DD(l) = sum_x D(x) D(x+l)``, ``RR`` likewise, and ``DR`` the symmetrized
    cross sum. ``max_lag`` (cells) crops the returned lag range. Each axis of
    length ``n`` is padded to a fast FFT length of at least ``n + max_lag``,
    the shortest period for which lags up to ``max_lag`` do not wrap around.
    """
    D = np.asarray(grid.D, dtype=float)
    R = np.asarray(grid.R, dtype=float)
    sum_r = float(R.sum())
    if sum_r <= 0:
        raise EmptyWindowError("empty window: the random grid has no unmasked cells")
    ny, nx = D.shape
    ly, lx = (ny - 1, nx - 1)
    if max_lag is not None:
        my, mx = (max_lag, max_lag) if np.isscalar(max_lag) else max_lag
        ly, lx = min(ly, int(my)), min(lx, int(mx))
    shape = (sfft.next_fast_len(ny + ly, real=True), sfft.next_fast_len(nx + lx, real=True))
    fd = sfft.rfft2(D, s=shape)
    fr = sfft.rfft2(R, s=shape)
    # correlation sum_x a(x) b(x + l) has transform conj(A) B
    dd = _crop(sfft.irfft2(np.abs(fd) ** 2, s=shape), ny, nx, ly, lx)
    rr = _crop(sfft.irfft2(np.abs(fr) ** 2, s=shape), ny, nx, ly, lx)
    dr = _crop(sfft.irfft2((np.conj(fd) * fr).real, s=shape), ny, nx, ly, lx)
    del fd, fr
    # exact symmetry X(l) = X(-l); removes rounding asymmetry
    dd = 0.5 * (dd + dd[::-1, ::-1])
    rr = 0.5 * (rr + rr[::-1, ::-1])
    dr = 0.5 * (dr + dr[::-1, ::-1])
    return PairCountSet(dd, dr, rr, float(D.sum()), sum_r, float(np.sum(D)), grid.cell)


def _pair_sum(A: np.ndarray, B: np.ndarray, chunk: int = 1 << 22) -> np.ndarray:
    """``sum_x A(x) B(x + l)`` over every pair of nonzero cells, binned by lag."""
    ny, nx = A.shape
    width = 2 * nx - 1
    out = np.zeros((2 * ny - 1) * width)
    ia = np.flatnonzero(A)
    ib = np.flatnonzero(B)
    if ia.size == 0 or ib.size == 0:
        return out.reshape(2 * ny - 1, width)
    ya, xa = np.divmod(ia, nx)
    yb, xb = np.divmod(ib, nx)
    wa, wb = A.ravel()[ia], B.ravel()[ib]
    base_b = (yb + ny - 1) * width + xb + nx - 1
    step = max(1, chunk // ib.size)
    for s in range(0, ia.size, step):
        sl = slice(s, s + step)
        lag = base_b[None, :] - (ya[sl] * width + xa[sl])[:, None]
        out += np.bincount(lag.ravel(), weights=(wa[sl, None] * wb[None, :]).ravel(), minlength=out.size)
    return out.reshape(2 * ny - 1, width)


def direct_paircounts(grid: GridField) -> PairCountSet:
    """Quadratic-cost reference for :func:`fft_paircounts`: explicit sum over cell pairs."""
    D = np.asarray(grid.D, dtype=float)
    R = np.asarray(grid.R, dtype=float)
    dd = _pair_sum(D, D)
    rr = _pair_sum(R, R)
    dr = 0.5 * (_pair_sum(D, R) + _pair_sum(R, D))
    return PairCountSet(dd, dr, rr, float(D.sum()), float(R.sum()), float(D.sum()), grid.cell)


# ---------------------------------------------------------------------------
# estimator

def landy_szalay(DD, DR, RR, floor: float = RR_FLOOR):
    """``(DD - 2 DR + RR) / RR``; lags with ``RR < floor * max(RR)`` come back NaN."""
    DD, DR, RR = (np.asarray(a, dtype=float) for a in (DD, DR, RR))
    valid = RR >= floor * np.max(RR)
    w = np.full(RR.shape, np.nan)
    w[valid] = (DD[valid] - 2.0 * DR[valid] + RR[valid]) / RR[valid]
    return w, valid


@dataclasses.dataclass(frozen=True)
class CorrelationMap:
    """Per-lag estimator ``w`` with its ``RR`` weights and censor record.

    ``valid`` marks lags with enough window support; ``censored`` marks lags
    removed by :func:`censor_scan_streak`. ``censor_log`` lists the applied
    censor operations as ``(axis, half_width)``.
    """

    w: np.ndarray
    rr: np.ndarray
    valid: np.ndarray
    censored: np.ndarray
    cell: float = 1.0
    censor_log: tuple = ()
    dd_pairs: np.ndarray | None = None

    @property
    def usable(self):
        return self.valid & ~self.censored

    def lag_radius(self):
        ly, lx = self.w.shape[0] // 2, self.w.shape[1] // 2
        dy = np.arange(-ly, ly + 1)[:, None]
        dx = np.arange(-lx, lx + 1)[None, :]
        return np.hypot(dy, dx) * self.cell


def ls_estimator(pc: PairCountSet, floor: float = RR_FLOOR, exclude_self: bool = True) -> CorrelationMap:
    """Landy-Szalay estimator per lag.

    With ``exclude_self`` the zero-lag self-pairs are removed from DD and it
    is normalized by ``N (N - 1)``; otherwise the plain ``(sum D)^2``
    normalization is used.
    """
    DD = pc.DD_pairs() if exclude_self else pc.DD
    w, valid = landy_szalay(DD, pc.DR, pc.RR, floor)
    return CorrelationMap(w, pc.RR, valid, np.zeros(w.shape, dtype=bool), pc.cell, (),
                          0.5 * pc.dd)


def censor_scan_streak(cmap: CorrelationMap, axis: int = 1, half_width: int = 1) -> CorrelationMap:
    """Censor lags within ``half_width`` cells of the scan-direction lag axis.

    ``axis`` is the array axis along which the survey scans (1 = along-scan
    ``x`` for grids from :func:`grid_catalog`); lags whose perpendicular
    component satisfies ``|dl| <= half_width`` are censored.
    """
    if half_width < 0:
        raise ValueError("half_width must be >= 0")
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    perp = 1 - axis
    n = cmap.w.shape[perp]
    offs = np.abs(np.arange(n) - n // 2) <= half_width
    band = offs[:, None] if perp == 0 else offs[None, :]
    censored = cmap.censored | np.broadcast_to(band, cmap.w.shape)
    return dataclasses.replace(cmap, censored=censored,
                               censor_log=cmap.censor_log + ((axis, int(half_width)),))


# ---------------------------------------------------------------------------
# angular binning

@dataclasses.dataclass(frozen=True)
class AngularCorrelation:
    """Binned ``w(theta)``; ``theta`` is the RR-weighted mean lag in each bin."""

    edges: np.ndarray
    theta: np.ndarray
    w: np.ndarray
    err: np.ndarray
    npairs: np.ndarray

    @property
    def valid(self):
        return np.isfinite(self.w)

    def to_text(self) -> str:
        rows = ["theta_arcmin,w,err,npairs"]
        rows += [f"{t!r},{w!r},{e!r},{n!r}" for t, w, e, n in
                 zip(self.theta.tolist(), self.w.tolist(), self.err.tolist(), self.npairs.tolist())]
        return "\n".join(rows) + "\n"


def log_bins(theta_min: float = 1.0, theta_max: float = 75.0, n: int = 20) -> np.ndarray:
    """Logarithmic bin edges in arcmin (default up to half the stripe width)."""
    if not 0 < theta_min < theta_max or n < 1:
        raise ValueError("need 0 < theta_min < theta_max and n >= 1")
    return np.geomspace(theta_min, theta_max, n + 1)


def azimuthal_average(cmap: CorrelationMap, edges) -> AngularCorrelation:
    """RR-weighted mean of uncensored valid lags in each annulus.

    This equals the binned estimator ``sum(DD - 2DR + RR) / sum(RR)``. Bins
    without usable lags are NaN. ``err`` is the Poisson estimate
    ``(1 + w) / sqrt(npairs)`` for a single map.
    """
    edges = np.asarray(edges, dtype=float)
    r = cmap.lag_radius()
    use = cmap.usable & (r >= edges[0]) & (r < edges[-1])
    if not np.any(use):
        raise ValueError("every lag in the binning range is censored or invalid; "
                         "azimuthal average undefined")
    idx = np.digitize(r[use], edges) - 1
    nb = edges.size - 1
    wt = cmap.rr[use]
    sw = np.bincount(idx, weights=wt, minlength=nb)
    swx = np.bincount(idx, weights=wt * cmap.w[use], minlength=nb)
    swr = np.bincount(idx, weights=wt * r[use], minlength=nb)
    pairs = np.zeros(nb) if cmap.dd_pairs is None else np.bincount(
        idx, weights=cmap.dd_pairs[use], minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(sw > 0, swx / sw, np.nan)
        theta = np.where(sw > 0, swr / sw, np.sqrt(edges[:-1] * edges[1:]))
        err = np.where(pairs > 0, (1 + w) / np.sqrt(pairs), np.nan)
    return AngularCorrelation(edges, theta, w, err, pairs)


def combine_stripes(per_stripe: Sequence[AngularCorrelation]) -> AngularCorrelation:
    """Mean over stripes with the standard error of the stripe-to-stripe scatter."""
    per_stripe = list(per_stripe)
    if len(per_stripe) < 2:
        raise ValueError("combining needs at least two stripes")
    edges = per_stripe[0].edges
    for p in per_stripe[1:]:
        if p.edges.shape != edges.shape or not np.allclose(p.edges, edges, rtol=1e-12, atol=0):
            raise ValueError("stripes have mismatched theta binning")
    W = np.array([p.w for p in per_stripe])
    n = np.sum(np.isfinite(W), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, np.nansum(W, axis=0) / np.maximum(n, 1), np.nan)
        dev = np.where(np.isfinite(W), W - mean, 0.0)
        var = np.where(n > 1, np.sum(dev**2, axis=0) / np.maximum(n - 1, 1), np.nan)
        err = np.sqrt(var / n)
    theta = np.nanmean(np.array([p.theta for p in per_stripe]), axis=0)
    npairs = np.sum([p.npairs for p in per_stripe], axis=0)
    return AngularCorrelation(edges, theta, mean, err, npairs)


def stripe_correlation(catalog: Catalog, masks: MaskSet, stripe: int, layout: StripeLayout,
                       edges, cell: float = 1.0, half_width: int | None = 1,
                       exclude_self: bool = True, weights=None,
                       return_map: bool = False):
    """Grid, count, estimate, censor and bin one stripe."""
    edges = np.asarray(edges, dtype=float)
    grid = grid_catalog(catalog, masks, stripe, layout, cell, weights=weights)
    lag = int(math.ceil(edges[-1] / cell)) + 1
    pc = fft_paircounts(grid, max_lag=lag)
    cmap = ls_estimator(pc, exclude_self=exclude_self)
    if half_width is not None:
        cmap = censor_scan_streak(cmap, axis=1, half_width=half_width)
    wt = azimuthal_average(cmap, edges)
    return (wt, cmap) if return_map else wt


# ---------------------------------------------------------------------------
# text I/O

def write_map(cmap: CorrelationMap, path) -> None:
    """2D map as a flat text grid; censored and invalid lags are written as nan."""
    w = np.where(cmap.usable, cmap.w, np.nan)
    ny, nx = w.shape
    with open(path, "w") as fh:
        fh.write(f"# ny {ny} nx {nx} cell_arcmin {cmap.cell!r} center {ny // 2} {nx // 2}\n")
        for row in w.tolist():
            fh.write(" ".join(repr(v) for v in row) + "\n")


def read_map(path):
    with open(path) as fh:
        head = fh.readline().split()
        ny, nx, cell = int(head[2]), int(head[4]), float(head[6])
        w = np.loadtxt(fh, ndmin=2)
    if w.shape != (ny, nx):
        raise ValueError(f"{path}: map dimensions disagree with header")
    return w, cell


def write_wtheta(wt: AngularCorrelation, path) -> None:
    with open(path, "w") as fh:
        fh.write("# edges_arcmin " + " ".join(repr(e) for e in wt.edges.tolist()) + "\n")
        fh.write(wt.to_text())


def read_wtheta(path) -> AngularCorrelation:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# edges_arcmin"):
            raise ValueError(f"{path}: missing edges header")
        edges = np.array([float(v) for v in first.split()[2:]])
        fh.readline()
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return AngularCorrelation(edges, data[:, 0], data[:, 1], data[:, 2], data[:, 3])
