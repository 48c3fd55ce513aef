"""
File-backed galaxy catalogs, survey stripe geometry, masks, predicate
subsamples, cone counts and radial selection-function tables.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "CATALOG_COLUMNS",
    "CatalogFormatError",
    "Catalog",
    "StripeLayout",
    "Rect",
    "Circle",
    "MaskSet",
    "SubsampleSpec",
    "SelectionFunction",
    "SkyIndex",
    "angular_separation",
    "load_catalog",
    "write_catalog",
    "catalog_to_text",
    "apply_subsample",
    "apply_masks",
    "cone_count",
    "load_masks",
    "write_masks",
    "load_selection",
    "write_selection",
]

logger = logging.getLogger(__name__)

CATALOG_COLUMNS = ("ra", "dec", "redshift", "mag", "stripe", "camcol", "field", "weight")
_INT_COLUMNS = ("stripe", "camcol", "field")
N_CAMCOLS = 12


class CatalogFormatError(ValueError):
    """The input file cannot be interpreted as a catalog, mask or table."""


def angular_separation(ra1, dec1, ra2, dec2):
    """Great-circle separation in radians (haversine form), inputs in degrees."""
    ra1, dec1, ra2, dec2 = (np.radians(np.asarray(a, dtype=float)) for a in (ra1, dec1, ra2, dec2))
    s = (np.sin(0.5 * (dec2 - dec1)) ** 2
         + np.cos(dec1) * np.cos(dec2) * np.sin(0.5 * (ra2 - ra1)) ** 2)
    return 2.0 * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0)))


# ---------------------------------------------------------------------------
# catalog container

class Catalog:
    """Immutable column store of galaxy records.

    ``redshift`` is a masked array; masked entries are records without a
    redshift. Integer unit ids follow ``(stripe, camcol, field)``.
    """

    __slots__ = ("ra", "dec", "redshift", "mag", "stripe", "camcol", "field", "weight",
                 "n_rejected", "_index")

    def __init__(self, ra, dec, redshift=None, mag=None, stripe=None, camcol=None,
                 field=None, weight=None, n_rejected: int = 0, validate: bool = True):
        ra = np.asarray(ra, dtype=float).ravel()
        n = ra.size
        cols = {
            "ra": ra,
            "dec": np.asarray(dec, dtype=float).ravel(),
            "mag": np.zeros(n) if mag is None else np.asarray(mag, dtype=float).ravel(),
            "stripe": np.zeros(n, dtype=np.int64) if stripe is None else np.asarray(stripe, dtype=np.int64).ravel(),
            "camcol": np.ones(n, dtype=np.int64) if camcol is None else np.asarray(camcol, dtype=np.int64).ravel(),
            "field": np.zeros(n, dtype=np.int64) if field is None else np.asarray(field, dtype=np.int64).ravel(),
            "weight": np.ones(n) if weight is None else np.asarray(weight, dtype=float).ravel(),
        }
        if redshift is None:
            z = np.ma.masked_all(n, dtype=float)
        elif isinstance(redshift, np.ma.MaskedArray):
            z = np.ma.array(redshift, dtype=float, copy=True).ravel()
            z.mask = np.ma.getmaskarray(redshift).ravel()
        else:
            z = np.ma.masked_invalid(np.asarray(redshift, dtype=float).ravel())
        cols["redshift"] = z
        for name, arr in cols.items():
            if arr.shape != (n,):
                raise ValueError(f"column {name!r} has length {arr.shape}, expected {n}")
        if validate:
            bad = ~_valid_rows(cols)
            if np.any(bad):
                raise ValueError(f"{int(bad.sum())} records violate catalog invariants")
        for name, arr in cols.items():
            if isinstance(arr, np.ma.MaskedArray):
                arr.data.setflags(write=False)
                arr.mask.setflags(write=False)
            else:
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n_rejected", int(n_rejected))
        object.__setattr__(self, "_index", None)

    def __setattr__(self, name, value):
        raise AttributeError("Catalog is immutable")

    def __len__(self):
        return self.ra.size

    def __repr__(self):
        return f"Catalog(n={len(self)}, rejected={self.n_rejected})"

    @classmethod
    def empty(cls) -> "Catalog":
        return cls(np.zeros(0), np.zeros(0))

    @property
    def has_redshift(self) -> np.ndarray:
        return ~np.ma.getmaskarray(self.redshift)

    def columns(self) -> dict:
        return {name: getattr(self, name) for name in CATALOG_COLUMNS}

    def take(self, selector) -> "Catalog":
        """Subset by boolean mask or integer index array."""
        cols = {name: arr[selector] for name, arr in self.columns().items()}
        return Catalog(**cols, validate=False)

    def index(self) -> "SkyIndex":
        if self._index is None:
            object.__setattr__(self, "_index", SkyIndex(self.ra, self.dec))
        return self._index

    def equals(self, other: "Catalog") -> bool:
        """Bit-identical comparison of every column, including absent redshifts."""
        if len(self) != len(other):
            return False
        for name in CATALOG_COLUMNS:
            a, b = getattr(self, name), getattr(other, name)
            if name == "redshift":
                if not np.array_equal(np.ma.getmaskarray(a), np.ma.getmaskarray(b)):
                    return False
                keep = ~np.ma.getmaskarray(a)
                if not np.array_equal(a.data[keep].view(np.uint64), b.data[keep].view(np.uint64)):
                    return False
            elif not np.array_equal(a, b):
                return False
        return True

    @staticmethod
    def concatenate(parts: Sequence["Catalog"]) -> "Catalog":
        parts = list(parts)
        if not parts:
            return Catalog.empty()
        cols = {}
        for name in CATALOG_COLUMNS:
            arrays = [getattr(p, name) for p in parts]
            cols[name] = np.ma.concatenate(arrays) if name == "redshift" else np.concatenate(arrays)
        return Catalog(**cols, validate=False)


def _valid_rows(cols) -> np.ndarray:
    ok = np.isfinite(cols["ra"]) & (cols["ra"] >= 0) & (cols["ra"] < 360)
    ok &= np.isfinite(cols["dec"]) & (cols["dec"] >= -90) & (cols["dec"] <= 90)
    ok &= np.isfinite(cols["mag"])
    ok &= np.isfinite(cols["weight"]) & (cols["weight"] >= 0) & (cols["weight"] <= 1)
    ok &= (cols["camcol"] >= 1) & (cols["camcol"] <= N_CAMCOLS)
    z = cols["redshift"]
    zmask = np.ma.getmaskarray(z)
    zdata = np.ma.getdata(z)
    ok &= zmask | (np.isfinite(zdata) & (zdata >= 0))
    return ok


# ---------------------------------------------------------------------------
# catalog text I/O

def _fmt(x: float) -> str:
    return repr(float(x))


def catalog_to_text(catalog: Catalog) -> str:
    buf = io.StringIO()
    buf.write(",".join(CATALOG_COLUMNS) + "\n")
    zmask = np.ma.getmaskarray(catalog.redshift)
    cols = [catalog.ra.tolist(), catalog.dec.tolist(), np.ma.getdata(catalog.redshift).tolist(),
            catalog.mag.tolist(), catalog.stripe.tolist(), catalog.camcol.tolist(),
            catalog.field.tolist(), catalog.weight.tolist()]
    for i, (ra, dec, z, mag, st, cc, fd, w) in enumerate(zip(*cols)):
        zs = "" if zmask[i] else repr(z)
        buf.write(f"{ra!r},{dec!r},{zs},{mag!r},{st},{cc},{fd},{w!r}\n")
    return buf.getvalue()


def write_catalog(catalog: Catalog, path) -> None:
    """Write the catalog as comma-separated text with a named header.

    Floats are written with their shortest round-trip representation so a
    subsequent :func:`load_catalog` reproduces every bit.
    """
    with open(path, "w", newline="") as fh:
        fh.write(catalog_to_text(catalog))


def load_catalog(path, delimiter: str = ",") -> Catalog:
    """Read a delimiter-separated catalog file.

    Rows that cannot be parsed or that violate the record invariants are
    skipped and counted in ``Catalog.n_rejected``. A header missing one of the
    required columns is a hard failure (:class:`CatalogFormatError`).
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CatalogFormatError(f"{path}: empty file, no header") from None
        missing = [c for c in CATALOG_COLUMNS if c not in header]
        if missing:
            raise CatalogFormatError(f"{path}: header lacks required columns {missing}")
        pos = [header.index(c) for c in CATALOG_COLUMNS]
        width = len(header)
        floats: list[tuple] = []
        rejected = 0
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                rejected += 1
                continue
            try:
                ra, dec, z, mag, st, cc, fd, w = (row[p].strip() for p in pos)
                floats.append((float(ra), float(dec), float(z) if z else math.nan,
                               float(mag), int(st), int(cc), int(fd), float(w), not z))
            except ValueError:
                rejected += 1
    if floats:
        ra, dec, z, mag, st, cc, fd, w, zabsent = map(np.array, zip(*floats))
    else:
        ra = dec = z = mag = w = np.zeros(0)
        st = cc = fd = np.zeros(0, dtype=np.int64)
        zabsent = np.zeros(0, dtype=bool)
    cols = dict(ra=ra, dec=dec, redshift=np.ma.array(z, mask=zabsent.astype(bool)),
                mag=mag, stripe=st, camcol=cc, field=fd, weight=w)
    # a present-but-NaN redshift is malformed, not absent
    zbad = ~zabsent.astype(bool) & ~np.isfinite(z)
    ok = _valid_rows(cols) & ~zbad
    rejected += int((~ok).sum())
    if rejected:
        logger.warning("%s: rejected %d malformed rows", path, rejected)
    cols = {k: v[ok] for k, v in cols.items()}
    return Catalog(**cols, n_rejected=rejected, validate=False)


# ---------------------------------------------------------------------------
# survey geometry

@dataclasses.dataclass(frozen=True)
class StripeLayout:
    """Idealized stripe geometry.

    Stripes are adjacent declination bands of width ``width`` degrees stacked
    upwards from ``dec_start``. Stripe ``k`` spans ``length`` degrees of arc
    along its central parallel starting at ``ra_start``, so its right
    ascension extent is ``length / cos(dec_center)``. Within a stripe the
    tangent-plane coordinates are ``x`` (scan direction, along right
    ascension) and ``y`` (cross-scan), both in degrees from the stripe corner.
    Each stripe is divided into ``n_camcols`` equal bands in ``y`` and into
    fields of ``field_length`` degrees along ``x``.
    """

    n_stripes: int = 10
    width: float = 2.5
    length: float = 10.0
    ra_start: float = 150.0
    dec_start: float | None = None
    first_stripe: int = 10
    n_camcols: int = N_CAMCOLS
    field_length: float = 0.25

    def __post_init__(self):
        if self.n_stripes < 1 or self.width <= 0 or self.length <= 0:
            raise ValueError("layout needs at least one stripe of positive size")
        if self.dec_start is None:
            object.__setattr__(self, "dec_start", -0.5 * self.n_stripes * self.width)
        top = self.dec_start + self.n_stripes * self.width
        if self.dec_start < -90 or top > 90:
            raise ValueError("stripes extend beyond the poles")
        if self.n_camcols < 1 or self.n_camcols > N_CAMCOLS:
            raise ValueError("n_camcols must be between 1 and 12")

    @property
    def stripe_ids(self) -> np.ndarray:
        return np.arange(self.first_stripe, self.first_stripe + self.n_stripes)

    def _k(self, stripe) -> np.ndarray:
        k = np.asarray(stripe) - self.first_stripe
        if np.any((k < 0) | (k >= self.n_stripes)):
            raise ValueError(f"stripe id outside layout: {stripe}")
        return k

    def dec_bounds(self, stripe):
        k = self._k(stripe)
        lo = self.dec_start + k * self.width
        return lo, lo + self.width

    def cos_center(self, stripe) -> np.ndarray:
        lo, hi = self.dec_bounds(stripe)
        return np.cos(np.radians(0.5 * (lo + hi)))

    def ra_bounds(self, stripe):
        return self.ra_start, self.ra_start + self.length / self.cos_center(stripe)

    def stripe_of(self, dec) -> np.ndarray:
        """Stripe id for each declination; -1 outside the layout."""
        dec = np.asarray(dec, dtype=float)
        k = np.floor((dec - self.dec_start) / self.width).astype(np.int64)
        k = np.where(dec == self.dec_start + self.n_stripes * self.width, self.n_stripes - 1, k)
        return np.where((k >= 0) & (k < self.n_stripes), k + self.first_stripe, -1)

    def to_stripe(self, ra, dec, stripe):
        """Tangent-plane ``(x, y)`` in degrees within the given stripe."""
        lo, _ = self.dec_bounds(stripe)
        x = (np.asarray(ra, dtype=float) - self.ra_start) * self.cos_center(stripe)
        y = np.asarray(dec, dtype=float) - lo
        return x, y

    def from_stripe(self, x, y, stripe):
        lo, _ = self.dec_bounds(stripe)
        ra = self.ra_start + np.asarray(x, dtype=float) / self.cos_center(stripe)
        dec = lo + np.asarray(y, dtype=float)
        return ra, dec

    def contains(self, ra, dec) -> np.ndarray:
        st = self.stripe_of(dec)
        inside = st >= 0
        out = np.zeros(np.shape(ra), dtype=bool)
        if np.any(inside):
            ra_i = np.asarray(ra, dtype=float)[inside]
            lo, hi = self.ra_bounds(st[inside])
            out[inside] = (ra_i >= lo) & (ra_i <= hi)
        return out

    def assign(self, ra, dec, clip: bool = False):
        """Return ``(stripe, camcol, field)`` ids.

        Positions must lie inside the layout unless ``clip`` is set, in which
        case outside points take the ids of the nearest stripe edge.
        """
        ra = np.asarray(ra, dtype=float)
        dec = np.asarray(dec, dtype=float)
        if clip:
            top = self.dec_start + self.n_stripes * self.width
            dec = np.clip(dec, self.dec_start, top)
        st = self.stripe_of(dec)
        if np.any(st < 0):
            raise ValueError("position outside stripe layout")
        x, y = self.to_stripe(ra, dec, st)
        camcol = np.clip(np.floor(y / self.width * self.n_camcols).astype(np.int64), 0,
                         self.n_camcols - 1) + 1
        field = np.maximum(np.floor(x / self.field_length).astype(np.int64), 0)
        return st, camcol, field

    def units(self) -> list[tuple[int, int]]:
        """Every ``(stripe, camcol)`` photometric unit in the layout."""
        return [(int(s), c) for s in self.stripe_ids for c in range(1, self.n_camcols + 1)]

    def area_deg2(self) -> float:
        return self.n_stripes * self.width * self.length


# ---------------------------------------------------------------------------
# masks

@dataclasses.dataclass(frozen=True)
class Rect:
    """Right ascension / declination box in degrees.

    With the stripe layout above such a box is a rectangle in the stripe
    tangent-plane coordinates as well.
    """

    ra_min: float
    ra_max: float
    dec_min: float
    dec_max: float
    reason: str = ""

    def __post_init__(self):
        if not (self.ra_max > self.ra_min and self.dec_max > self.dec_min):
            raise ValueError(f"rectangle mask has no area: {self}")

    def contains(self, ra, dec):
        ra = np.asarray(ra, dtype=float)
        dec = np.asarray(dec, dtype=float)
        return (ra >= self.ra_min) & (ra <= self.ra_max) & (dec >= self.dec_min) & (dec <= self.dec_max)


@dataclasses.dataclass(frozen=True)
class Circle:
    """Cap of ``radius`` arcmin around ``(ra, dec)`` in degrees."""

    ra: float
    dec: float
    radius: float
    reason: str = ""

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"circle mask has no area: {self}")

    def contains(self, ra, dec):
        sep = angular_separation(self.ra, self.dec, ra, dec)
        return sep <= math.radians(self.radius / 60.0)


@dataclasses.dataclass(frozen=True)
class MaskSet:
    regions: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def union(self, other: "MaskSet") -> "MaskSet":
        seen = list(self.regions)
        seen += [r for r in other.regions if r not in seen]
        return MaskSet(tuple(seen))

    def contains(self, ra, dec) -> np.ndarray:
        ra = np.asarray(ra, dtype=float)
        out = np.zeros(ra.shape, dtype=bool)
        for region in self.regions:
            out |= region.contains(ra, dec)
        return out


def load_masks(path) -> MaskSet:
    """Read a mask file.

    One region per line, ``#`` starts a comment::

        rect   <ra_min> <ra_max> <dec_min> <dec_max> [reason]
        circle <ra> <dec> <radius_arcmin> [reason]
    """
    regions = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0].lower()
            try:
                if tag == "rect":
                    vals = [float(v) for v in parts[1:5]]
                    if len(vals) != 4:
                        raise ValueError("rect needs 4 coordinates")
                    regions.append(Rect(*vals, reason=" ".join(parts[5:])))
                elif tag == "circle":
                    vals = [float(v) for v in parts[1:4]]
                    if len(vals) != 3:
                        raise ValueError("circle needs 3 values")
                    regions.append(Circle(*vals, reason=" ".join(parts[4:])))
                else:
                    raise ValueError(f"unknown shape tag {tag!r}")
            except ValueError as exc:
                raise CatalogFormatError(f"{path}:{lineno}: {exc}") from None
    return MaskSet(tuple(regions))


def write_masks(masks: MaskSet, path) -> None:
    with open(path, "w") as fh:
        fh.write("# shape coordinates(deg) [radius(arcmin)] reason\n")
        for r in masks:
            if isinstance(r, Rect):
                fh.write(f"rect {r.ra_min!r} {r.ra_max!r} {r.dec_min!r} {r.dec_max!r} {r.reason}".rstrip() + "\n")
            else:
                fh.write(f"circle {r.ra!r} {r.dec!r} {r.radius!r} {r.reason}".rstrip() + "\n")


def apply_masks(catalog: Catalog, masks: MaskSet) -> Catalog:
    """Drop every record that lies inside any mask region."""
    if len(masks) == 0 or len(catalog) == 0:
        return catalog
    return catalog.take(~masks.contains(catalog.ra, catalog.dec))


# ---------------------------------------------------------------------------
# subsamples

@dataclasses.dataclass(frozen=True)
class SubsampleSpec:
    """Conjunction of record predicates; ``None`` disables a predicate.

    Ranges are half-open, ``[lo, hi)``. Records without a redshift never pass
    a redshift predicate.
    """

    mag_min: float | None = None
    mag_max: float | None = None
    z_min: float | None = None
    z_max: float | None = None
    stripes: tuple | None = None
    min_weight: float | None = None
    name: str = ""

    def selects(self, catalog: Catalog) -> np.ndarray:
        keep = np.ones(len(catalog), dtype=bool)
        if self.mag_min is not None:
            keep &= catalog.mag >= self.mag_min
        if self.mag_max is not None:
            keep &= catalog.mag < self.mag_max
        if self.z_min is not None or self.z_max is not None:
            z = np.ma.getdata(catalog.redshift)
            keep &= catalog.has_redshift
            if self.z_min is not None:
                keep &= z >= self.z_min
            if self.z_max is not None:
                keep &= z < self.z_max
        if self.stripes is not None:
            keep &= np.isin(catalog.stripe, np.asarray(self.stripes, dtype=np.int64))
        if self.min_weight is not None:
            keep &= catalog.weight >= self.min_weight
        return keep


def apply_subsample(catalog: Catalog, spec: SubsampleSpec) -> Catalog:
    return catalog.take(spec.selects(catalog))


# ---------------------------------------------------------------------------
# cone search

class SkyIndex:
    """Declination-band / right-ascension-bin grid index over point positions."""

    def __init__(self, ra, dec, band_deg: float = 0.5):
        self.ra = np.asarray(ra, dtype=float)
        self.dec = np.asarray(dec, dtype=float)
        self.band = band_deg
        self.n_dec = int(math.ceil(180.0 / band_deg))
        self.n_ra = int(math.ceil(360.0 / band_deg))
        ib = self._dec_bin(self.dec)
        ir = np.minimum((self.ra / band_deg).astype(np.int64), self.n_ra - 1)
        key = ib * self.n_ra + ir
        self.order = np.argsort(key, kind="stable")
        self.starts = np.searchsorted(key[self.order], np.arange(self.n_dec * self.n_ra + 1))

    def _dec_bin(self, dec):
        return np.clip(((np.asarray(dec) + 90.0) / self.band).astype(np.int64), 0, self.n_dec - 1)

    def candidates(self, ra0: float, dec0: float, radius_deg: float) -> np.ndarray:
        lo_band = int(self._dec_bin(dec0 - radius_deg - 1e-9))
        hi_band = int(self._dec_bin(dec0 + radius_deg + 1e-9))
        if abs(dec0) + radius_deg >= 89.0:
            ra_bins = np.arange(self.n_ra)
        else:
            half = math.degrees(math.asin(min(1.0, math.sin(math.radians(radius_deg))
                                               / math.cos(math.radians(dec0)))))
            if half >= 180.0 - self.band:
                ra_bins = np.arange(self.n_ra)
            else:
                first = int(math.floor((ra0 - half) / self.band)) - 1
                last = int(math.floor((ra0 + half) / self.band)) + 1
                ra_bins = np.unique(np.arange(first, last + 1) % self.n_ra)
        out = []
        for b in range(lo_band, hi_band + 1):
            cells = b * self.n_ra + ra_bins
            for c in cells:
                s, e = self.starts[c], self.starts[c + 1]
                if e > s:
                    out.append(self.order[s:e])
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def cone_count(catalog: Catalog, center, radius: float, use_index: bool = True) -> int:
    """Number of records within ``radius`` arcmin of ``center = (ra, dec)``."""
    if not radius > 0:
        raise ValueError("cone radius must be positive")
    ra0, dec0 = center
    rad = math.radians(radius / 60.0)
    if use_index:
        idx = catalog.index().candidates(ra0, dec0, radius / 60.0)
        sep = angular_separation(ra0, dec0, catalog.ra[idx], catalog.dec[idx])
    else:
        sep = angular_separation(ra0, dec0, catalog.ra, catalog.dec)
    return int(np.count_nonzero(sep <= rad))


# ---------------------------------------------------------------------------
# radial selection function

LN10_OVER_5 = 0.2 * math.log(10.0)


class SelectionFunction:
    """Radial selection table.

    Columns: ``dist`` (Mpc/h), ``phi`` (probability that a galaxy at that
    distance enters the sample), ``phi_cum`` (normalized cumulative radial
    distribution of selected galaxies, ``int phi d^2``), ``dlnphi_dm``
    (response of ``ln phi`` to a zero-point shift that deepens the limiting
    magnitude by one magnitude). Outside the tabulated range ``phi`` is zero.
    """

    def __init__(self, dist, phi, phi_cum=None, dlnphi_dm=None):
        dist = np.asarray(dist, dtype=float)
        phi = np.asarray(phi, dtype=float)
        if dist.ndim != 1 or dist.size < 4 or np.any(np.diff(dist) <= 0):
            raise ValueError("selection table needs >= 4 strictly increasing distances")
        if np.any(phi < 0) or np.any(phi > 1) or not np.all(np.isfinite(phi)):
            raise ValueError("phi must lie in [0, 1]")
        if phi_cum is None:
            phi_cum = _cumulative(dist, phi)
        phi_cum = np.asarray(phi_cum, dtype=float)
        if np.any(np.diff(phi_cum) < 0):
            raise ValueError("phi_cum must be monotone non-decreasing")
        if dlnphi_dm is None:
            dlnphi_dm = _log_derivative(dist, phi)
        self.dist = dist
        self.phi_table = phi
        self.phi_cum_table = phi_cum
        self.dlnphi_dm_table = np.asarray(dlnphi_dm, dtype=float)
        self._phi = PchipInterpolator(dist, phi, extrapolate=False)
        self._cum = PchipInterpolator(dist, phi_cum, extrapolate=False)
        self._dln = PchipInterpolator(dist, self.dlnphi_dm_table, extrapolate=False)

    @property
    def d_min(self) -> float:
        return float(self.dist[0])

    @property
    def d_max(self) -> float:
        return float(self.dist[-1])

    def phi(self, d):
        out = self._phi(np.asarray(d, dtype=float))
        return np.nan_to_num(np.clip(out, 0.0, 1.0), nan=0.0)

    def phi_cum(self, d):
        d = np.asarray(d, dtype=float)
        out = self._cum(np.clip(d, self.d_min, self.d_max))
        return out

    def dlnphi_dm(self, d):
        """Modulation coefficient; raises outside the tabulated range."""
        d = np.asarray(d, dtype=float)
        if np.any((d < self.d_min) | (d > self.d_max)):
            raise ValueError("distance outside selection-function table range "
                             f"[{self.d_min:g}, {self.d_max:g}]")
        return self._dln(d)

    def sample_distances(self, n: int, rng: np.random.Generator, delta_m: float = 0.0):
        """Draw distances from the selected radial distribution.

        A nonzero ``delta_m`` applies the linearized modulation
        ``phi -> phi * (1 + dlnphi_dm * delta_m)`` before sampling.
        """
        d = np.linspace(self.d_min, self.d_max, 4097)
        sel = self.phi(d)
        if delta_m:
            sel = sel * np.clip(1.0 + self.dlnphi_dm(d) * delta_m, 0.0, None)
        cdf = _cumulative(d, sel)  # volume factor d^2 applied inside
        return np.interp(rng.random(n), cdf, d)

    @classmethod
    def flux_limited(cls, d_star: float = 300.0, slope: float = 4.0,
                     d_bright: float = 15.0, bright_slope: float = 2.0,
                     d_min: float = 100.0, d_max: float = 440.0, n: int = 2001) -> "SelectionFunction":
        """Analytic flux-limited selection.

        ``phi(d) = exp(-(d/d_star)^slope) * (1 - exp(-(d/d_bright)^bright_slope))``.
        A magnitude shift ``dm`` rescales distances, ``phi(d; dm) =
        phi(d 10^(-dm/5))``, so ``dlnphi_dm = -(ln 10 / 5) dln(phi)/dln(d)``.
        """
        d = np.linspace(d_min, d_max, n)
        phi = _flux_limited_phi(d, d_star, slope, d_bright, bright_slope)
        u = (d / d_bright) ** bright_slope
        # u / (e^u - 1) written to stay finite for large u
        dlnphi_dlnd = -slope * (d / d_star) ** slope + bright_slope * u * np.exp(-u) / -np.expm1(-u)
        sel = cls(d, phi, dlnphi_dm=-LN10_OVER_5 * dlnphi_dlnd)
        sel.params = dict(d_star=d_star, slope=slope, d_bright=d_bright,
                          bright_slope=bright_slope, d_min=d_min, d_max=d_max, n=n)
        return sel


def _flux_limited_phi(d, d_star, slope, d_bright, bright_slope):
    d = np.asarray(d, dtype=float)
    return np.exp(-(d / d_star) ** slope) * -np.expm1(-(d / d_bright) ** bright_slope)


def _cumulative(d, phi):
    seg = 0.5 * (phi[1:] * d[1:] ** 2 + phi[:-1] * d[:-1] ** 2) * np.diff(d)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return cum / cum[-1] if cum[-1] > 0 else cum


def _log_derivative(d, phi):
    lnphi = np.log(np.maximum(phi, 1e-300))
    return -LN10_OVER_5 * np.gradient(lnphi, np.log(d))


def load_selection(path) -> SelectionFunction:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        want = ["dist", "phi", "phi_cum", "dlnphi_dm"]
        if [h.strip() for h in header] != want:
            raise CatalogFormatError(f"{path}: selection header must be {','.join(want)}")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise CatalogFormatError(f"{path}: {exc}") from None
    return SelectionFunction(data[:, 0], data[:, 1], data[:, 2], data[:, 3])


def write_selection(sel: SelectionFunction, path) -> None:
    with open(path, "w") as fh:
        fh.write("dist,phi,phi_cum,dlnphi_dm\n")
        for row in zip(sel.dist.tolist(), sel.phi_table.tolist(), sel.phi_cum_table.tolist(),
                       sel.dlnphi_dm_table.tolist()):
            fh.write(",".join(repr(v) for v in row) + "\n")
