"""
Configuration-driven assembly of the survey pieces shared by the command
line and the end-to-end tests: layouts, selection functions, weight maps,
angular and volume mocks, and the KL survey set-up.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from typing import Any

import numpy as np

from .catalog import Catalog, Circle, Rect, SelectionFunction, StripeLayout, load_selection
from .cosmomodel import SpectrumParams, limber_spectrum
from .klpipe import (CellCounts, CellLattice, CovarianceModel, OverdensityVector, SurveyRegion,
                     build_lattice, count_cells, count_galaxies, overdensities)
from .mocks import (AngularGeometry, GridSpec, VolumeGeometry, WeightMap, density_field,
                    poisson_sample, random_catalog)

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "merged",
    "params_from",
    "layout_from",
    "selection_from",
    "weights_from",
    "angular_mock",
    "VolumeSurvey",
]


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


DEFAULTS: dict[str, Any] = {
    "params": {"sigma8": 0.9, "gamma": 0.2, "n_s": 1.0, "beta": 0.0, "bias": 1.0},
    "layout": {"n_stripes": 10, "width": 2.5, "length": 10.0, "ra_start": 150.0,
               "first_stripe": 10},
    "angular": {"mean_density": 2.0, "shell": [600.0, 1000.0], "smoothing_arcmin": 1.5,
                "pad_arcmin": 150.0, "cell_arcmin": 1.0, "method": "lognormal"},
    "volume": {"d_min": 100.0, "d_max": 440.0, "mean_density": 0.04, "spacing": 4.0, "grid_pad": 250.0,
               "method": "lognormal", "n_randoms": 4_000_000, "random_seed": 12345,
               "target_cells": 1000, "threshold": 0.75, "keep": 1.0 / 3.0},
    "selection": {"d_star": 300.0, "slope": 4.0, "d_bright": 15.0, "bright_slope": 2.0},
    "weights": [],
}


def merged(base: dict, override: dict | None) -> dict:
    """Recursive dictionary merge (``override`` wins); inputs are not modified."""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merged(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def params_from(cfg: dict) -> SpectrumParams:
    try:
        return SpectrumParams(**{k: float(v) for k, v in cfg.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid spectrum parameters {cfg}: {exc}") from None


def layout_from(cfg: dict) -> StripeLayout:
    try:
        return StripeLayout(**cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid stripe layout {cfg}: {exc}") from None


def selection_from(cfg, d_min: float, d_max: float) -> SelectionFunction:
    """A selection table from a file path, or the analytic form from parameters."""
    if isinstance(cfg, str):
        return load_selection(cfg)
    try:
        return SelectionFunction.flux_limited(d_min=d_min, d_max=d_max, **cfg)
    except TypeError as exc:
        raise ConfigError(f"invalid selection parameters {cfg}: {exc}") from None


def weights_from(entries) -> WeightMap:
    """Weight map from ``[{rect: [ra0, ra1, dec0, dec1], weight: w}, {circle: [ra, dec, r_arcmin], ...}]``."""
    regions = []
    for e in entries or []:
        if "rect" in e:
            shape = Rect(*map(float, e["rect"]))
        elif "circle" in e:
            shape = Circle(*map(float, e["circle"]))
        else:
            raise ConfigError(f"weight region needs 'rect' or 'circle': {e}")
        regions.append((shape, float(e.get("weight", 0.0))))
    return WeightMap(tuple(regions))


# ---------------------------------------------------------------------------
# angular mocks

def angular_mock(params: SpectrumParams, layout: StripeLayout, cfg: dict, seed: int,
                 weights: WeightMap | None = None) -> Catalog:
    """Clustered angular catalog: an independent projected field per stripe.

    Each stripe carries a lognormal realization of the Limber-projected
    spectrum of a radial shell, on a flat grid padded against wrap-around.
    Points a stripe's padded grid places in other stripes are dropped.
    """
    a = merged(DEFAULTS["angular"], cfg)
    if a["mean_density"] == 0:
        return Catalog.empty()
    p2 = limber_spectrum(params, *map(float, a["shell"]), smoothing_arcmin=float(a["smoothing_arcmin"]))
    parts = []
    for k, stripe in enumerate(layout.stripe_ids):
        geo = AngularGeometry(layout, int(stripe), pad=float(a["pad_arcmin"]))
        grid = geo.grid(float(a["cell_arcmin"]))
        s = _sub_seed(seed, k)
        field = density_field(p2, grid, s, a["method"])
        part = poisson_sample(field, grid, float(a["mean_density"]), s, geo, weights=weights)
        # the padding reaches into neighbouring stripes; keep this field to its own stripe
        parts.append(part.take(part.stripe == stripe))
    return Catalog.concatenate(parts)


def _sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# volume survey

@dataclasses.dataclass
class VolumeSurvey:
    """Footprint, selection, cell lattice and random-based expectations.

    The random catalog extends beyond the footprint by the angle a cell
    radius subtends at the near distance limit, so edge cells see their full
    volume in ``n_full``.
    """

    layout: StripeLayout
    selection: SelectionFunction
    region: SurveyRegion
    weights: WeightMap
    lattice: CellLattice
    base_counts: CellCounts
    randoms: Catalog
    cfg: dict

    @classmethod
    def build(cls, layout: StripeLayout, selection: SelectionFunction, weights: WeightMap,
              cfg: dict | None = None) -> "VolumeSurvey":
        v = merged(DEFAULTS["volume"], cfg)
        region = SurveyRegion(layout, float(v["d_min"]), float(v["d_max"]))
        lattice = build_lattice(region, radius=v.get("radius"), target_count=v.get("target_cells"))
        R = lattice.radius
        pad = math.degrees(math.asin(min(1.0, R / max(region.d_min, R)))) + 0.25
        randoms = random_catalog(layout, int(v["n_randoms"]), int(v["random_seed"]), weights=weights,
                                 thin=False, pad_deg=pad,
                                 dist_range=(max(region.d_min - R, 1e-3), region.d_max + R))
        counts = count_cells(Catalog.empty(), randoms, lattice, selection, region,
                             min_density_ratio=0.0)
        return cls(layout, selection, region, weights, lattice, counts, randoms, v)

    @property
    def geometry(self) -> VolumeGeometry:
        return self.region.geometry

    def grid(self) -> GridSpec:
        # generous padding keeps the large-scale modes the periodic box would otherwise drop
        pad = max(float(self.cfg["grid_pad"]), self.lattice.radius)
        return self.geometry.grid(float(self.cfg["spacing"]), pad=pad)

    def mock(self, params: SpectrumParams, seed: int, mean_density: float | None = None) -> Catalog:
        grid = self.grid()
        nbar = float(self.cfg["mean_density"] if mean_density is None else mean_density)
        field = density_field(params, grid, seed, self.cfg["method"])
        return poisson_sample(field, grid, nbar, seed, self.geometry, selection=self.selection,
                              weights=self.weights)

    def counts(self, catalog: Catalog) -> CellCounts:
        n_obs, n_total = count_galaxies(catalog, self.lattice, self.region)
        if n_total == 0:
            raise ValueError("catalog has no galaxies with redshifts")
        return self.base_counts.with_observed(n_obs, n_total)

    def data_vector(self, catalog: Catalog, threshold: float | None = None) -> OverdensityVector:
        th = float(self.cfg["threshold"] if threshold is None else threshold)
        return overdensities(self.counts(catalog), th)

    def model(self, xvec: OverdensityVector) -> CovarianceModel:
        return CovarianceModel(self.lattice, xvec)
