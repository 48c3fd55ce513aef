"""
Zero-point systematics: linearized modulation of cell counts by per-unit
magnitude shifts, the ensemble systematics covariance, and KL bases that
reject systematics-dominated modes.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .catalog import Catalog, SelectionFunction, StripeLayout
from .klpipe import (CellCounts, CovarianceMatrix, CovarianceModel, KLBasis, OverdensityVector,
                     _keep_count, kl_decompose, kl_project, log_likelihood, refine_peak)
from .mocks import ZeroPointTable, draw_zeropoints

__all__ = [
    "ModulationProfile",
    "SystematicsCovariance",
    "FilterReport",
    "BiasReport",
    "modulation_matrix",
    "modulate_counts",
    "inject",
    "ensemble_sys_covariance",
    "build_filtered_basis",
    "inject_and_test",
]


@dataclasses.dataclass(frozen=True)
class ModulationProfile:
    """Response of ``ln phi`` to a one-magnitude zero-point shift, versus distance."""

    selection: SelectionFunction

    @property
    def d_range(self):
        return self.selection.d_min, self.selection.d_max

    def __call__(self, d):
        return self.selection.dlnphi_dm(d)

    def peak_distance(self) -> float:
        """Distance where the selected radial density ``phi d^2`` peaks."""
        d = self.selection.dist
        return float(d[np.argmax(self.selection.phi_table * d**2)])


@dataclasses.dataclass(frozen=True)
class ModulationMatrix:
    """Linear map from per-unit shifts to per-cell fractional count changes."""

    M: np.ndarray
    units: tuple

    def apply(self, zp: ZeroPointTable) -> np.ndarray:
        return self.M @ zp.lookup([u[0] for u in self.units], [u[1] for u in self.units])


def modulation_matrix(counts: CellCounts, xvec: OverdensityVector, randoms: Catalog,
                      profile: ModulationProfile, layout: StripeLayout,
                      cell_distance: np.ndarray | None = None) -> ModulationMatrix:
    """Per-cell response to unit zero-point shifts.

    ``M[i, u] = sum_{j in i, unit u} w_j phi_j c(d_j) / sum_{j in i} w_j phi_j``
    over the randoms ``j`` of surviving cell ``i``, with ``c`` the modulation
    coefficient. Each unit thus enters in proportion to its share of the
    cell's selected solid angle.
    """
    if counts.random_cell is None:
        raise ValueError("cell counts lack the random-to-cell attribution")
    units = tuple(layout.units())
    lookup = {u: k for k, u in enumerate(units)}
    has = randoms.has_redshift
    st = randoms.stripe[has]
    cc = randoms.camcol[has]
    cell = counts.random_cell
    wphi = counts.random_wphi
    dist = counts.random_dist
    if cell_distance is not None:
        lo, hi = profile.d_range
        cd = np.asarray(cell_distance)[xvec.index]
        if np.any((cd < lo) | (cd > hi)):
            raise ValueError(f"cell center outside the modulation profile range [{lo:g}, {hi:g}]")
    pos_of = np.full(len(counts.n_obs), -1, dtype=np.int64)
    pos_of[xvec.index] = np.arange(len(xvec))
    row = np.where(cell >= 0, pos_of[np.maximum(cell, 0)], -1)
    use = (row >= 0) & (wphi > 0)
    try:
        col = np.array([lookup[(int(s), int(c))] for s, c in zip(st[use], cc[use])], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"random in unit {exc} not in the layout") from None
    coef = profile(dist[use])
    n, nu = len(xvec), len(units)
    num = np.bincount(row[use] * nu + col, weights=wphi[use] * coef, minlength=n * nu).reshape(n, nu)
    den = np.bincount(row[use], weights=wphi[use], minlength=n)
    if np.any(den <= 0):
        raise ValueError("a surviving cell has no selected randoms for unit attribution")
    return ModulationMatrix(num / den[:, None], units)


def modulate_counts(mod: ModulationMatrix, zp: ZeroPointTable) -> np.ndarray:
    """Linearized change ``d`` of the overdensity vector for shifts ``zp``.

    For unclustered base counts the modulated minus unperturbed overdensity
    is the fractional change of the expected count, ``d = M delta_m``.
    """
    return mod.apply(zp)


def inject(xvec: OverdensityVector, d: np.ndarray) -> OverdensityVector:
    """Add the modulation signal to the data.

    ``d`` is computed from unclustered expected counts; adding ``n_sel d``
    to the observed counts shifts the overdensities by ``d``.
    """
    return dataclasses.replace(xvec, x=xvec.x + np.asarray(d, dtype=float))


@dataclasses.dataclass(frozen=True)
class SystematicsCovariance:
    C: np.ndarray
    K: int
    std: float

    def save(self, path):
        from .klpipe import save_array
        save_array(path, self.C)


def ensemble_sys_covariance(mod: ModulationMatrix, layout: StripeLayout, std: float, K: int = 100,
                            seed: int = 0) -> SystematicsCovariance:
    """``C_sys = (1/K) sum_k d_k d_k^T`` over ``K`` independent zero-point draws.

    Draw ``k`` uses seed ``(seed, k)`` so each realization is reproducible on
    its own. The sum is formed as one matrix product, which is independent of
    the order of realizations up to rounding.
    """
    if K < 2:
        raise ValueError("need at least two realizations")
    D = np.empty((mod.M.shape[0], K))
    for k in range(K):
        zp = draw_zeropoints(layout, std, _realization_seed(seed, k))
        D[:, k] = modulate_counts(mod, zp)
    C = (D @ D.T) / K
    return SystematicsCovariance(0.5 * (C + C.T), K, std)


def _realization_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# filtering

@dataclasses.dataclass(frozen=True)
class FilterReport:
    rejected: np.ndarray
    sys_power: np.ndarray
    fid_power: np.ndarray
    ratio_threshold: float

    @property
    def n_rejected(self) -> int:
        return int(self.rejected.size)


def build_filtered_basis(C_fid, C_sys, keep=None, ratio: float = 3.0,
                         amplification: float = 1.0) -> tuple[KLBasis, FilterReport]:
    """KL basis of ``C_fid + a C_sys`` without systematics-dominated modes.

    Mode ``b`` is rejected when ``a b^T C_sys b > ratio * b^T C_fid b``, at
    most ``rank(C_sys)`` modes (those with the largest ratio). The
    basis keeps the ``keep`` highest-ranked modes that are not rejected
    (default ``ceil(n/3)``), so the subspace dimension matches the unfiltered
    analysis. ``amplification`` scales ``C_sys`` for mode identification
    only; with ``a = 1`` the combined matrix is the plain sum.
    """
    Cf = C_fid.C if isinstance(C_fid, CovarianceMatrix) else np.asarray(C_fid, dtype=float)
    Cs = C_sys.C if isinstance(C_sys, SystematicsCovariance) else np.asarray(C_sys, dtype=float)
    if Cf.shape != Cs.shape:
        raise ValueError(f"matrix dimensions differ: {Cf.shape} vs {Cs.shape}")
    full = kl_decompose(Cf + amplification * Cs, keep=1.0)
    V = full.eigenvectors
    sys_p = amplification * np.einsum("ij,ij->j", V, Cs @ V)
    fid_p = np.einsum("ij,ij->j", V, Cf @ V)
    rejected = np.flatnonzero(sys_p > ratio * fid_p)
    # systematics span at most rank(C_sys) directions; flag no more modes than that
    ws = np.linalg.eigvalsh(0.5 * (Cs + Cs.T))
    top = float(ws[-1]) if ws.size else 0.0
    rank = int(np.sum(ws > 1e-10 * top)) if top > 0 else 0
    if rejected.size > rank:
        worst = np.argsort(-(sys_p[rejected] / fid_p[rejected]), kind="stable")[:rank]
        rejected = np.sort(rejected[worst])
    n = Cf.shape[0]
    m = _keep_count(n, keep)
    good = np.setdiff1d(np.arange(n), rejected)
    if good.size == 0:
        raise ValueError("every mode is systematics dominated")
    basis = full.with_kept(good[:m])
    return basis, FilterReport(rejected, sys_p, fid_p, ratio)


# ---------------------------------------------------------------------------
# injection test

@dataclasses.dataclass
class BiasReport:
    """Peak parameter per arm and its shift from the clean analysis."""

    param: str
    truth: float
    rows: list

    def to_text(self) -> str:
        lines = [f"# parameter {self.param} truth {self.truth!r}",
                 "mock,arm,peak,bias,delta_lnL"]
        for r in self.rows:
            lines.append(f"{r['mock']},{r['arm']},{r['peak']!r},{r['bias']!r},{r['delta_lnL']!r}")
        return "\n".join(lines) + "\n"

    def biases(self, arm: str) -> np.ndarray:
        return np.array([r["bias"] for r in self.rows if r["arm"] == arm])

    def median_reduction(self) -> float:
        """Median over mocks of ``1 - |filtered bias| / |unfiltered bias|``."""
        u = np.abs(self.biases("injected_unfiltered"))
        f = np.abs(self.biases("injected_filtered"))
        with np.errstate(invalid="ignore", divide="ignore"):
            red = np.where(u > 0, 1.0 - f / u, 0.0)
        return float(np.median(red))


def inject_and_test(xvecs: Sequence[OverdensityVector], model: CovarianceModel, params,
                    mod: ModulationMatrix, layout: StripeLayout, C_sys: SystematicsCovariance,
                    std: float, seed: int, keep=None, ratio: float = 3.0,
                    amplification: float = 1.0, param: str = "sigma8", bounds=(0.3, 2.0),
                    truth: float | None = None) -> BiasReport:
    """Clean, injected-unfiltered and injected-filtered analyses of each mock.

    For mock ``i`` a fresh zero-point table (seed ``(seed, i)``, std ``std``)
    is injected. The unfiltered arms use the plain fiducial KL basis, the
    filtered arm the systematics-filtered basis; biases are peak shifts
    relative to the clean data analysed with the same basis, and
    ``delta_lnL`` is the change of the peak log-likelihood.
    """
    C_fid = model.covariance(params)
    plain = kl_decompose(C_fid, keep=keep)
    filt, _ = build_filtered_basis(C_fid, C_sys, keep=keep, ratio=ratio, amplification=amplification)
    rows = []
    truth = float(getattr(params, param)) if truth is None else truth

    def peak(x, basis):
        y = kl_project(x, basis)
        v = refine_peak(y, param, bounds, basis, model, params)
        return v, log_likelihood(y, params.replace(**{param: v}), basis, model)

    for i, xv in enumerate(xvecs):
        zp = draw_zeropoints(layout, std, _realization_seed(seed, 10_000 + i))
        xi = inject(xv, modulate_counts(mod, zp))
        clean, l_clean = peak(xv, plain)
        unf, l_unf = peak(xi, plain)
        clean_f, l_clean_f = peak(xv, filt)
        fil, l_fil = peak(xi, filt)
        rows.append(dict(mock=i, arm="clean", peak=clean, bias=clean - truth, delta_lnL=0.0))
        rows.append(dict(mock=i, arm="injected_unfiltered", peak=unf, bias=unf - clean,
                         delta_lnL=l_unf - l_clean))
        rows.append(dict(mock=i, arm="injected_filtered", peak=fil, bias=fil - clean_f,
                         delta_lnL=l_fil - l_clean_f))
    return BiasReport(param, truth, rows)
