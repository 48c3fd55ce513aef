"""
Fiducial power spectrum, its sigma8 normalization, the real-space correlation
function and the angle-averaged linear redshift-space boost.

All lengths are comoving Mpc/h and wavenumbers are h/Mpc.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from typing import Callable, Union

import numpy as np
from scipy import integrate, special

__all__ = [
    "SpectrumParams",
    "TabulatedXi",
    "QuadratureError",
    "transfer_bbks",
    "tophat_window",
    "power_spectrum",
    "normalize_sigma8",
    "sigma_r",
    "xi_from_pk",
    "pk_from_xi",
    "kaiser_boost",
    "limber_spectrum",
    "w_from_spectrum2d",
    "comoving_distance",
    "redshift_at_distance",
]

ARCMIN_PER_RAD = 10800.0 / math.pi
C_OVER_H0 = 2997.92458  # Mpc/h

PowerLike = Union["SpectrumParams", Callable[[np.ndarray], np.ndarray]]


class QuadratureError(RuntimeError):
    """A numerical integral failed to reach its requested accuracy."""


@dataclasses.dataclass(frozen=True)
class SpectrumParams:
    """Parameters of the fiducial linear spectrum.

    Parameters
    ----------
    sigma8 : float
        rms linear density contrast in a sphere of 8 Mpc/h.
    gamma : float
        Shape parameter of the CDM transfer function.
    n_s : float
        Primordial spectral index.
    beta : float
        Linear redshift-distortion parameter.
    bias : float
        Linear galaxy bias.
    """

    sigma8: float = 0.9
    gamma: float = 0.2
    n_s: float = 1.0
    beta: float = 0.0
    bias: float = 1.0

    def __post_init__(self):
        for name in ("sigma8", "gamma", "bias"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        if not (np.isfinite(self.beta) and self.beta >= 0):
            raise ValueError(f"beta must be >= 0, got {self.beta!r}")
        if not np.isfinite(self.n_s):
            raise ValueError("n_s must be finite")

    def replace(self, **changes) -> "SpectrumParams":
        return dataclasses.replace(self, **changes)


def transfer_bbks(q):
    """Gamma-parameterized CDM transfer function, ``q = k / Gamma``."""
    q = np.asarray(q, dtype=float)
    x = 2.34 * q
    # ln(1+x)/x -> 1 as x -> 0
    lead = np.where(x > 1e-8, np.log1p(x) / np.where(x > 0, x, 1.0), 1.0 - 0.5 * x)
    poly = 1.0 + 3.89 * q + (16.1 * q) ** 2 + (5.46 * q) ** 3 + (6.71 * q) ** 4
    return lead * poly ** -0.25


def tophat_window(x):
    """Fourier transform of a unit-volume spherical top hat, ``W(kR)``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-3
    xs = x[small]
    out[small] = 1.0 - xs**2 / 10.0 + xs**4 / 280.0
    xl = x[~small]
    out[~small] = 3.0 * (np.sin(xl) - xl * np.cos(xl)) / xl**3
    return out


def _shape(params: SpectrumParams, k):
    k = np.asarray(k, dtype=float)
    return k**params.n_s * transfer_bbks(k / params.gamma) ** 2


@functools.lru_cache(maxsize=256)
def _shape_sigma8_integral(gamma: float, n_s: float) -> float:
    params = SpectrumParams(sigma8=1.0, gamma=gamma, n_s=n_s)

    def integrand(lnk):
        k = math.exp(lnk)
        return k**3 * float(_shape(params, k)) * float(tophat_window(8.0 * k)) ** 2

    val, err = integrate.quad(integrand, math.log(1e-7), math.log(1e3),
                              limit=500, epsabs=0.0, epsrel=1e-11)
    if not np.isfinite(val) or err > 1e-8 * abs(val):
        raise QuadratureError(
            f"sigma8 normalization did not converge: value={val!r}, "
            f"error estimate={err!r}, gamma={gamma}, n_s={n_s}")
    return val / (2.0 * math.pi**2)


def normalize_sigma8(params: SpectrumParams) -> float:
    """Amplitude ``A`` such that the top-hat variance at 8 Mpc/h is sigma8**2."""
    return params.sigma8**2 / _shape_sigma8_integral(float(params.gamma), float(params.n_s))


def power_spectrum(params: SpectrumParams, k):
    """Linear matter power spectrum ``P(k)`` in (Mpc/h)^3.

    Raises ``ValueError`` for non-positive wavenumbers.
    """
    k = np.asarray(k, dtype=float)
    if np.any(~(k > 0)):
        raise ValueError("power_spectrum requires k > 0")
    return normalize_sigma8(params) * _shape(params, k)


def _as_power(power: PowerLike) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(power, SpectrumParams):
        return functools.partial(power_spectrum, power)
    if callable(power):
        return power
    raise TypeError("expected SpectrumParams or a callable P(k)")


def sigma_r(power: PowerLike, radius: float) -> float:
    """rms of the density field smoothed with a top hat of the given radius."""
    pk = _as_power(power)

    def integrand(lnk):
        k = math.exp(lnk)
        return k**3 * float(pk(np.array([k]))[0]) * float(tophat_window(radius * k)) ** 2

    val, _ = integrate.quad(integrand, math.log(1e-7), math.log(1e3), limit=500,
                            epsabs=0.0, epsrel=1e-10)
    return math.sqrt(val / (2.0 * math.pi**2))


@dataclasses.dataclass(frozen=True)
class TabulatedXi:
    """Correlation function tabulated on a log-spaced radius grid.

    ``smoothing_radius`` is set when the table is the top-hat pair-window
    smoothed function used for cell covariances; ``variance`` then holds the
    zero-lag value.
    """

    r: np.ndarray
    xi: np.ndarray
    smoothing_radius: float | None = None
    variance: float | None = None

    @property
    def r_max(self) -> float:
        return float(self.r[-1])

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r > self.r[-1] * (1 + 1e-12)):
            raise ValueError(
                f"separation {float(r.max()):.6g} exceeds tabulated range {self.r_max:.6g}")
        out = np.interp(np.log(np.maximum(r, self.r[0])), np.log(self.r), self.xi)
        if self.variance is not None:
            # below the first knot, bridge linearly in r towards the zero-lag value
            below = r < self.r[0]
            if np.any(below):
                t = r[below] / self.r[0]
                out = np.array(out, dtype=float)
                out[below] = self.variance + t * (self.xi[0] - self.variance)
        return out

    def to_text(self) -> str:
        lines = ["# r_Mpc_h xi"]
        if self.smoothing_radius is not None:
            lines.append(f"# smoothing_radius {self.smoothing_radius!r} variance {self.variance!r}")
        lines += [f"{a!r} {b!r}" for a, b in zip(self.r.tolist(), self.xi.tolist())]
        return "\n".join(lines) + "\n"


def _simpson_weights(x):
    """Composite Simpson weights for an odd number of uniformly spaced nodes."""
    n = x.size
    h = (x[-1] - x[0]) / (n - 1)
    w = np.full(n, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return w * h / 3.0


@functools.lru_cache(maxsize=32)
def _k_nodes(r_max: float, k_hi: float, k_lo: float = 1e-5, k_break: float = 0.05,
             n_log: int = 1601, per_period: int = 64):
    """Quadrature nodes and weights in k.

    Log-spaced below ``k_break`` (Simpson in ln k), uniform above it with a
    spacing that resolves the j0(kr) oscillation at the largest radius.
    """
    k_break = min(k_break, 0.5 * k_hi)
    lnk = np.linspace(math.log(k_lo), math.log(k_break), n_log)
    lo = np.exp(lnk)
    w_lo = _simpson_weights(lnk) * lo
    dk = 2.0 * math.pi / max(r_max, 1e-3) / per_period
    n_lin = max(int(math.ceil((k_hi - k_break) / dk)), 2)
    n_lin += 1 - n_lin % 2
    hi = np.linspace(k_break, k_hi, n_lin)
    w_hi = _simpson_weights(hi)
    k = np.concatenate([lo, hi[1:]])
    w = np.concatenate([w_lo, w_hi[1:]])
    w[n_log - 1] += w_hi[0]
    return k, w


_KERNEL_CACHE: dict = {}


def _j0_kernel(r: np.ndarray, k_hi: float):
    key = (r.tobytes(), k_hi)
    hit = _KERNEL_CACHE.get(key)
    if hit is None:
        k, w = _k_nodes(float(r[-1]), k_hi)
        kernel = np.sinc(np.outer(r, k) / math.pi) * w[None, :]
        if len(_KERNEL_CACHE) >= 8:
            _KERNEL_CACHE.pop(next(iter(_KERNEL_CACHE)))
        hit = _KERNEL_CACHE[key] = (k, w, kernel)
    return hit


def xi_from_pk(power: PowerLike, r_grid, smoothing_radius: float | None = None,
               k_max: float = 10.0) -> TabulatedXi:
    """Correlation function by direct quadrature of P(k) j0(kr) k^2.

    Parameters
    ----------
    power : SpectrumParams or callable
        The power spectrum.
    r_grid : array_like
        Strictly increasing positive radii (Mpc/h).
    smoothing_radius : float, optional
        If given, P(k) is multiplied by the top-hat pair window W(kR)^2, giving
        the covariance of two sphere-averaged overdensities at separation r.
    k_max : float
        Scale of the Gaussian damping exp(-(k/k_max)^2) applied to the integrand.
    """
    pk = _as_power(power)
    r = np.ascontiguousarray(r_grid, dtype=float)
    if r.ndim != 1 or r.size < 2 or np.any(r <= 0) or np.any(np.diff(r) <= 0):
        raise ValueError("r_grid must be strictly increasing and positive")
    k_hi = 6.0 * k_max
    if smoothing_radius is not None:
        k_hi = min(k_hi, 40.0 / smoothing_radius)
    k, w, kernel = _j0_kernel(r, float(k_hi))

    f = pk(k) * np.exp(-(k / k_max) ** 2) * k**2 / (2.0 * math.pi**2)
    if smoothing_radius is not None:
        f = f * tophat_window(k * smoothing_radius) ** 2
    if not np.all(np.isfinite(f)):
        raise QuadratureError("non-finite integrand in xi_from_pk")
    xi = kernel @ f
    if not np.all(np.isfinite(xi)):
        raise QuadratureError("xi_from_pk produced non-finite values")
    variance = float(w @ f) if smoothing_radius is not None else None
    return TabulatedXi(r=r, xi=xi, smoothing_radius=smoothing_radius, variance=variance)


def pk_from_xi(xi: TabulatedXi, k):
    """Inverse transform ``4 pi int xi(r) j0(kr) r^2 dr`` on the tabulated grid."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    r = xi.r
    lnr = np.log(r)
    integrand = 4.0 * math.pi * xi.xi[None, :] * r[None, :] ** 3 * np.sinc(k[:, None] * r[None, :] / math.pi)
    return integrate.simpson(integrand, x=lnr, axis=-1)


def kaiser_boost(params: SpectrumParams) -> float:
    """Angle-averaged linear redshift-space boost ``b^2 (1 + 2 beta/3 + beta^2/5)``."""
    b = params.beta
    return params.bias**2 * (1.0 + 2.0 * b / 3.0 + b * b / 5.0)


def limber_spectrum(params: SpectrumParams, chi_min: float, chi_max: float,
                    smoothing_arcmin: float = 0.0, n_chi: int = 129):
    """Flat-sky angular spectrum of a top-hat shell, in arcmin units.

    Returns a callable mapping angular wavenumber q (1/arcmin) to the 2D power
    (arcmin^2), ``P2(q) = s^2 / dchi^2 int dchi P(q s / chi) / chi^2`` with
    ``s`` the number of arcmin per radian, optionally times a Gaussian beam
    ``exp(-(q * smoothing)^2)``.
    """
    if not 0 < chi_min < chi_max:
        raise ValueError("need 0 < chi_min < chi_max")
    chi = np.linspace(chi_min, chi_max, n_chi)
    dchi = chi_max - chi_min

    def p2(q):
        q = np.asarray(q, dtype=float)
        flat = q.ravel()
        out = np.zeros(flat.shape)
        pos = flat > 0
        ell = flat[pos] * ARCMIN_PER_RAD
        k = ell[:, None] / chi[None, :]
        integrand = power_spectrum(params, k) / chi[None, :] ** 2
        out[pos] = integrate.simpson(integrand, x=chi, axis=-1) / dchi**2 * ARCMIN_PER_RAD**2
        if smoothing_arcmin > 0:
            out *= np.exp(-(flat * smoothing_arcmin) ** 2)
        return out.reshape(q.shape)

    return p2


def w_from_spectrum2d(p2, theta, q_max: float = 20.0, n_q: int = 40001):
    """Angular correlation ``(1/2pi) int P2(q) J0(q theta) q dq`` (arcmin units)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    q = np.linspace(0.0, q_max, n_q)
    f = p2(q) * q / (2.0 * math.pi)
    return integrate.simpson(f[None, :] * special.j0(q[None, :] * theta[:, None]), x=q, axis=-1)


@functools.lru_cache(maxsize=8)
def _distance_table(omega_m: float, z_max: float = 3.0, n: int = 30001):
    z = np.linspace(0.0, z_max, n)
    inv_e = 1.0 / np.sqrt(omega_m * (1 + z) ** 3 + (1.0 - omega_m))
    d = C_OVER_H0 * integrate.cumulative_simpson(inv_e, x=z, initial=0.0)
    return z, d


def comoving_distance(z, omega_m: float = 0.3):
    """Comoving distance (Mpc/h) in a flat background with matter density ``omega_m``."""
    zt, dt = _distance_table(float(omega_m))
    z = np.asarray(z, dtype=float)
    if np.any(z < 0) or np.any(z > zt[-1]):
        raise ValueError("redshift outside tabulated range [0, 3]")
    return np.interp(z, zt, dt)


def redshift_at_distance(d, omega_m: float = 0.3):
    """Inverse of :func:`comoving_distance` on the same interpolation table."""
    zt, dt = _distance_table(float(omega_m))
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or np.any(d > dt[-1]):
        raise ValueError("distance outside tabulated range")
    return np.interp(d, dt, zt)
