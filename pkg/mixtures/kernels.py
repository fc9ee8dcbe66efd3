"""
Base kernel densities and their dilations.

Every catalogued kernel is a product of a symmetric one-dimensional profile,
so Lp norms, moments and self-convolutions factor over axes. Closed forms are
used where they exist and cross-checked against quadrature in the tests.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Union

import numpy as np
from cachetools import LRUCache, cached
from cachetools.keys import hashkey
from scipy.special import beta as beta_fn
from scipy.special import gamma as gamma_fn
from scipy.stats import norm

from mixtures.errors import (
    InvalidParameterError,
    NumericalFailureError,
    UnsupportedKernelError,
)
from mixtures.quadrature import DEFAULT_CACHE_MAXSIZE, QuadratureSpec, as_points

logger = logging.getLogger(__name__)

SQRT_2PI = math.sqrt(2.0 * math.pi)
GAUSSIAN_TRUNCATION = 9.0  # per-axis radius beyond which the N(0,1) density is < 1e-17
MOMENT_RTOL = 1e-4

CONSTANT_CACHE_FACTOR = 4
_constant_lock = threading.RLock()


@dataclass(frozen=True)
class KernelProfile:
    """One-dimensional factor k of a product kernel phi(x) = prod k(x_i)"""

    name: str
    pdf: Callable[[np.ndarray], np.ndarray]
    axis_radius: float
    effective_radius: float
    peak: float
    power_integral: Optional[Callable[[float], float]] = None
    abs_moment: Optional[Callable[[float], float]] = None
    radial_moment: Optional[Callable[[float, int], float]] = None
    self_convolution: Optional[Callable[[np.ndarray], np.ndarray]] = None
    symmetric: bool = True


# ============================================================================
# ONE-DIMENSIONAL PROFILES
# ============================================================================

def _gaussian_pdf(u):
    return np.exp(-0.5 * u * u) / SQRT_2PI


def _gaussian_radial_moment(alpha, dim):
    # E||X||^alpha for X ~ N(0, I_d): chi distribution
    return 2.0 ** (alpha / 2.0) * gamma_fn((dim + alpha) / 2.0) / gamma_fn(dim / 2.0)


def _uniform_pdf(u):
    return np.where(np.abs(u) <= 0.5, 1.0, 0.0)


def _triangular_pdf(u):
    return np.maximum(0.0, 1.0 - np.abs(u))


def _polynomial_pdf(constant, power):
    def pdf(u):
        return constant * np.maximum(0.0, 1.0 - u * u) ** power
    return pdf


def _polynomial_power_integral(constant, power):
    # int_{-1}^{1} (c (1-u^2)^k)^p du = c^p B(1/2, kp + 1)
    def integral(p):
        return constant ** p * beta_fn(0.5, power * p + 1.0)
    return integral


def _polynomial_abs_moment(constant, power):
    # int_{-1}^{1} |u|^a c (1-u^2)^k du = c B((a+1)/2, k+1)
    def moment(alpha):
        return constant * beta_fn((alpha + 1.0) / 2.0, power + 1.0)
    return moment


_PROFILES: Dict[str, KernelProfile] = {
    'gaussian': KernelProfile(
        name='gaussian',
        pdf=_gaussian_pdf,
        axis_radius=math.inf,
        effective_radius=GAUSSIAN_TRUNCATION,
        peak=1.0 / SQRT_2PI,
        power_integral=lambda p: (2.0 * math.pi) ** ((1.0 - p) / 2.0) / math.sqrt(p),
        abs_moment=lambda alpha: _gaussian_radial_moment(alpha, 1),
        radial_moment=_gaussian_radial_moment,
        self_convolution=lambda u: np.exp(-0.25 * u * u) / math.sqrt(4.0 * math.pi),
    ),
    'uniform': KernelProfile(
        name='uniform',
        pdf=_uniform_pdf,
        axis_radius=0.5,
        effective_radius=0.5,
        peak=1.0,
        power_integral=lambda p: 1.0,
        abs_moment=lambda alpha: 0.5 ** alpha / (alpha + 1.0),
        self_convolution=lambda u: np.maximum(0.0, 1.0 - np.abs(u)),
    ),
    'triangular': KernelProfile(
        name='triangular',
        pdf=_triangular_pdf,
        axis_radius=1.0,
        effective_radius=1.0,
        peak=1.0,
        power_integral=lambda p: 2.0 / (p + 1.0),
        abs_moment=lambda alpha: 2.0 / ((alpha + 1.0) * (alpha + 2.0)),
    ),
    'epanechnikov': KernelProfile(
        name='epanechnikov',
        pdf=_polynomial_pdf(0.75, 1),
        axis_radius=1.0,
        effective_radius=1.0,
        peak=0.75,
        power_integral=_polynomial_power_integral(0.75, 1),
        abs_moment=_polynomial_abs_moment(0.75, 1),
    ),
    'biweight': KernelProfile(
        name='biweight',
        pdf=_polynomial_pdf(15.0 / 16.0, 2),
        axis_radius=1.0,
        effective_radius=1.0,
        peak=15.0 / 16.0,
        power_integral=_polynomial_power_integral(15.0 / 16.0, 2),
        abs_moment=_polynomial_abs_moment(15.0 / 16.0, 2),
    ),
    'triweight': KernelProfile(
        name='triweight',
        pdf=_polynomial_pdf(35.0 / 32.0, 3),
        axis_radius=1.0,
        effective_radius=1.0,
        peak=35.0 / 32.0,
        power_integral=_polynomial_power_integral(35.0 / 32.0, 3),
        abs_moment=_polynomial_abs_moment(35.0 / 32.0, 3),
    ),
}

KERNEL_NAMES = tuple(_PROFILES)


# ============================================================================
# KERNEL TYPES
# ============================================================================

@dataclass(frozen=True)
class KernelDensity:
    """Product kernel phi on R^d built from a one-dimensional profile"""

    profile: KernelProfile
    dim: int = 1
    vc_dim: float = field(default=0.0)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise InvalidParameterError(f"kernel dimension must be a positive integer, got {self.dim}")
        if self.vc_dim <= 0:
            # Configured constant: parameters of the location-scale class plus the subgraph level
            object.__setattr__(self, 'vc_dim', float(self.dim + 2))

    @property
    def name(self) -> str:
        return self.profile.name

    @property
    def symmetric(self) -> bool:
        return self.profile.symmetric

    @property
    def bounded_support(self) -> bool:
        return math.isfinite(self.profile.axis_radius)

    @property
    def axis_radius(self) -> float:
        return self.profile.axis_radius

    @property
    def effective_radius(self) -> float:
        return self.profile.effective_radius

    @property
    def support_radius(self) -> float:
        """Euclidean radius of the support (inf when unbounded)"""
        return self.profile.axis_radius * math.sqrt(self.dim)

    @property
    def sup_norm(self) -> float:
        return self.profile.peak ** self.dim

    def __call__(self, x) -> np.ndarray:
        pts = as_points(x, self.dim)
        return np.prod(self.profile.pdf(pts), axis=1)

    def lp_norm(self, p: float) -> Optional[float]:
        if self.profile.power_integral is None:
            return None
        return float(self.profile.power_integral(p) ** (self.dim / p))

    def moment(self, alpha: float) -> Optional[float]:
        if self.profile.radial_moment is not None:
            return float(self.profile.radial_moment(alpha, self.dim))
        if self.dim == 1 and self.profile.abs_moment is not None:
            return float(self.profile.abs_moment(alpha))
        return None

    def convolution_at(self, delta) -> Optional[np.ndarray]:
        """(phi * phi)(delta) in closed form, or None"""
        if self.profile.self_convolution is None:
            return None
        pts = as_points(delta, self.dim)
        return np.prod(self.profile.self_convolution(pts), axis=1)


@dataclass(frozen=True)
class DilatedKernel:
    """phi_nu(x) = nu^d phi(nu x)"""

    base: KernelDensity
    nu: float

    def __post_init__(self):
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise InvalidParameterError(f"dilation nu must be a positive finite real, got {self.nu}")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def name(self) -> str:
        return self.base.name

    @property
    def symmetric(self) -> bool:
        return self.base.symmetric

    @property
    def bounded_support(self) -> bool:
        return self.base.bounded_support

    @property
    def vc_dim(self) -> float:
        return self.base.vc_dim

    @property
    def axis_radius(self) -> float:
        return self.base.axis_radius / self.nu

    @property
    def effective_radius(self) -> float:
        return self.base.effective_radius / self.nu

    @property
    def support_radius(self) -> float:
        return self.base.support_radius / self.nu

    @property
    def sup_norm(self) -> float:
        return self.nu ** self.dim * self.base.sup_norm

    def __call__(self, x) -> np.ndarray:
        pts = as_points(x, self.dim)
        return self.nu ** self.dim * self.base(self.nu * pts)

    def lp_norm(self, p: float) -> Optional[float]:
        base_norm = self.base.lp_norm(p)
        if base_norm is None:
            return None
        return self.nu ** (self.dim / conjugate(p)) * base_norm

    def moment(self, alpha: float) -> Optional[float]:
        base_moment = self.base.moment(alpha)
        if base_moment is None:
            return None
        return self.nu ** (-alpha) * base_moment

    def convolution_at(self, delta) -> Optional[np.ndarray]:
        base_values = self.base.convolution_at(self.nu * as_points(delta, self.dim))
        if base_values is None:
            return None
        return self.nu ** self.dim * base_values

    def exterior_mass(self, locations, lower, upper) -> np.ndarray:
        """Per-location bound on the mass of phi_nu(. - mu) outside the box"""
        mu = as_points(locations, self.dim)
        lo = (np.asarray(lower, dtype=float) - mu) * self.nu
        hi = (np.asarray(upper, dtype=float) - mu) * self.nu
        if self.bounded_support:
            a = self.base.axis_radius
            return np.where(np.all((lo <= -a) & (hi >= a), axis=1), 0.0, 1.0)
        if self.name == 'gaussian':
            return np.minimum(1.0, np.sum(norm.cdf(lo) + norm.sf(hi), axis=1))
        return np.ones(mu.shape[0])


AnyKernel = Union[KernelDensity, DilatedKernel]


def conjugate(p: float) -> float:
    """q with 1/p + 1/q = 1"""
    if p <= 1:
        raise InvalidParameterError(f"p must exceed 1, got {p}")
    return p / (p - 1.0)


# ============================================================================
# OPERATIONS
# ============================================================================

def get_kernel(name: str, dim: int = 1, vc_dim: Optional[float] = None) -> KernelDensity:
    """Look up a catalogued kernel by name"""
    key = name.strip().lower()
    if key not in _PROFILES:
        raise InvalidParameterError(f"unknown kernel '{name}' (expected one of {', '.join(KERNEL_NAMES)})")
    return KernelDensity(profile=_PROFILES[key], dim=dim, vc_dim=vc_dim or 0.0)


def dilate(kernel: KernelDensity, nu: float) -> DilatedKernel:
    return DilatedKernel(base=kernel, nu=nu)


def kernel_mass(kernel: AnyKernel, quad: QuadratureSpec) -> float:
    """Numerical integral of the kernel over its own support"""
    fitted = quad.fitted(kernel.effective_radius)
    pts, _ = fitted.nodes()
    return fitted.integrate(kernel(pts))


def kernel_moment(kernel: AnyKernel, alpha: float, quad: QuadratureSpec,
                  use_closed_form: bool = True) -> float:
    """int ||x||_2^alpha phi(x) dx"""
    if not alpha > 0:
        raise InvalidParameterError(f"moment order alpha must be positive, got {alpha}")

    fitted = quad.fitted(kernel.effective_radius)
    pts, _ = fitted.nodes()
    integrand = np.linalg.norm(pts, axis=1) ** alpha * kernel(pts)
    numeric = fitted.integrate(integrand)
    if not math.isfinite(numeric):
        raise NumericalFailureError(
            "moment integral did not converge",
            diagnostics={'kernel': kernel.name, 'alpha': alpha, 'value': numeric},
        )

    closed = kernel.moment(alpha)
    if closed is None or not use_closed_form:
        return numeric

    if abs(numeric - closed) > MOMENT_RTOL * abs(closed):
        logger.warning(
            f"⚠️ Moment of order {alpha} for {kernel.name}: quadrature {numeric:.8g} "
            f"vs closed form {closed:.8g}; the quadrature box may be too coarse"
        )
    return closed


def _closed_form_lp_norm(kernel: KernelDensity, p: float) -> float:
    conjugate(p)
    value = kernel.lp_norm(p)
    if value is None:
        raise UnsupportedKernelError(f"kernel '{kernel.name}' has no closed-form L{p} norm")
    return value


def _lp_norm_key(kernel, p):
    return hashkey('lp', kernel.name, kernel.dim, float(p))


def configure_constant_cache(maxsize: int):
    """Size the kernel-constant cache at a multiple of the node-table cache size"""
    global _constant_cache, _memoised_lp_norm
    if int(maxsize) != maxsize or maxsize < 1:
        raise InvalidParameterError(f"cache size must be a positive integer, got {maxsize}")
    with _constant_lock:
        _constant_cache = LRUCache(maxsize=CONSTANT_CACHE_FACTOR * int(maxsize))
        _memoised_lp_norm = cached(cache=_constant_cache, key=_lp_norm_key, lock=_constant_lock)(_closed_form_lp_norm)


configure_constant_cache(DEFAULT_CACHE_MAXSIZE)


def kernel_lp_norm(kernel: KernelDensity, p: float) -> float:
    """Closed-form ||phi||_p, memoised"""
    return _memoised_lp_norm(kernel, p)


def dilated_lp_norm(kernel: KernelDensity, nu: float, p: float, quad: QuadratureSpec) -> float:
    """||phi_nu||_p by quadrature over the dilated support"""
    conjugate(p)
    dilated = dilate(kernel, nu)
    fitted = quad.fitted(dilated.effective_radius)
    pts, _ = fitted.nodes()
    value = fitted.integrate(dilated(pts) ** p) ** (1.0 / p)
    if not (math.isfinite(value) and value > 0):
        raise NumericalFailureError(
            "Lp norm of dilated kernel is not finite and positive",
            diagnostics={'kernel': kernel.name, 'nu': nu, 'p': p, 'value': value},
        )
    return value


def _profile_self_convolution(profile: KernelProfile, u: np.ndarray, points: int) -> np.ndarray:
    """(k * k)(u) for a one-dimensional profile by Gauss-Legendre quadrature"""
    radius = profile.effective_radius
    rule = QuadratureSpec.box(radius, 1, points=points)
    t, w = rule.nodes()
    t = t[:, 0]
    kt = profile.pdf(t) * w
    out = np.empty(u.shape[0])
    for start in range(0, u.shape[0], 1024):
        chunk = u[start:start + 1024]
        out[start:start + 1024] = profile.pdf(chunk[:, None] - t[None, :]) @ kt
    return out


def self_convolution(kernel: KernelDensity, nu: float, delta, quad: QuadratureSpec):
    """(phi_nu * phi_nu)(delta); a scalar for one point, an array for a batch"""
    if not kernel.symmetric:
        raise UnsupportedKernelError(
            f"kernel '{kernel.name}' is not symmetric; the Gram expansion requires phi(x) = phi(-x)"
        )
    dilated = dilate(kernel, nu)
    pts = as_points(delta, kernel.dim)

    values = dilated.convolution_at(pts)
    if values is None:
        # Product kernel: the convolution factors over axes
        points = max(quad.points, 4096)
        scaled = nu * pts
        factors = [
            _profile_self_convolution(kernel.profile, scaled[:, axis], points)
            for axis in range(kernel.dim)
        ]
        values = nu ** kernel.dim * np.prod(np.stack(factors, axis=1), axis=1)

    values = np.maximum(values, 0.0)
    if np.ndim(delta) <= 1 and pts.shape[0] == 1:
        return float(values[0])
    return values
