"""
Target densities f0: evaluators, exact samplers and smoothness descriptors.

A target carries the translation-modulus power law
    ||f0(. - y) - f0||_p <= K2 ||y||^alpha
either with an analytic K2 (per exponent p) or with K2 left unknown, in which
case resolve_smoothness derives it from the gradient or fits it on a shift grid.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import RegularGridInterpolator
from scipy.special import gamma as gamma_fn
from scipy.stats import laplace as laplace_dist
from scipy.stats import linregress, norm

from mixtures.errors import (
    InsufficientDataError,
    InvalidParameterError,
    NumericalFailureError,
    QuadratureDomainError,
    UnsupportedTargetError,
)
from mixtures.quadrature import QuadratureSpec, as_points

logger = logging.getLogger(__name__)

TAIL_SIGMAS = 9.0
LAPLACE_TAIL = 40.0
SEMINORM_MAX_NODES = 4096
SEMINORM_ANGLES = 64
MIN_SHIFTS = 4
MIN_DECADES = 1.5


class SmoothnessKind(str, Enum):
    W1P = "W1p"
    WSP = "Wsp"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class SmoothnessSpec:
    """Exponent alpha and constant K2 of the translation-modulus power law"""

    alpha: float
    K2: Optional[float] = None
    kind: SmoothnessKind = SmoothnessKind.W1P

    def __post_init__(self):
        object.__setattr__(self, 'kind', SmoothnessKind(self.kind))
        if not 0 < self.alpha <= 1:
            raise InvalidParameterError(f"smoothness alpha must lie in (0, 1], got {self.alpha}")
        if self.K2 is not None and not (self.K2 > 0 and math.isfinite(self.K2)):
            raise InvalidParameterError(f"K2 must be positive and finite when known, got {self.K2}")

    @property
    def known(self) -> bool:
        return self.K2 is not None


def lp_tail_bound(peak: float, mass: float, p: float) -> float:
    """||h||_p over a region where 0 <= h <= peak and int h <= mass"""
    return (peak ** (p - 1.0) * mass) ** (1.0 / p)


@dataclass(frozen=True, eq=False)
class TargetDensity:
    """The density being approximated or estimated"""

    name: str
    dim: int
    pdf: Callable[[np.ndarray], np.ndarray]
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    smoothness: SmoothnessSpec
    effective_support_radius: float
    mean: np.ndarray
    variance: np.ndarray
    center: Tuple[float, ...] = ()
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    k2_for: Optional[Callable[[float], Optional[float]]] = None
    gaussian_components: Optional[Tuple[Tuple[float, Tuple[float, ...], float], ...]] = None
    peak: Optional[float] = None
    exterior_mass: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.center:
            object.__setattr__(self, 'center', (0.0,) * self.dim)

    def __call__(self, x) -> np.ndarray:
        return self.pdf(as_points(x, self.dim))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if n < 1:
            raise InvalidParameterError(f"sample size must be positive, got {n}")
        return np.asarray(self.sampler(rng, n), dtype=float).reshape(n, self.dim)

    def support_box(self) -> Tuple[np.ndarray, np.ndarray]:
        """Axis box outside which the density is negligible (or zero)"""
        c = np.asarray(self.center, dtype=float)
        r = self.effective_support_radius
        return c - r, c + r

    def smoothness_for(self, p: float) -> SmoothnessSpec:
        """Smoothness descriptor at exponent p; K2 is None when not known analytically"""
        k2 = self.k2_for(p) if self.k2_for is not None else None
        return SmoothnessSpec(alpha=self.smoothness.alpha, K2=k2, kind=self.smoothness.kind)

    def tail_mass(self, lower, upper) -> Optional[float]:
        """Upper bound on the probability outside the box [lower, upper], or None"""
        if self.exterior_mass is None:
            return None
        lo = np.broadcast_to(np.asarray(lower, dtype=float), (self.dim,))
        hi = np.broadcast_to(np.asarray(upper, dtype=float), (self.dim,))
        return min(1.0, max(0.0, float(self.exterior_mass(lo, hi))))

    def lp_tail(self, p: float, lower, upper) -> Optional[float]:
        """Bound on ||f0||_p outside the box from the tail mass and the peak density"""
        mass = self.tail_mass(lower, upper)
        if mass is None or self.peak is None:
            return None
        return lp_tail_bound(self.peak, mass, p)


# ============================================================================
# CATALOGUE
# ============================================================================

def _gaussian_exterior(components):
    # union bound over the axes of each component
    def mass(lower, upper):
        total = 0.0
        for weight, centre, sigma in components:
            c = np.asarray(centre, dtype=float)
            per_axis = norm.cdf((lower - c) / sigma) + norm.sf((upper - c) / sigma)
            total += weight * min(1.0, float(per_axis.sum()))
        return total
    return mass


def _box_exterior(half_width: float):
    def mass(lower, upper):
        overlap = np.clip(np.minimum(upper, half_width) - np.maximum(lower, -half_width), 0.0, None)
        return 1.0 - float(np.prod(overlap / (2.0 * half_width)))
    return mass


def _gaussian_pdf(x, center, sigma):
    d = x.shape[1]
    r2 = np.sum((x - center) ** 2, axis=1)
    return (2.0 * math.pi * sigma ** 2) ** (-d / 2.0) * np.exp(-0.5 * r2 / sigma ** 2)


def gaussian_w1p_constant(sigma: float, dim: int, p: float) -> float:
    """||grad f||_p for the isotropic N(c, sigma^2 I)"""
    a = p / (2.0 * sigma ** 2)
    radial = math.pi ** (dim / 2.0) * gamma_fn((p + dim) / 2.0) / (gamma_fn(dim / 2.0) * a ** ((p + dim) / 2.0))
    value = sigma ** (-2.0 * p) * (2.0 * math.pi * sigma ** 2) ** (-dim * p / 2.0) * radial
    return value ** (1.0 / p)


def gaussian(sigma: float = 1.0, dim: int = 1, center: Optional[Sequence[float]] = None) -> TargetDensity:
    if sigma <= 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    c = np.zeros(dim) if center is None else np.asarray(center, dtype=float).reshape(dim)

    def pdf(x):
        return _gaussian_pdf(x, c, sigma)

    def gradient(x):
        return -(x - c) / sigma ** 2 * pdf(x)[:, None]

    def sampler(rng, n):
        return c + sigma * rng.standard_normal((n, dim))

    return TargetDensity(
        name='gaussian', dim=dim, pdf=pdf, sampler=sampler,
        smoothness=SmoothnessSpec(alpha=1.0, K2=gaussian_w1p_constant(sigma, dim, 2.0)),
        effective_support_radius=TAIL_SIGMAS * sigma,
        mean=c.copy(), variance=np.full(dim, sigma ** 2),
        center=tuple(c), gradient=gradient,
        k2_for=lambda p: gaussian_w1p_constant(sigma, dim, p),
        gaussian_components=((1.0, tuple(c), float(sigma)),),
        peak=(2.0 * math.pi * sigma ** 2) ** (-dim / 2.0),
        exterior_mass=_gaussian_exterior(((1.0, tuple(c), float(sigma)),)),
        params={'sigma': sigma, 'center': tuple(c)},
    )


def gaussian_scale_mixture(weights: Sequence[float] = (0.5, 0.5), scales: Sequence[float] = (0.5, 2.0),
                           dim: int = 1) -> TargetDensity:
    w = np.asarray(weights, dtype=float)
    sig = np.asarray(scales, dtype=float)
    if w.shape != sig.shape or w.size == 0:
        raise InvalidParameterError("weights and scales must be nonempty and of equal length")
    if np.any(w < 0) or np.any(sig <= 0):
        raise InvalidParameterError("weights must be nonnegative and scales positive")
    if abs(w.sum() - 1.0) > 1e-12:
        raise InvalidParameterError(f"weights must sum to 1, got {w.sum()}")
    origin = np.zeros(dim)
    components = tuple((float(wi), tuple(origin), float(si)) for wi, si in zip(w, sig))

    def pdf(x):
        return sum(wi * _gaussian_pdf(x, origin, si) for wi, si in zip(w, sig))

    def gradient(x):
        return sum(-wi * x / si ** 2 * _gaussian_pdf(x, origin, si)[:, None] for wi, si in zip(w, sig))

    def sampler(rng, n):
        labels = rng.choice(w.size, size=n, p=w)
        return sig[labels][:, None] * rng.standard_normal((n, dim))

    def k2_for(p):
        if p != 2:
            return None
        # Products of centred Gaussians integrate in closed form
        total = 0.0
        for wi, si in zip(w, sig):
            for wj, sj in zip(w, sig):
                v = si ** 2 + sj ** 2
                total += wi * wj * dim * (2.0 * math.pi * v) ** (-dim / 2.0) / v
        return math.sqrt(total)

    return TargetDensity(
        name='gaussian_scale_mixture', dim=dim, pdf=pdf, sampler=sampler,
        smoothness=SmoothnessSpec(alpha=1.0, K2=k2_for(2.0)),
        effective_support_radius=TAIL_SIGMAS * float(sig.max()),
        mean=np.zeros(dim), variance=np.full(dim, float(np.dot(w, sig ** 2))),
        gradient=gradient, k2_for=k2_for,
        gaussian_components=components,
        peak=float(np.sum(w * (2.0 * math.pi * sig ** 2) ** (-dim / 2.0))),
        exterior_mass=_gaussian_exterior(components),
        params={'weights': tuple(w), 'scales': tuple(sig)},
    )


def laplace(scale: float = 1.0, dim: int = 1) -> TargetDensity:
    if dim != 1:
        raise InvalidParameterError("the Laplace target is one-dimensional")
    if scale <= 0:
        raise InvalidParameterError(f"scale must be positive, got {scale}")
    b = float(scale)

    def pdf(x):
        return np.exp(-np.abs(x[:, 0]) / b) / (2.0 * b)

    def gradient(x):
        return (-np.sign(x[:, 0]) / b * pdf(x))[:, None]

    def sampler(rng, n):
        return rng.laplace(0.0, b, size=(n, 1))

    def k2_for(p):
        return (b ** (-p) * (2.0 * b) ** (-p) * 2.0 * b / p) ** (1.0 / p)

    return TargetDensity(
        name='laplace', dim=1, pdf=pdf, sampler=sampler,
        smoothness=SmoothnessSpec(alpha=1.0, K2=k2_for(2.0)),
        effective_support_radius=LAPLACE_TAIL * b,
        mean=np.zeros(1), variance=np.array([2.0 * b ** 2]),
        gradient=gradient, k2_for=k2_for, peak=1.0 / (2.0 * b),
        exterior_mass=lambda lower, upper: laplace_dist.cdf(lower[0], scale=b) + laplace_dist.sf(upper[0], scale=b),
        params={'scale': b},
    )


def box_fractional_constant(s: float, p: float) -> Optional[float]:
    """Double-integral seminorm of the unit-length box indicator in d=1; None when sp >= 1"""
    sp = s * p
    if not 0 < sp < 1:
        return None
    return 4.0 / (sp * (1.0 - sp))


def uniform_box(s: float = 0.4, dim: int = 1) -> TargetDensity:
    """Uniform density on [-1/2, 1/2]^d, in W^{s,p} only for sp < 1"""
    if not 0 < s < 1:
        raise InvalidParameterError(f"fractional order s must lie in (0, 1), got {s}")

    def pdf(x):
        return np.where(np.all(np.abs(x) <= 0.5, axis=1), 1.0, 0.0)

    def sampler(rng, n):
        return rng.uniform(-0.5, 0.5, size=(n, dim))

    def k2_for(p):
        return box_fractional_constant(s, p) if dim == 1 else None

    return TargetDensity(
        name='uniform_box', dim=dim, pdf=pdf, sampler=sampler,
        smoothness=SmoothnessSpec(alpha=s, K2=k2_for(2.0), kind=SmoothnessKind.WSP),
        effective_support_radius=0.5,
        mean=np.zeros(dim), variance=np.full(dim, 1.0 / 12.0),
        k2_for=k2_for, peak=1.0, exterior_mass=_box_exterior(0.5), params={'s': s},
    )


_CATALOGUE = {
    'gaussian': gaussian,
    'gaussian_scale_mixture': gaussian_scale_mixture,
    'laplace': laplace,
    'uniform_box': uniform_box,
}

TARGET_NAMES = tuple(_CATALOGUE) + ('tabulated',)


def get_target(name: str, dim: int = 1, **params) -> TargetDensity:
    """Look up a catalogued target; 'tabulated' needs a `path` parameter"""
    key = name.strip().lower()
    if key == 'tabulated':
        if 'path' not in params:
            raise InvalidParameterError("tabulated target requires a 'path' parameter")
        target = load_tabulated_target(params['path'])
        if target.dim != dim:
            raise InvalidParameterError(f"tabulated target has dimension {target.dim}, configured {dim}")
        return target
    if key not in _CATALOGUE:
        raise InvalidParameterError(f"unknown target '{name}' (expected one of {', '.join(TARGET_NAMES)})")
    return _CATALOGUE[key](dim=dim, **params)


# ============================================================================
# TABULATED TARGETS
# ============================================================================

def load_tabulated_target(path) -> TargetDensity:
    """Density tabulated on a tensor grid, CSV columns x1..xd, f0(x) with a header row"""
    path = Path(path)
    if not path.exists():
        raise InvalidParameterError(f"tabulated target file not found: {path}")
    table = np.atleast_2d(np.loadtxt(path, delimiter=',', skiprows=1, dtype=float))
    if table.shape[1] < 2 or table.shape[0] < 2:
        raise InvalidParameterError(f"{path}: need at least two columns and two rows")
    if not np.all(np.isfinite(table)) or np.any(table[:, -1] < 0):
        raise InvalidParameterError(f"{path}: density values must be finite and nonnegative")

    dim = table.shape[1] - 1
    if dim == 1:
        return _tabulated_1d(path, table)
    return _tabulated_grid(path, table, dim)


def _tabulated_1d(path: Path, table: np.ndarray) -> TargetDensity:
    order = np.argsort(table[:, 0])
    xs, fs = table[order, 0], table[order, 1]
    mass = trapezoid(fs, xs)
    if mass <= 0:
        raise InvalidParameterError(f"{path}: tabulated density has zero mass")
    fs = fs / mass
    cdf = cumulative_trapezoid(fs, xs, initial=0.0)
    cdf /= cdf[-1]

    def pdf(x):
        return np.interp(x[:, 0], xs, fs, left=0.0, right=0.0)

    def sampler(rng, n):
        return np.interp(rng.uniform(size=n), cdf, xs)[:, None]

    mean = trapezoid(xs * fs, xs)
    variance = trapezoid((xs - mean) ** 2 * fs, xs)
    center = 0.5 * (xs[0] + xs[-1])
    logger.info(f"📊 Loaded tabulated target from {path}: {xs.size} nodes on [{xs[0]}, {xs[-1]}]")
    return TargetDensity(
        name='tabulated', dim=1, pdf=pdf, sampler=sampler,
        smoothness=SmoothnessSpec(alpha=1.0, kind=SmoothnessKind.EMPIRICAL),
        effective_support_radius=0.5 * (xs[-1] - xs[0]),
        mean=np.array([mean]), variance=np.array([variance]), center=(center,),
        params={'path': str(path)},
    )


def _tabulated_grid(path: Path, table: np.ndarray, dim: int) -> TargetDensity:
    axes = [np.unique(table[:, k]) for k in range(dim)]
    shape = tuple(a.size for a in axes)
    if int(np.prod(shape)) != table.shape[0]:
        raise InvalidParameterError(f"{path}: rows do not form a tensor grid ({shape} vs {table.shape[0]} rows)")
    index = tuple(np.searchsorted(axes[k], table[:, k]) for k in range(dim))
    values = np.zeros(shape)
    values[index] = table[:, -1]

    # Cell masses by the corner average
    corners = sum(values[tuple(slice(o, o + n - 1) for o, n in zip(offset, shape))]
                  for offset in np.ndindex(*(2,) * dim)) / 2 ** dim
    widths = np.meshgrid(*[np.diff(a) for a in axes], indexing='ij')
    cell_mass = corners * np.prod(np.stack(widths), axis=0)
    total = cell_mass.sum()
    if total <= 0:
        raise InvalidParameterError(f"{path}: tabulated density has zero mass")
    values = values / total
    probabilities = (cell_mass / total).ravel()

    interpolator = RegularGridInterpolator(axes, values, bounds_error=False, fill_value=0.0)
    lows = np.stack(np.meshgrid(*[a[:-1] for a in axes], indexing='ij'), axis=-1).reshape(-1, dim)
    spans = np.stack(widths, axis=-1).reshape(-1, dim)

    def pdf(x):
        return interpolator(x)

    def sampler(rng, n):
        cells = rng.choice(probabilities.size, size=n, p=probabilities)
        return lows[cells] + spans[cells] * rng.uniform(size=(n, dim))

    centres = lows + 0.5 * spans
    mean = probabilities @ centres
    variance = probabilities @ (centres - mean) ** 2
    lower = np.array([a[0] for a in axes])
    upper = np.array([a[-1] for a in axes])
    logger.info(f"📊 Loaded tabulated target from {path}: grid {shape}")
    return TargetDensity(
        name='tabulated', dim=dim, pdf=pdf, sampler=sampler,
        smoothness=SmoothnessSpec(alpha=1.0, kind=SmoothnessKind.EMPIRICAL),
        effective_support_radius=float(np.max(upper - lower)) / 2.0,
        mean=mean, variance=variance, center=tuple((lower + upper) / 2.0),
        params={'path': str(path)},
    )


# ============================================================================
# SMOOTHNESS OPERATIONS
# ============================================================================

def _require_cover(f0: TargetDensity, quad: QuadratureSpec, shift: np.ndarray):
    lower, upper = f0.support_box()
    need_lower = lower + np.minimum(shift, 0.0)
    need_upper = upper + np.maximum(shift, 0.0)
    if quad.dim != f0.dim or not quad.covers(need_lower, need_upper):
        raise QuadratureDomainError(
            f"quadrature box {quad.lower}..{quad.upper} does not cover the support of "
            f"'{f0.name}' shifted by {tuple(shift)} (needs {tuple(need_lower)}..{tuple(need_upper)})"
        )


def translation_modulus(f0: TargetDensity, y, p: float, quad: QuadratureSpec) -> float:
    """||f0(. - y) - f0||_p"""
    if p <= 1:
        raise InvalidParameterError(f"p must exceed 1, got {p}")
    shift = as_points(y, f0.dim)[0]
    _require_cover(f0, quad, shift)
    if not np.any(shift):
        return 0.0
    pts, _ = quad.nodes()
    diff = np.abs(f0.pdf(pts - shift) - f0.pdf(pts))
    return quad.integrate(diff ** p) ** (1.0 / p)


def sobolev_w1p_constant(f0: TargetDensity, p: float, quad: QuadratureSpec) -> float:
    """(int ||grad f0||_2^p)^(1/p)"""
    if f0.gradient is None:
        raise UnsupportedTargetError(f"target '{f0.name}' has no gradient; it is not in W^(1,p)")
    if p <= 1:
        raise InvalidParameterError(f"p must exceed 1, got {p}")
    _require_cover(f0, quad, np.zeros(f0.dim))
    pts, _ = quad.nodes()
    norms = np.linalg.norm(f0.gradient(pts), axis=1)
    value = quad.integrate(norms ** p) ** (1.0 / p)
    if not (math.isfinite(value) and value > 0):
        raise NumericalFailureError("Sobolev constant is not finite and positive",
                                    diagnostics={'target': f0.name, 'p': p, 'value': value})
    return value


class SeminormEstimate(NamedTuple):
    value: float
    error: float


def _exterior_kernel(pts: np.ndarray, lower, upper, sp: float) -> np.ndarray:
    """int over y outside the box of ||x - y||^(-d-sp), for every node x"""
    lower = np.asarray(lower)
    upper = np.asarray(upper)
    if pts.shape[1] == 1:
        x = pts[:, 0]
        return ((upper[0] - x) ** (-sp) + (x - lower[0]) ** (-sp)) / sp

    theta = (np.arange(SEMINORM_ANGLES) + 0.5) * 2.0 * math.pi / SEMINORM_ANGLES
    direction = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        reach = np.where(direction[None, :, :] > 0,
                         (upper[None, None, :] - pts[:, None, :]) / direction[None, :, :],
                         (lower[None, None, :] - pts[:, None, :]) / direction[None, :, :])
    reach = np.where(direction[None, :, :] == 0, np.inf, reach)
    distance = np.min(reach, axis=2)
    return np.sum(distance ** (-sp), axis=1) * (2.0 * math.pi / SEMINORM_ANGLES) / sp


def _seminorm_on(f0: TargetDensity, s: float, p: float, quad: QuadratureSpec) -> float:
    pts, weights = quad.nodes()
    values = f0.pdf(pts)
    d = f0.dim
    sp = s * p
    exclusion = 0.5 * quad.step

    total = 0.0
    for start in range(0, pts.shape[0], 512):
        block = slice(start, start + 512)
        gaps = np.linalg.norm(pts[block, None, :] - pts[None, :, :], axis=2)
        numer = np.abs(values[block, None] - values[None, :]) ** p
        with np.errstate(divide='ignore', invalid='ignore'):
            integrand = np.where(gaps >= exclusion, numer / gaps ** (d + sp), 0.0)
        total += float(weights[block] @ integrand @ weights)

    # Pairs with one point outside the truncation box, where f0 vanishes
    tail = 2.0 * float(np.sum(weights * np.abs(values) ** p * _exterior_kernel(pts, quad.lower, quad.upper, sp)))
    return total + tail


def fractional_seminorm(f0: TargetDensity, s: float, p: float, quad: QuadratureSpec) -> SeminormEstimate:
    """Double-integral seminorm int int |f(x)-f(y)|^p / ||x-y||^(d+sp), with a refinement error bar"""
    if f0.dim not in (1, 2):
        raise InvalidParameterError(f"fractional seminorm is limited to d in {{1, 2}}, got d={f0.dim}")
    if not 0 < s < 1:
        raise InvalidParameterError(f"s must lie in (0, 1), got {s}")
    if p <= 1:
        raise InvalidParameterError(f"p must exceed 1, got {p}")
    _require_cover(f0, quad, np.zeros(f0.dim))

    per_axis = int(round(SEMINORM_MAX_NODES ** (1.0 / f0.dim)))
    fine = quad.with_points(min(quad.points, per_axis))
    coarse = fine.with_points(fine.points // 2)
    value = _seminorm_on(f0, s, p, fine)
    error = abs(value - _seminorm_on(f0, s, p, coarse))
    if not math.isfinite(value):
        raise NumericalFailureError("fractional seminorm is not finite",
                                    diagnostics={'target': f0.name, 's': s, 'p': p})
    logger.debug(f"Seminorm of {f0.name} (s={s}, p={p}): {value:.6g} +/- {error:.2g}")
    return SeminormEstimate(value=value, error=error)


def estimate_smoothness(f0: TargetDensity, p: float, shift_grid, quad: QuadratureSpec) -> SmoothnessSpec:
    """Fit modulus(y) ~ K2 ||y||^alpha on the small-shift part of a grid"""
    shifts = np.asarray(shift_grid, dtype=float).reshape(-1, f0.dim) if len(shift_grid) else np.empty((0, f0.dim))
    norms = np.linalg.norm(shifts, axis=1)
    keep = (norms > 0) & (norms <= f0.effective_support_radius / 4.0)
    shifts, norms = shifts[keep], norms[keep]
    if np.unique(norms).size < MIN_SHIFTS:
        raise InsufficientDataError(
            f"need at least {MIN_SHIFTS} distinct shift lengths within "
            f"{f0.effective_support_radius / 4.0:g}, got {np.unique(norms).size}"
        )
    if math.log10(norms.max() / norms.min()) < MIN_DECADES:
        logger.warning(f"⚠️ Shift grid spans fewer than {MIN_DECADES} decades; the fitted exponent may be biased")

    moduli = np.array([translation_modulus(f0, y, p, quad) for y in shifts])
    usable = moduli > 0
    if np.unique(norms[usable]).size < MIN_SHIFTS:
        raise InsufficientDataError("too few shifts with a positive translation modulus")

    log_y, log_m = np.log(norms[usable]), np.log(moduli[usable])
    fit = linregress(log_y, log_m)
    alpha = float(min(max(fit.slope, 1e-6), 1.0))
    # With alpha fixed, the constant dominates every fitted point
    k2 = float(np.exp(np.max(log_m - alpha * log_y)))
    logger.info(f"🔧 Fitted smoothness for {f0.name} at p={p}: alpha={alpha:.4f}, K2={k2:.6g} (raw slope {fit.slope:.4f})")
    return SmoothnessSpec(alpha=alpha, K2=k2, kind=SmoothnessKind.EMPIRICAL)


def default_shift_grid(f0: TargetDensity, count: int = 8) -> np.ndarray:
    """Dyadic shifts along the first axis, from the largest power of two within r/4 downward"""
    top = 2.0 ** math.floor(math.log2(f0.effective_support_radius / 4.0))
    grid = np.zeros((count, f0.dim))
    grid[:, 0] = top * 2.0 ** -np.arange(count)
    return grid


def resolve_smoothness(f0: TargetDensity, p: float, quad: QuadratureSpec) -> SmoothnessSpec:
    """Complete smoothness descriptor: analytic, then gradient-based, then fitted"""
    spec = f0.smoothness_for(p)
    if spec.known:
        return spec
    if f0.gradient is not None:
        k2 = sobolev_w1p_constant(f0, p, quad)
        logger.info(f"🔧 K2 for {f0.name} at p={p} from the gradient: {k2:.6g}")
        return SmoothnessSpec(alpha=1.0, K2=k2, kind=SmoothnessKind.W1P)
    return estimate_smoothness(f0, p, default_shift_grid(f0), quad)


def smoothness_at_order(f0: TargetDensity, alpha: float, p: float, quad: QuadratureSpec) -> SmoothnessSpec:
    """Power law with a prescribed exponent alpha, derived from the target's own descriptor

    Below the target's exponent the constant is widened to cover shifts longer
    than one, where the modulus is at most 2 ||f0||_p. Above it no analytic
    constant holds, so K2 is the largest modulus(y) / ||y||^alpha on the
    default shift grid.
    """
    if not 0 < alpha <= 1:
        raise InvalidParameterError(f"smoothness alpha must lie in (0, 1], got {alpha}")
    base = resolve_smoothness(f0, p, quad)
    if math.isclose(alpha, base.alpha):
        return base
    if alpha < base.alpha:
        pts, _ = quad.nodes()
        norm_p = quad.integrate(f0.pdf(pts) ** p) ** (1.0 / p)
        return SmoothnessSpec(alpha=alpha, K2=max(base.K2, 2.0 * norm_p), kind=base.kind)

    logger.warning(f"⚠️ {f0.name} has smoothness {base.alpha:g} < {alpha:g}; "
                   f"fitting K2 at exponent {alpha:g} on the shift grid")
    shifts = default_shift_grid(f0)
    sizes = np.linalg.norm(shifts, axis=1)
    moduli = np.array([translation_modulus(f0, y, p, quad) for y in shifts])
    return SmoothnessSpec(alpha=alpha, K2=float(np.max(moduli / sizes ** alpha)), kind=SmoothnessKind.EMPIRICAL)
