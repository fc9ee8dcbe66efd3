"""
Shared numerical machinery: Lp norms and distances on a quadrature box,
convolution with a dilated kernel, the smoothing-error check, and the
empirical and true expectation operators.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from mixtures.errors import InvalidParameterError, NumericalFailureError, SmoothnessUnknownError
from mixtures.kernels import DilatedKernel, KernelDensity, dilate, kernel_moment
from mixtures.quadrature import QuadratureMode, QuadratureSpec, as_points, default_quadrature
from mixtures.targets import SmoothnessSpec, TargetDensity, lp_tail_bound

logger = logging.getLogger(__name__)

__all__ = [
    'QuadratureSpec', 'QuadratureMode', 'EmpiricalMeasure', 'SmoothingError', 'LpEstimate',
    'analysis_quadrature', 'lp_norm_values', 'lp_distance', 'lp_tail_bound', 'target_tail', 'convolve',
    'smoothing_error', 'empirical_mean', 'expectation',
]

Evaluator = Callable[[np.ndarray], np.ndarray]

SMOOTHING_RTOL = 1e-3
SMOOTHING_ATOL = 1e-8
CONVOLUTION_MAX_NODES = 4096


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """P_n for the sample X_1..X_n"""

    sample: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.sample, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InvalidParameterError("an empirical measure needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidParameterError("sample points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, 'sample', pts)

    @classmethod
    def draw(cls, f0: TargetDensity, n: int, seed) -> 'EmpiricalMeasure':
        rng = np.random.default_rng(seed)
        provenance = seed if isinstance(seed, int) else None
        return cls(sample=f0.sample(rng, n), seed=provenance)

    @property
    def n(self) -> int:
        return self.sample.shape[0]

    @property
    def dim(self) -> int:
        return self.sample.shape[1]

    def shuffled(self, seed) -> np.ndarray:
        """A seed-determined permutation of the sample points"""
        return self.sample[np.random.default_rng(seed).permutation(self.n)]


class SmoothingError(NamedTuple):
    measured: float
    bound: float
    holds: bool
    K1: float
    K2: float


class LpEstimate(NamedTuple):
    """A truncated Lp quantity and a bound on what the box leaves out"""

    value: float
    remainder: Optional[float] = None

    @property
    def upper(self) -> Optional[float]:
        """Bound on the untruncated norm, by Minkowski over box and exterior"""
        if self.remainder is None:
            return None
        return self.value + self.remainder


def target_tail(f0: TargetDensity, p: float, quad: QuadratureSpec) -> Optional[float]:
    """Bound on ||f0||_p outside the quadrature box, when the target has analytic tails"""
    return f0.lp_tail(p, quad.lower, quad.upper)


def analysis_quadrature(f0: TargetDensity, kernel: KernelDensity, nu: float, seed: int = 0) -> QuadratureSpec:
    """Default box: the farther of the target and dilated-kernel reaches plus a 6/nu margin"""
    target_reach = float(np.max(np.abs(f0.center))) + f0.effective_support_radius
    radius = max(target_reach, kernel.effective_radius / nu) + 6.0 / nu
    return default_quadrature(f0.dim, radius, seed=seed)


def lp_norm_values(values: np.ndarray, p: float, quad: QuadratureSpec) -> float:
    """Lp norm of a function already evaluated on the quadrature nodes"""
    if p < 1:
        raise InvalidParameterError(f"p must be at least 1, got {p}")
    return quad.integrate(np.abs(values) ** p) ** (1.0 / p)


def _check_finite(values: np.ndarray, pts: np.ndarray, label: str):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        i = int(bad[0])
        raise NumericalFailureError(
            f"{label} evaluator returned a non-finite value",
            diagnostics={'point': tuple(float(v) for v in pts[i]), 'value': float(values[i]), 'count': int(bad.size)},
        )


def lp_distance(f: Evaluator, g: Evaluator, p: float, quad: QuadratureSpec,
                tails: Sequence[Optional[float]] = ()) -> LpEstimate:
    """||f - g||_p over the truncated box

    tails holds one exterior Lp bound per function (see target_tail). The
    remainder is their sum when both are known, and None otherwise.
    """
    pts, _ = quad.nodes()
    fv = np.asarray(f(pts), dtype=float)
    gv = np.asarray(g(pts), dtype=float)
    _check_finite(fv, pts, 'first')
    _check_finite(gv, pts, 'second')
    remainder = None
    if len(tails) == 2 and all(t is not None for t in tails):
        remainder = float(sum(tails))
    return LpEstimate(value=lp_norm_values(fv - gv, p, quad), remainder=remainder)


def _gaussian_closed_form(kernel_nu: DilatedKernel, f0: TargetDensity, pts: np.ndarray) -> np.ndarray:
    d = f0.dim
    out = np.zeros(pts.shape[0])
    for weight, centre, sigma in f0.gaussian_components:
        var = sigma ** 2 + kernel_nu.nu ** -2
        r2 = np.sum((pts - np.asarray(centre)) ** 2, axis=1)
        out += weight * (2.0 * math.pi * var) ** (-d / 2.0) * np.exp(-0.5 * r2 / var)
    return out


def convolve(kernel_nu: DilatedKernel, f0: TargetDensity, x, quad: QuadratureSpec):
    """(phi_nu * f0)(x); a scalar for one point, an array for a batch"""
    pts = as_points(x, f0.dim)
    if kernel_nu.name == 'gaussian' and f0.gaussian_components is not None:
        values = _gaussian_closed_form(kernel_nu, f0, pts)
    else:
        per_axis = int(round(CONVOLUTION_MAX_NODES ** (1.0 / f0.dim)))
        rule = quad.fitted(kernel_nu.effective_radius)
        if rule.mode is QuadratureMode.TENSOR_GRID:
            rule = rule.with_points(min(rule.points, per_axis))
        else:
            rule = rule.with_points(min(rule.points, CONVOLUTION_MAX_NODES))
        z, zw = rule.nodes()
        kz = kernel_nu(z) * zw
        values = np.empty(pts.shape[0])
        for start in range(0, pts.shape[0], 1024):
            block = pts[start:start + 1024]
            shifted = (block[:, None, :] - z[None, :, :]).reshape(-1, f0.dim)
            values[start:start + 1024] = f0.pdf(shifted).reshape(block.shape[0], -1) @ kz

    if np.ndim(x) <= 1 and pts.shape[0] == 1:
        return float(values[0])
    return values


def smoothing_error(f0: TargetDensity, kernel: KernelDensity, nu: float, p: float, quad: QuadratureSpec,
                    smoothness: Optional[SmoothnessSpec] = None) -> SmoothingError:
    """Measured ||phi_nu * f0 - f0||_p against K1 K2 nu^(-alpha)"""
    spec = smoothness or f0.smoothness_for(p)
    if not spec.known:
        raise SmoothnessUnknownError(f0.name, p)

    dilated = dilate(kernel, nu)
    pts, _ = quad.nodes()
    smoothed = convolve(dilated, f0, pts, quad)
    measured = lp_norm_values(np.atleast_1d(smoothed) - f0.pdf(pts), p, quad)

    k1 = kernel_moment(kernel, spec.alpha, quad)
    bound = k1 * spec.K2 * nu ** (-spec.alpha)
    holds = measured <= bound * (1.0 + SMOOTHING_RTOL) + SMOOTHING_ATOL
    if not holds:
        logger.warning(f"⚠️ Smoothing bound violated for {f0.name}/{kernel.name} at nu={nu}: "
                       f"measured {measured:.6g} > bound {bound:.6g}")
    return SmoothingError(measured=measured, bound=bound, holds=holds, K1=k1, K2=spec.K2)


def empirical_mean(mu: EmpiricalMeasure, f: Evaluator) -> float:
    """P_n f"""
    return float(np.mean(f(mu.sample)))


def expectation(f: Evaluator, f0: TargetDensity, quad: QuadratureSpec) -> float:
    """P f = int f f0, by quadrature against the known target"""
    pts, _ = quad.nodes()
    return quad.integrate(f(pts) * f0.pdf(pts))
