"""
Finite mixture approximation in Lp.

For a target f0 with translation modulus K2 ||y||^alpha, a kernel phi with
moment K1 and an m-component mixture built at scale nu,

    ||f_m - f0||_p <= 3 ||phi||_p C_p nu^(d/q) m^(-r) + K1 K2 nu^(-alpha)

with r = 1/q for p < 2 and r = 1/2 for p >= 2. Choosing nu to balance the two
terms gives the rate K m^exponent computed here.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import partial
from typing import TYPE_CHECKING, Callable, List, Optional, Tuple

import numpy as np

from mixtures.analysis import convolve, lp_distance, lp_norm_values, target_tail
from mixtures.errors import InsufficientDataError, InvalidParameterError
from mixtures.kernels import KernelDensity, conjugate, dilate, kernel_lp_norm, kernel_moment
from mixtures.quadrature import QuadratureSpec, as_points
from mixtures.reports import Provenance, RateReport, RateRow, Verdict, fit_loglog_slope, rate_verdict
from mixtures.runner import TrialPool, trial_seed
from mixtures.targets import TargetDensity, lp_tail_bound, resolve_smoothness

if TYPE_CHECKING:
    from mixtures.config import ExperimentConfig

logger = logging.getLogger(__name__)

WEIGHT_ATOL = 1e-12
BOUND_RTOL = 1e-3
TERM_ATOL = 1e-8
DESCENT_ATOL = 1e-14


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """sum_j pi_j nu^d phi(nu (x - mu_j)), an element of co_m of the location-scale class"""

    weights: np.ndarray
    locations: np.ndarray
    nu: float
    kernel: KernelDensity

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        mu = np.array(self.locations, dtype=float).reshape(-1, self.kernel.dim)
        if w.size == 0 or w.size != mu.shape[0]:
            raise InvalidParameterError(f"need one weight per location, got {w.size} and {mu.shape[0]}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_ATOL:
            raise InvalidParameterError(f"weights must be nonnegative and sum to 1 (sum {w.sum():.15g})")
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise InvalidParameterError(f"nu must be positive and finite, got {self.nu}")
        w.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, 'weights', w)
        object.__setattr__(self, 'locations', mu)

    @property
    def m(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def atoms(self, x) -> np.ndarray:
        """(N, m) matrix of nu^d phi(nu (x - mu_j))"""
        pts = as_points(x, self.dim)
        dilated = dilate(self.kernel, self.nu)
        out = np.empty((pts.shape[0], self.m))
        for start in range(0, pts.shape[0], 4096):
            block = pts[start:start + 4096]
            diffs = (block[:, None, :] - self.locations[None, :, :]).reshape(-1, self.dim)
            out[start:start + 4096] = dilated(diffs).reshape(block.shape[0], self.m)
        return out

    def __call__(self, x) -> np.ndarray:
        return self.atoms(x) @ self.weights

    def with_weights(self, weights) -> 'MixtureModel':
        return MixtureModel(weights=weights, locations=self.locations, nu=self.nu, kernel=self.kernel)

    def tail_mass(self, lower, upper) -> float:
        """Bound on the mixture mass outside the box [lower, upper]"""
        return float(self.weights @ dilate(self.kernel, self.nu).exterior_mass(self.locations, lower, upper))

    def lp_tail(self, p: float, lower, upper) -> float:
        # the mixture never exceeds the peak of one dilated atom
        return lp_tail_bound(dilate(self.kernel, self.nu).sup_norm, self.tail_mass(lower, upper), p)

    def pruned(self) -> 'MixtureModel':
        keep = self.weights > 0
        w = self.weights[keep]
        return MixtureModel(weights=w / w.sum(), locations=self.locations[keep], nu=self.nu, kernel=self.kernel)


class RateBranch(str, Enum):
    P_LT_2 = "p_lt_2"
    P_GE_2 = "p_ge_2"


@dataclass(frozen=True)
class RateBoundConstants:
    """Constants of the bound K m^exponent"""

    C_p: float
    K: float
    exponent: float
    branch: RateBranch
    B: float
    q: float

    def bound(self, m: int) -> float:
        return self.K * m ** self.exponent


def _check_ranges(p: float, alpha: float, d: int):
    conjugate(p)
    if not 0 < alpha <= 1:
        raise InvalidParameterError(f"alpha must lie in (0, 1], got {alpha}")
    if int(d) != d or d < 1:
        raise InvalidParameterError(f"dimension must be a positive integer, got {d}")


def rate_branch(p: float) -> RateBranch:
    return RateBranch.P_LT_2 if p < 2 else RateBranch.P_GE_2


def rate_exponent(p: float, alpha: float, d: int) -> float:
    _check_ranges(p, alpha, d)
    q = conjugate(p)
    if p < 2:
        return -alpha / (alpha * q + d)
    return -alpha * q / (2.0 * (alpha * q + d))


def _balance_ratio(p, alpha, d, K1, K2, phi_norm_p, C_p) -> float:
    for label, value in (('K1', K1), ('K2', K2), ('phi_norm_p', phi_norm_p), ('C_p', C_p)):
        if not (value > 0 and math.isfinite(value)):
            raise InvalidParameterError(f"{label} must be positive and finite, got {value}")
    q = conjugate(p)
    return 3.0 * d * phi_norm_p * C_p / (alpha * q * K1 * K2)


def optimal_nu(m: int, p: float, alpha: float, d: int, K1: float, K2: float,
               phi_norm_p: float, C_p: float) -> float:
    """Scale balancing the sampling and smoothing terms for m components"""
    _check_ranges(p, alpha, d)
    if int(m) != m or m < 1:
        raise InvalidParameterError(f"m must be a positive integer, got {m}")
    q = conjugate(p)
    ratio = _balance_ratio(p, alpha, d, K1, K2, phi_norm_p, C_p)
    m_power = 1.0 / (alpha * q + d) if p < 2 else q / (2.0 * (alpha * q + d))
    return ratio ** (-q / (alpha * q + d)) * m ** m_power


def theorem_constant_K(p: float, alpha: float, d: int, K1: float, K2: float,
                       phi_norm_p: float, C_p: float) -> float:
    _check_ranges(p, alpha, d)
    q = conjugate(p)
    ratio = _balance_ratio(p, alpha, d, K1, K2, phi_norm_p, C_p)
    # The same substitution closes both branches; only the m-power differs
    return (3.0 * phi_norm_p * C_p * ratio ** (-d / (alpha * q + d))
            + K1 * K2 * ratio ** (alpha * q / (alpha * q + d)))


def default_c_p(p: float) -> float:
    return 1.0 if p == 2 else 2.0


def rate_bound_constants(p: float, alpha: float, d: int, K1: float, K2: float,
                         phi_norm_p: float, C_p: Optional[float] = None) -> RateBoundConstants:
    c_p = default_c_p(p) if C_p is None else C_p
    return RateBoundConstants(
        C_p=c_p,
        K=theorem_constant_K(p, alpha, d, K1, K2, phi_norm_p, c_p),
        exponent=rate_exponent(p, alpha, d),
        branch=rate_branch(p),
        B=_balance_ratio(p, alpha, d, K1, K2, phi_norm_p, c_p),
        q=conjugate(p),
    )


# ============================================================================
# CONSTRUCTIONS
# ============================================================================

def maurey_sample(f0: TargetDensity, kernel: KernelDensity, nu: float, m: int, seed) -> MixtureModel:
    """Equal-weight mixture on m locations drawn from f0"""
    if int(m) != m or m < 1:
        raise InvalidParameterError(f"m must be a positive integer, got {m}")
    if kernel.dim != f0.dim:
        raise InvalidParameterError(f"kernel dimension {kernel.dim} does not match target dimension {f0.dim}")
    rng = np.random.default_rng(seed)
    locations = f0.sample(rng, int(m))
    return MixtureModel(weights=np.full(int(m), 1.0 / m), locations=locations, nu=nu, kernel=kernel)


def candidate_grid(quad: QuadratureSpec, nu: float, kernel: KernelDensity, spacing: Optional[float] = None) -> np.ndarray:
    """Regular location grid over the quadrature box, spaced at a fraction of the kernel width"""
    step = spacing or 0.25 / nu
    axes = [np.arange(math.ceil(a / step), math.floor(b / step) + 1) * step for a, b in zip(quad.lower, quad.upper)]
    grids = np.meshgrid(*axes, indexing='ij')
    return np.stack([g.ravel() for g in grids], axis=1)


def greedy_refine(init: MixtureModel, reference: Callable[[np.ndarray], np.ndarray], p: float,
                  quad: QuadratureSpec, steps: int, candidates: Optional[np.ndarray] = None,
                  trace: Optional[List[float]] = None) -> MixtureModel:
    """Frank-Wolfe steps on ||f - reference||_2^2 over atoms at candidate locations

    When a trace list is given, the starting objective and the objective after
    every step are appended to it.
    """
    if p != 2:
        raise InvalidParameterError(f"greedy refinement needs the squared L2 objective (p=2), got p={p}")
    if steps < 0:
        raise InvalidParameterError(f"steps must be nonnegative, got {steps}")
    if steps == 0:
        return init
    if candidates is None:
        candidates = candidate_grid(quad, init.nu, init.kernel)
    candidates = np.asarray(candidates, dtype=float).reshape(-1, init.dim) if np.size(candidates) else np.empty((0, init.dim))
    if candidates.shape[0] == 0:
        raise InvalidParameterError("greedy refinement needs a nonempty candidate grid")

    pts, weights = quad.nodes()
    target = np.asarray(reference(pts), dtype=float)
    atom_model = MixtureModel(weights=np.full(candidates.shape[0], 1.0 / candidates.shape[0]),
                              locations=candidates, nu=init.nu, kernel=init.kernel)
    atoms = atom_model.atoms(pts)

    locations = [tuple(row) for row in init.locations]
    mix_weights = list(init.weights)
    current = init(pts)
    objective = quad.integrate((current - target) ** 2)
    if trace is not None:
        trace.append(objective)

    for step in range(steps):
        residual = current - target
        scores = (atoms * weights[:, None]).T @ residual
        best = int(np.argmin(scores))
        direction = atoms[:, best] - current
        denom = quad.integrate(direction ** 2)
        if denom <= 0:
            break
        gamma = min(1.0, max(0.0, -quad.integrate(residual * direction) / denom))
        if gamma == 0.0:
            logger.debug(f"Greedy refinement stalled after {step} step(s)")
            break

        current = current + gamma * direction
        mix_weights = [(1.0 - gamma) * w for w in mix_weights]
        key = tuple(candidates[best])
        if key in locations:
            mix_weights[locations.index(key)] += gamma
        else:
            locations.append(key)
            mix_weights.append(gamma)

        new_objective = quad.integrate((current - target) ** 2)
        if new_objective > objective + DESCENT_ATOL:
            logger.warning(f"⚠️ Greedy objective rose at step {step}: {objective:.6g} -> {new_objective:.6g}")
        objective = new_objective
        if trace is not None:
            trace.append(objective)

    w = np.asarray(mix_weights)
    w = np.where(w > 0, w, 0.0)
    refined = MixtureModel(weights=w / w.sum(), locations=np.asarray(locations), nu=init.nu, kernel=init.kernel)
    return refined.pruned()


# ============================================================================
# EXPERIMENT
# ============================================================================

def descent_tally(trace: List[float]) -> Tuple[int, int]:
    """(nonincreasing steps, steps) of an objective trace"""
    changes = np.diff(np.asarray(trace, dtype=float))
    return int(np.sum(changes <= DESCENT_ATOL)), int(changes.size)


def _approx_trial(trial: int, *, f0, kernel, nu, m, p, quad, seed, row, smoothed, construction, steps, candidates,
                  f0_tail):
    model = maurey_sample(f0, kernel, nu, m, trial_seed(seed, row, trial))
    trace: List[float] = []
    if construction == 'greedy':
        model = greedy_refine(model, lambda x: convolve(dilate(kernel, nu), f0, x, quad), p, quad, steps, candidates,
                              trace=trace)
    pts, _ = quad.nodes()
    error = lp_distance(model, f0.pdf, p, quad, tails=(model.lp_tail(p, quad.lower, quad.upper), f0_tail))
    sampling_term = lp_norm_values(model(pts) - smoothed, p, quad)
    return error, sampling_term, descent_tally(trace)


async def approx_rate_experiment(cfg: 'ExperimentConfig', pool: Optional[TrialPool] = None) -> RateReport:
    """Mixture approximation error against m, compared with K m^exponent"""
    settings = cfg.approx
    if len(settings.m_grid) < 3:
        raise InsufficientDataError(f"the m grid needs at least 3 values, got {len(settings.m_grid)}")

    kernel = cfg.kernel.build(cfg.dim)
    f0 = cfg.target.build(cfg.dim)
    p = settings.p
    unit_quad = cfg.quadrature.resolve(f0, kernel, 1.0)
    smoothness = resolve_smoothness(f0, p, unit_quad)
    alpha = smoothness.alpha
    k1 = kernel_moment(kernel, alpha, unit_quad)
    phi_norm = kernel_lp_norm(kernel, p)
    constants = rate_bound_constants(p, alpha, cfg.dim, k1, smoothness.K2, phi_norm, settings.C_p)
    certified = p == 2
    logger.info(f"🔧 approx-rate: {kernel.name}/{f0.name} d={cfg.dim} p={p} alpha={alpha:.4g} "
                f"K1={k1:.6g} K2={smoothness.K2:.6g} C_p={constants.C_p} K={constants.K:.6g} "
                f"exponent={constants.exponent:.4f}")

    nus = [optimal_nu(m, p, alpha, cfg.dim, k1, smoothness.K2, phi_norm, constants.C_p) for m in settings.m_grid]
    quad = cfg.quadrature.resolve(f0, kernel, min(nus))
    pts, _ = quad.nodes()

    own_pool = pool is None
    pool = pool or TrialPool(threads=1)
    rows, tallies = [], {'decomposition': [0, 0], 'sampling_bound': [0, 0]}
    if settings.construction == 'greedy':
        tallies['greedy_descent'] = [0, 0]
    f0_tail = target_tail(f0, p, quad)
    try:
        for row_index, (m, nu) in enumerate(zip(settings.m_grid, nus)):
            dilated = dilate(kernel, nu)
            smoothed = np.atleast_1d(convolve(dilated, f0, pts, quad))
            smoothing_term = lp_norm_values(smoothed - f0.pdf(pts), p, quad)
            candidates = candidate_grid(quad, nu, kernel) if settings.construction == 'greedy' else None
            trial = partial(_approx_trial, f0=f0, kernel=kernel, nu=nu, m=m, p=p, quad=quad, seed=cfg.seed,
                            row=row_index, smoothed=smoothed, construction=settings.construction,
                            steps=settings.greedy_steps, candidates=candidates, f0_tail=f0_tail)
            results = await pool.map(trial, range(settings.trials))
            errors = np.array([r[0].value for r in results])
            remainders = [r[0].remainder for r in results]
            sampling = np.array([r[1] for r in results])
            tail_remainder = None if None in remainders else float(max(remainders))

            part_bound = 2.0 * dilated.lp_norm(p)
            tallies['decomposition'][0] += int(np.sum(errors <= sampling + smoothing_term + TERM_ATOL))
            tallies['decomposition'][1] += errors.size
            tallies['sampling_bound'][0] += int(np.sum(sampling <= part_bound * (1 + BOUND_RTOL)))
            tallies['sampling_bound'][1] += sampling.size
            if 'greedy_descent' in tallies:
                for ok, total in (r[2] for r in results):
                    tallies['greedy_descent'][0] += ok
                    tallies['greedy_descent'][1] += total

            mean_error = float(errors.mean())
            bound = constants.bound(m)
            row = RateRow(
                size=int(m), mean_error=mean_error,
                std_error=float(errors.std(ddof=1)) if errors.size > 1 else 0.0,
                bound=bound, within_bound=bool(mean_error <= bound * (1 + BOUND_RTOL)),
                extra={'nu': nu, 'best_error': float(errors.min()), 'sampling_term': float(sampling.mean()),
                       'smoothing_term': smoothing_term, 'tail_remainder': tail_remainder},
            )
            rows.append(row)
            logger.info(f"📊 m={m} nu={nu:.4f} mean_error={mean_error:.6g} (bound {bound:.6g}) "
                        f"best={row.extra['best_error']:.6g}")
    finally:
        if own_pool:
            pool.close()

    fit = fit_loglog_slope(rows)
    verdict = rate_verdict(fit, constants.exponent, settings.slope_tolerance, rows, certified)
    best_fit = fit_loglog_slope([(r.size, r.extra['best_error']) for r in rows])
    checks = {name: {'passed': ok, 'total': total} for name, (ok, total) in tallies.items()}
    for name, tally in checks.items():
        if tally['passed'] < tally['total']:
            logger.warning(f"⚠️ {name} check failed {tally['total'] - tally['passed']} of {tally['total']} time(s)")
            verdict = Verdict.FAIL

    return RateReport(
        experiment='approx_rate', rows=rows, fit=fit, theoretical_exponent=constants.exponent,
        constant_K=constants.K, verdict=verdict,
        provenance=Provenance(config_hash=cfg.config_hash, seed=cfg.seed, config_path=str(cfg.source)),
        size_column='m', error_column='mean_error', std_column='std_error',
        lead_columns=['nu'], tail_columns=['best_error', 'sampling_term', 'smoothing_term', 'tail_remainder'],
        checks=checks,
        details={
            'kernel': kernel.name, 'target': f0.name, 'dim': cfg.dim, 'p': p, 'q': constants.q,
            'alpha': alpha, 'K1': k1, 'K2': smoothness.K2, 'C_p': constants.C_p, 'branch': constants.branch.value,
            'bound_certified': certified, 'construction': settings.construction, 'trials': settings.trials,
            'best_of_trials_slope': best_fit.slope,
            'quadrature': {'mode': quad.mode.value, 'lower': quad.lower, 'upper': quad.upper, 'points': quad.points},
        },
    )
