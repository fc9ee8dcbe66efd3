"""
Empirical Process Diagnostics
Scaling of the grid supremum of (P_n - P) phi_nu(. - mu) and the convex-hull supremum property.
"""

import logging
from functools import partial
from pathlib import Path

import numpy as np

from mixtures.analysis import EmpiricalMeasure
from mixtures.estimate import convex_sup_check, empirical_process_sup
from mixtures.reports import Provenance, RateReport, RateRow, Verdict, fit_loglog_slope
from mixtures.runner import Experiment, ExperimentOutcome, TrialPool, trial_seed

logger = logging.getLogger(__name__)

SUP_EXPONENT = -0.5
# rows used for streams that are not part of the n grid
CONVEX_ROW = 1000


def location_grid(f0, points: int) -> np.ndarray:
    """Tensor grid over the target's effective support with about `points` nodes"""
    per_axis = max(2, int(round(points ** (1.0 / f0.dim))))
    lower, upper = f0.support_box()
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(lower, upper)]
    return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, f0.dim)


def _sup_row(item, *, kernel, f0, nu, mu_grid, trials, seed, quad) -> RateRow:
    row_index, n = item
    result = empirical_process_sup(kernel, nu, n, mu_grid, trials, seed, f0, quad, row=row_index)
    sups = np.asarray(result.sups)
    return RateRow(size=int(n), mean_error=result.mean_sup,
                   std_error=float(sups.std(ddof=1)) if sups.size > 1 else 0.0,
                   bound=result.bound, within_bound=bool(result.holds))


def _convex_case(k: int, *, kernel, f0, nu, n, atoms, weight_trials, seed, quad):
    sample = EmpiricalMeasure.draw(f0, n, trial_seed(seed, CONVEX_ROW, k))
    locations = f0.sample(np.random.default_rng(trial_seed(seed, CONVEX_ROW + 1, k)), atoms)
    return convex_sup_check(sample, kernel, nu, locations, weight_trials, f0, quad,
                            seed=trial_seed(seed, CONVEX_ROW + 2, k))


class DiagnosticsExperiment(Experiment):
    """Standalone empirical-process checks for the estimator"""

    name = "diagnostics"
    description = "empirical process supremum scaling and convex combination property"

    async def run(self, cfg, pool: TrialPool, out_dir: Path) -> ExperimentOutcome:
        settings = cfg.diagnostics
        kernel = cfg.kernel.build(cfg.dim)
        f0 = cfg.target.build(cfg.dim)
        quad = cfg.quadrature.resolve(f0, kernel, settings.nu)
        mu_grid = location_grid(f0, settings.grid_points)
        logger.info(f"🔧 diagnostics: {kernel.name}/{f0.name} nu={settings.nu} vc_dim={kernel.vc_dim} "
                    f"grid={mu_grid.shape[0]} points")

        sup_fn = partial(_sup_row, kernel=kernel, f0=f0, nu=settings.nu, mu_grid=mu_grid,
                         trials=settings.trials, seed=cfg.seed, quad=quad)
        rows = await pool.map(sup_fn, list(enumerate(settings.n_grid)))
        for row in rows:
            logger.info(f"📊 n={row.size} mean_sup={row.mean_error:.6g} envelope={row.bound:.6g}")

        convex_fn = partial(_convex_case, kernel=kernel, f0=f0, nu=settings.nu, n=settings.n_grid[0],
                            atoms=settings.atoms, weight_trials=settings.weight_trials, seed=cfg.seed, quad=quad)
        cases = await pool.map(convex_fn, range(settings.seeds))
        convex_passed = sum(case.trials for case in cases if case.holds)
        convex_total = sum(case.trials for case in cases)

        fit = fit_loglog_slope(rows)
        slope_ok = abs(fit.slope - SUP_EXPONENT) <= settings.slope_tolerance
        bounds_held = sum(bool(r.within_bound) for r in rows)
        checks = {
            'envelope_bound': {'passed': bounds_held, 'total': len(rows)},
            'convex_sup': {'passed': convex_passed, 'total': convex_total},
            'sup_slope': {'passed': int(slope_ok), 'total': 1},
        }
        verdict = Verdict.PASS
        for name, tally in checks.items():
            if tally['passed'] < tally['total']:
                logger.warning(f"⚠️ {name} check failed ({tally['passed']}/{tally['total']})")
                verdict = Verdict.FAIL

        report = RateReport(
            experiment='diagnostics', rows=rows, fit=fit, theoretical_exponent=SUP_EXPONENT, constant_K=None,
            verdict=verdict,
            provenance=Provenance(config_hash=cfg.config_hash, seed=cfg.seed, config_path=str(cfg.source)),
            size_column='n', error_column='mean_sup', std_column='std', checks=checks,
            details={'kernel': kernel.name, 'target': f0.name, 'dim': cfg.dim, 'nu': settings.nu,
                     'vc_dim': kernel.vc_dim, 'grid_points': int(mu_grid.shape[0]), 'atoms': settings.atoms,
                     'worst_convex_ratio': max((c.worst_combination / c.max_atom_deviation
                                                for c in cases if c.max_atom_deviation > 0), default=0.0)},
        )
        outcome = ExperimentOutcome(name=self.name, verdict=verdict, reports=[report],
                                    artifacts=self.write_report(report, out_dir, "diagnostics_report"),
                                    summary={name: f"{t['passed']}/{t['total']}" for name, t in checks.items()})
        outcome.artifacts.append(self.write_summary(outcome, out_dir))
        logger.info(report.summary())
        return outcome


async def setup(harness):
    harness.add_experiment(DiagnosticsExperiment(harness))
