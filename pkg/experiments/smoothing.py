"""
Smoothing Experiment
Sweeps the dilation nu and compares ||phi_nu * f0 - f0||_p with K1 K2 nu^(-alpha).
"""

import logging
from functools import partial
from pathlib import Path

from mixtures.analysis import smoothing_error
from mixtures.kernels import get_kernel
from mixtures.reports import Provenance, RateReport, RateRow, fit_loglog_slope, rate_verdict
from mixtures.runner import Experiment, ExperimentOutcome, TrialPool, combine_verdicts
from mixtures.targets import resolve_smoothness

logger = logging.getLogger(__name__)


def _smoothing_row(nu: float, *, cfg, f0, kernel, p, smoothness) -> RateRow:
    quad = cfg.quadrature.resolve(f0, kernel, nu)
    result = smoothing_error(f0, kernel, nu, p, quad, smoothness)
    return RateRow(size=float(nu), mean_error=result.measured, std_error=0.0, bound=result.bound,
                   within_bound=bool(result.holds), extra={'K1': result.K1, 'K2': result.K2})


class SmoothingExperiment(Experiment):
    """Smoothing error of every configured kernel over a nu grid"""

    name = "smoothing"
    description = "convolution smoothing error against the dilation"

    async def sweep(self, cfg, pool: TrialPool, kernel_name: str) -> RateReport:
        settings = cfg.smoothing
        kernel = get_kernel(kernel_name, cfg.dim, cfg.kernel.vc_dim)
        f0 = cfg.target.build(cfg.dim)
        smoothness = resolve_smoothness(f0, settings.p, cfg.quadrature.resolve(f0, kernel, 1.0))
        logger.info(f"🔧 smoothing: {kernel.name}/{f0.name} p={settings.p} alpha={smoothness.alpha:.4g} "
                    f"K2={smoothness.K2:.6g}")

        row_fn = partial(_smoothing_row, cfg=cfg, f0=f0, kernel=kernel, p=settings.p, smoothness=smoothness)
        rows = await pool.map(row_fn, settings.nu_grid)
        for row in rows:
            logger.info(f"📊 nu={row.size:g} measured={row.mean_error:.6g} bound={row.bound:.6g}")

        exponent = -smoothness.alpha
        fit = fit_loglog_slope(rows)
        verdict = rate_verdict(fit, exponent, settings.slope_tolerance, rows, certified=True)
        held = sum(bool(r.within_bound) for r in rows)
        return RateReport(
            experiment=f'smoothing_{kernel.name}', rows=rows, fit=fit, theoretical_exponent=exponent,
            constant_K=rows[0].extra['K1'] * smoothness.K2, verdict=verdict,
            provenance=Provenance(config_hash=cfg.config_hash, seed=cfg.seed, config_path=str(cfg.source)),
            size_column='nu', error_column='measured', std_column='std', tail_columns=['K1', 'K2'],
            checks={'smoothing_bound': {'passed': held, 'total': len(rows)}},
            details={'kernel': kernel.name, 'target': f0.name, 'dim': cfg.dim, 'p': settings.p,
                     'alpha': smoothness.alpha, 'smoothness_kind': smoothness.kind.value},
        )

    async def run(self, cfg, pool: TrialPool, out_dir: Path) -> ExperimentOutcome:
        outcome = ExperimentOutcome(name=self.name, verdict=combine_verdicts([]))
        for kernel_name in cfg.smoothing.kernels:
            report = await self.sweep(cfg, pool, kernel_name)
            outcome.reports.append(report)
            outcome.artifacts += self.write_report(report, out_dir, report.experiment)
            outcome.summary[report.experiment] = f"{report.verdict.value} (slope {report.fitted_slope:+.4f})"
            logger.info(report.summary())
        outcome.verdict = combine_verdicts(r.verdict for r in outcome.reports)
        outcome.artifacts.append(self.write_summary(outcome, out_dir))
        return outcome


async def setup(harness):
    harness.add_experiment(SmoothingExperiment(harness))
