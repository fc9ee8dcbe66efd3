"""
Approximation Rate Experiment
Measures how fast m-atom mixtures approach the target in L^p.
"""

import logging
from pathlib import Path

from mixtures.approx import approx_rate_experiment
from mixtures.runner import Experiment, ExperimentOutcome, TrialPool

logger = logging.getLogger(__name__)


class ApproxRateExperiment(Experiment):
    """Mixture approximation error against the number of components"""

    name = "approx_rate"
    description = "L^p error of Maurey-sampled mixtures against m"

    async def run(self, cfg, pool: TrialPool, out_dir: Path) -> ExperimentOutcome:
        report = await approx_rate_experiment(cfg, pool)
        artifacts = self.write_report(report, out_dir, "rate_report")
        outcome = ExperimentOutcome(
            name=self.name, verdict=report.verdict, reports=[report], artifacts=artifacts,
            summary={'slope': report.fitted_slope, 'exponent': report.theoretical_exponent, 'K': report.constant_K},
        )
        outcome.artifacts.append(self.write_summary(outcome, out_dir))
        logger.info(report.summary())
        return outcome


async def setup(harness):
    harness.add_experiment(ApproxRateExperiment(harness))
