"""
Estimation Rate Experiment
Runs the adaptive least-squares estimator over a sample-size grid.
"""

import logging
from pathlib import Path

from mixtures.estimate import estimation_rate_experiment
from mixtures.runner import Experiment, ExperimentOutcome, TrialPool

logger = logging.getLogger(__name__)


class EstimateRateExperiment(Experiment):
    """Squared L2 risk of the adaptive estimator against n"""

    name = "estimate_rate"
    description = "mean squared L2 error of the adaptive mixture estimator against n"

    async def run(self, cfg, pool: TrialPool, out_dir: Path) -> ExperimentOutcome:
        report = await estimation_rate_experiment(cfg, pool)
        artifacts = self.write_report(report, out_dir, "est_report")
        outcome = ExperimentOutcome(
            name=self.name, verdict=report.verdict, reports=[report], artifacts=artifacts,
            summary={'slope': report.fitted_slope, 'exponent': report.theoretical_exponent,
                     **{name: f"{tally['passed']}/{tally['total']}" for name, tally in report.checks.items()}},
        )
        outcome.artifacts.append(self.write_summary(outcome, out_dir))
        logger.info(report.summary())
        return outcome


async def setup(harness):
    harness.add_experiment(EstimateRateExperiment(harness))
