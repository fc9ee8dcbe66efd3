"""
Experiment orchestration: the trial pool and the base class experiment
plugins derive from.
"""

import asyncio
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List

import numpy as np

from mixtures.errors import InvalidParameterError
from mixtures.reports import RateReport, Verdict

logger = logging.getLogger(__name__)


def trial_seed(seed: int, row: int, trial: int) -> np.random.SeedSequence:
    """Independent stream for one trial; does not depend on scheduling"""
    return np.random.SeedSequence([int(seed), int(row), int(trial)])


class TrialPool:
    """Runs blocking trials on worker threads and gathers them in submission order"""

    def __init__(self, threads: int = 1):
        if threads < 1:
            raise InvalidParameterError(f"thread count must be positive, got {threads}")
        self.threads = threads
        self._executor = ThreadPoolExecutor(max_workers=threads, thread_name_prefix='mixrate-trial')
        self.stats = {'batches': 0, 'trials': 0, 'busy_seconds': 0.0}

    async def map(self, fn: Callable[[Any], Any], items: Iterable[Any]) -> List[Any]:
        loop = asyncio.get_running_loop()
        items = list(items)
        started = time.perf_counter()
        futures = [loop.run_in_executor(self._executor, partial(fn, item)) for item in items]
        results = await asyncio.gather(*futures)
        self.stats['batches'] += 1
        self.stats['trials'] += len(items)
        self.stats['busy_seconds'] += time.perf_counter() - started
        return list(results)

    def close(self):
        self._executor.shutdown(wait=True)

    async def __aenter__(self) -> 'TrialPool':
        return self

    async def __aexit__(self, exc_type, exc, tb):
        self.close()


@dataclass
class ExperimentOutcome:
    """What one experiment run produced"""

    name: str
    verdict: Verdict
    reports: List[RateReport] = field(default_factory=list)
    artifacts: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return self.verdict.exit_code


def combine_verdicts(verdicts: Iterable[Verdict]) -> Verdict:
    """fail beats not_certified beats pass"""
    verdicts = list(verdicts)
    if Verdict.FAIL in verdicts:
        return Verdict.FAIL
    if Verdict.NOT_CERTIFIED in verdicts:
        return Verdict.NOT_CERTIFIED
    return Verdict.PASS


class Experiment:
    """Base class for experiment plugins discovered in experiments/"""

    name = "experiment"
    description = ""

    def __init__(self, harness):
        self.harness = harness

    async def run(self, cfg, pool: TrialPool, out_dir: Path) -> ExperimentOutcome:
        raise NotImplementedError

    def write_report(self, report: RateReport, out_dir: Path, stem: str) -> List[Path]:
        csv_path = report.to_csv(Path(out_dir) / f"{stem}.csv")
        json_path = report.to_json(Path(out_dir) / f"{stem}.json")
        logger.info(f"💾 Wrote {csv_path} and {json_path}")
        return [csv_path, json_path]

    def write_summary(self, outcome: ExperimentOutcome, out_dir: Path) -> Path:
        path = Path(out_dir) / f"{self.name}_summary.txt"
        lines = [f"{self.name}: {outcome.verdict.value}"]
        lines += [report.summary() for report in outcome.reports]
        lines += [f"{key}: {value}" for key, value in outcome.summary.items()]
        path.write_text("\n".join(lines) + "\n", encoding='utf-8')
        return path
