#!/usr/bin/env python3
"""
mixrate - convergence-rate harness for location-scale mixtures
Runs approximation, estimation, smoothing, diagnostic and invariant experiments
described by INI files, and writes CSV/JSON reports with a pass/fail verdict.

Exit codes: 0 pass, 1 error, 2 fail, 3 not certified.
"""

import argparse
import asyncio
import importlib
import logging
import os
import sys
import time
import traceback
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import psutil
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from mixtures import configure_caches  # noqa: E402
from mixtures.config import ExperimentKind, load_config  # noqa: E402
from mixtures.errors import (  # noqa: E402
    ConfigError, InsufficientDataError, InvalidParameterError, MixRateError, NumericalFailureError,
    QuadratureDomainError, SmoothnessUnknownError, UnsupportedKernelError, UnsupportedTargetError,
)
from mixtures.reports import EXIT_ERROR  # noqa: E402
from mixtures.runner import Experiment, TrialPool  # noqa: E402

logger = logging.getLogger('mixrate')

EXPERIMENTS_DIR = Path(__file__).resolve().parent / "experiments"
DEFAULT_OUT_DIR = "results"
COMMANDS = tuple(kind.value.replace('_', '-') for kind in ExperimentKind)


class HarnessSettings:
    """Process-level settings from the environment"""

    def __init__(self):
        self.out_dir = os.getenv('MIXRATE_OUT_DIR') or None
        self.log_level = os.getenv('MIXRATE_LOG_LEVEL', 'INFO').upper()
        self.log_file = os.getenv('MIXRATE_LOG_FILE', 'mixrate.log')
        self.cache_maxsize = self._positive_int('MIXRATE_CACHE_MAXSIZE', 64)
        self.threads = self._positive_int('MIXRATE_THREADS', psutil.cpu_count(logical=False) or 1)

    @staticmethod
    def _positive_int(name: str, default: int) -> int:
        raw = os.getenv(name)
        if raw is None or raw == "":
            return default
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"environment variable {name} must be an integer, got '{raw}'")
        if value < 1:
            raise ConfigError(f"environment variable {name} must be positive, got {value}")
        return value


def configure_logging(settings: HarnessSettings):
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if settings.log_file:
        handlers.insert(0, logging.FileHandler(settings.log_file))
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, settings.log_level, logging.INFO),
        handlers=handlers,
    )


class MixRateHarness:
    """Registers experiment plugins and runs one of them per invocation"""

    def __init__(self, settings: Optional[HarnessSettings] = None):
        self.settings = settings or HarnessSettings()
        self.experiments: Dict[str, Experiment] = {}

        self.stats = {
            'start_time': time.time(),
            'experiments_run': 0,
            'experiments_completed': 0,
            'errors_occurred': 0,
            'trials_executed': 0,
        }
        self.recent_errors: List[Dict[str, Any]] = []
        self.max_error_log = 50

        configure_caches(self.settings.cache_maxsize)

    def add_experiment(self, experiment: Experiment):
        self.experiments[experiment.name] = experiment

    async def load_experiments(self, directory: Path = EXPERIMENTS_DIR):
        """Load every plugin module from the experiments directory"""
        if not directory.exists():
            logger.warning(f"📁 Experiments directory {directory} not found")
            return

        plugin_files = [f for f in sorted(directory.glob("*.py")) if f.is_file() and not f.name.startswith("__")]
        for plugin_file in plugin_files:
            module_name = f"{directory.name}.{plugin_file.stem}"
            try:
                module = importlib.import_module(module_name)
                await module.setup(self)
                logger.debug(f"✅ Loaded experiment: {module_name}")
            except Exception as e:
                logger.error(f"❌ Failed to load experiment {plugin_file.name}: {e}")

        logger.info(f"📦 Total experiments loaded: {len(self.experiments)}")

    def update_stats(self, stat_type: str, value: int = 1):
        if stat_type in self.stats:
            self.stats[stat_type] += value

    def add_error(self, error_info: Dict[str, Any]):
        self.recent_errors.append(error_info)
        if len(self.recent_errors) > self.max_error_log:
            self.recent_errors.pop(0)

    def session_summary(self) -> List[str]:
        """Closing log lines: counters, then the recorded errors oldest first"""
        elapsed = time.time() - self.stats['start_time']
        lines = [f"📊 Session: {self.stats['experiments_completed']}/{self.stats['experiments_run']} experiment(s) "
                 f"completed, {self.stats['trials_executed']} trial(s), "
                 f"{self.stats['errors_occurred']} error(s) in {elapsed:.1f}s"]
        for error in self.recent_errors:
            lines.append(f"   {error['timestamp']:%H:%M:%S} {error['command']}: "
                         f"{error['error_type']}: {error['error_message']}")
        return lines

    def resolve_out_dir(self, out: Optional[str], cfg) -> Path:
        """--out, then MIXRATE_OUT_DIR, then the config's output_dir, then ./results"""
        return Path(out or self.settings.out_dir or cfg.output_dir or DEFAULT_OUT_DIR)

    def handle_error(self, error: BaseException, command: str) -> int:
        """Log one message per error type and return the error exit code"""
        self.update_stats('errors_occurred')
        self.add_error({
            'timestamp': datetime.now(),
            'command': command,
            'error_type': type(error).__name__,
            'error_message': str(error),
            'traceback': traceback.format_exc(),
        })

        if isinstance(error, ConfigError):
            logger.error(f"❌ Invalid configuration: {error}")
        elif isinstance(error, SmoothnessUnknownError):
            logger.error(f"❌ Missing smoothness constant: {error}")
        elif isinstance(error, UnsupportedKernelError):
            logger.error(f"❌ Unsupported kernel: {error}")
        elif isinstance(error, UnsupportedTargetError):
            logger.error(f"❌ Unsupported target: {error}")
        elif isinstance(error, QuadratureDomainError):
            logger.error(f"❌ Quadrature box too small: {error}")
            logger.error("💡 Increase [quadrature] radius or remove it to use the automatic box")
        elif isinstance(error, InsufficientDataError):
            logger.error(f"❌ Not enough data: {error}")
        elif isinstance(error, NumericalFailureError):
            logger.error(f"❌ Numerical failure: {error}")
            logger.error(f"📋 Diagnostics: {error.diagnostics}")
        elif isinstance(error, InvalidParameterError):
            logger.error(f"❌ Invalid parameter: {error}")
        elif isinstance(error, MixRateError):
            logger.error(f"❌ {error}")
        elif isinstance(error, OSError):
            logger.error(f"❌ File system error: {error}")
        else:
            logger.error(f"🔍 Unexpected error: {error}")
            logger.error(traceback.format_exc())
        return EXIT_ERROR

    async def run(self, command: str, config_path, out: Optional[str] = None,
                  threads: Optional[int] = None, seed: Optional[int] = None) -> int:
        """Run one experiment and return its exit code"""
        self.update_stats('experiments_run')
        try:
            kind = ExperimentKind(command.replace('-', '_'))
            cfg = load_config(config_path)
            if cfg.kind is not kind:
                raise ConfigError(f"config describes '{cfg.kind.value}', not '{kind.value}'",
                                  section='experiment', field='kind')
            if seed is not None:
                cfg = cfg.with_seed(seed)

            experiment = self.experiments.get(kind.value)
            if experiment is None:
                raise MixRateError(f"no experiment plugin registered for '{kind.value}'")

            out_dir = self.resolve_out_dir(out, cfg)
            out_dir.mkdir(parents=True, exist_ok=True)
            threads = threads or self.settings.threads
            memory = psutil.virtual_memory()
            logger.info(f"🤖 Running {kind.value} (seed {cfg.seed}, {threads} thread(s), "
                        f"{memory.available / 2 ** 30:.1f} GiB free) -> {out_dir}")

            async with TrialPool(threads) as pool:
                outcome = await experiment.run(cfg, pool, out_dir)
                self.update_stats('trials_executed', pool.stats['trials'])

            self.update_stats('experiments_completed')
            elapsed = time.time() - self.stats['start_time']
            logger.info(f"✅ {kind.value} finished in {elapsed:.1f}s: verdict {outcome.verdict.value}")
            return outcome.exit_code
        except Exception as error:
            return self.handle_error(error, command)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='mixrate', description=__doc__.strip().splitlines()[0])
    commands = parser.add_subparsers(dest='command', required=True)
    for command in COMMANDS:
        sub = commands.add_parser(command)
        sub.add_argument('--config', required=True, help="experiment INI file")
        sub.add_argument('--out', default=None, help="output directory")
        sub.add_argument('--threads', type=int, default=None, help="worker threads for trials")
        sub.add_argument('--seed', type=int, default=None, help="override the config seed")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, load plugins and run the requested experiment"""
    args = build_parser().parse_args(argv)
    try:
        settings = HarnessSettings()
    except ConfigError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error(f"❌ {e}")
        return EXIT_ERROR
    configure_logging(settings)

    harness = MixRateHarness(settings)

    async def _run() -> int:
        await harness.load_experiments()
        return await harness.run(args.command, args.config, args.out, args.threads, args.seed)

    try:
        return asyncio.run(_run())
    except KeyboardInterrupt:
        logger.warning("⚠️ Interrupted")
        return EXIT_ERROR
    finally:
        for line in harness.session_summary():
            logger.info(line)


if __name__ == '__main__':
    sys.exit(main())
