"""
Invariant Battery
Deterministic property checks over the kernel and target catalogues and the weight solver.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List

import numpy as np

from mixtures.approx import rate_exponent
from mixtures.estimate import fit_weights_frank_wolfe, gram_matrix
from mixtures.kernels import conjugate, dilate, dilated_lp_norm, get_kernel, kernel_lp_norm, kernel_mass, kernel_moment
from mixtures.quadrature import QuadratureSpec, default_quadrature, dyadic_radius
from mixtures.reports import Verdict
from mixtures.runner import Experiment, ExperimentOutcome, TrialPool
from mixtures.targets import default_shift_grid, get_target, resolve_smoothness, translation_modulus

logger = logging.getLogger(__name__)

DILATION_RTOL = 1e-5
MASS_ATOL = 1e-6
MOMENT_RTOL = 1e-4
MODULUS_RTOL = 1e-3
MODULUS_ATOL = 1e-8
PSD_TOL = 1e-10
FW_EPSILON = 1e-3
FW_SLACK = 1e-6
BRANCH_ATOL = 1e-6
BRUTE_FORCE_STEP = 1e-3


@dataclass
class InvariantRecord:
    check: str
    case: str
    value: float
    limit: float
    passed: bool


def _compositions(parts: int, total: int) -> np.ndarray:
    """Nonnegative integer rows of length parts summing to total"""
    if parts == 1:
        return np.array([[total]])
    axes = np.meshgrid(*[np.arange(total + 1)] * (parts - 1), indexing='ij')
    head = np.stack([a.ravel() for a in axes], axis=1)
    head = head[head.sum(axis=1) <= total]
    return np.hstack([head, total - head.sum(axis=1, keepdims=True)])


def brute_force_minimum(G: np.ndarray, b: np.ndarray, step: float = BRUTE_FORCE_STEP) -> float:
    """min of w'Gw - 2b'w over the step grid on the simplex, one slice per first coordinate"""
    m = b.size
    total = int(round(1.0 / step))
    if m == 1:
        return float(G[0, 0] - 2.0 * b[0])
    best = math.inf
    for first in range(total + 1):
        rest = _compositions(m - 1, total - first)
        grid = np.hstack([np.full((rest.shape[0], 1), first), rest]) / total
        values = np.sum((grid @ G) * grid, axis=1) - 2.0 * grid @ b
        best = min(best, float(values.min()))
    return best


class InvariantChecks:
    """Groups of checks; each method returns its records"""

    def __init__(self, cfg):
        self.settings = cfg.invariants
        self.seed = cfg.seed

    def dilation_identity(self) -> List[InvariantRecord]:
        records = []
        for name in self.settings.kernels:
            for d in (1, 2):
                kernel = get_kernel(name, d)
                quad = default_quadrature(d, 1.0)
                for p in self.settings.p_values:
                    for nu in self.settings.nu_values:
                        measured = dilated_lp_norm(kernel, nu, p, quad)
                        expected = nu ** (d / conjugate(p)) * kernel_lp_norm(kernel, p)
                        gap = abs(measured - expected) / measured
                        records.append(InvariantRecord('dilation_identity', f"{name} d={d} p={p} nu={nu}",
                                                       gap, DILATION_RTOL, gap <= DILATION_RTOL))
        return records

    def normalisation(self) -> List[InvariantRecord]:
        records = []
        for name in self.settings.kernels:
            for d in (1, 2):
                kernel = get_kernel(name, d)
                quad = default_quadrature(d, 1.0)
                for nu in self.settings.nu_values:
                    gap = abs(kernel_mass(dilate(kernel, nu), quad) - 1.0)
                    records.append(InvariantRecord('normalisation', f"{name} d={d} nu={nu}",
                                                   gap, MASS_ATOL, gap <= MASS_ATOL))
        return records

    def moment_scaling(self) -> List[InvariantRecord]:
        records = []
        for name in self.settings.kernels:
            kernel = get_kernel(name, 1)
            quad = default_quadrature(1, 1.0)
            base = kernel_moment(kernel, 1.0, quad)
            for nu in self.settings.nu_values:
                measured = kernel_moment(dilate(kernel, nu), 1.0, quad, use_closed_form=False)
                gap = abs(measured - base / nu) / (base / nu)
                records.append(InvariantRecord('moment_scaling', f"{name} nu={nu}", gap, MOMENT_RTOL,
                                               gap <= MOMENT_RTOL))
        return records

    def smoothness_inequalities(self) -> List[InvariantRecord]:
        records = []
        for name in self.settings.targets:
            f0 = get_target(name, 1)
            shifts = default_shift_grid(f0, self.settings.shift_count)
            radius = dyadic_radius(f0.effective_support_radius + float(np.abs(shifts).max()))
            # one cell per smallest shift, so every shifted kink or jump sits on a cell edge
            cells = int(round(2.0 * radius / float(np.abs(shifts[:, 0]).min())))
            quad = QuadratureSpec.box(radius, 1, points=4 * cells)
            for p in self.settings.p_values:
                if not f0.smoothness_for(p).known and f0.gradient is None:
                    logger.debug(f"Skipping {name} at p={p}: no analytic smoothness constant")
                    continue
                spec = resolve_smoothness(f0, p, quad)
                for y in shifts:
                    size = float(np.linalg.norm(y))
                    modulus = translation_modulus(f0, y, p, quad)
                    limit = spec.K2 * size ** spec.alpha * (1.0 + MODULUS_RTOL) + MODULUS_ATOL
                    records.append(InvariantRecord(f'smoothness_{spec.kind.value}', f"{name} p={p} |y|={size:g}",
                                                   modulus, limit, modulus <= limit))
        return records

    def gram_psd(self) -> List[InvariantRecord]:
        records = []
        rng = np.random.default_rng([self.seed, 1])
        for name in self.settings.kernels:
            kernel = get_kernel(name, 1)
            for nu in self.settings.nu_values:
                locations = rng.uniform(-2.0 / nu, 2.0 / nu, size=(8, 1))
                G = gram_matrix(locations, kernel, nu, default_quadrature(1, 1.0))
                eigenvalues = np.linalg.eigvalsh(G)
                floor = -PSD_TOL * max(1.0, float(eigenvalues.max()))
                records.append(InvariantRecord('gram_psd', f"{name} nu={nu}", float(eigenvalues.min()), floor,
                                               bool(eigenvalues.min() >= floor)))
        return records

    def frank_wolfe_certificate(self) -> List[InvariantRecord]:
        records = []
        rng = np.random.default_rng([self.seed, 2])
        for instance in range(self.settings.fw_instances):
            m = 2 + instance % 3
            A = rng.normal(size=(m, m))
            G = A @ A.T + 0.1 * np.eye(m)
            b = rng.normal(size=m)
            fit = fit_weights_frank_wolfe(G, b, FW_EPSILON)
            best = brute_force_minimum(G, b)
            shortfall = fit.empirical_risk - best
            case = f"instance={instance} m={m} step={BRUTE_FORCE_STEP:g}"
            records.append(InvariantRecord('frank_wolfe_certificate', case, shortfall, FW_EPSILON + FW_SLACK,
                                           shortfall <= FW_EPSILON + FW_SLACK))
        return records

    def branch_continuity(self) -> List[InvariantRecord]:
        records = []
        for alpha in (0.5, 1.0):
            for d in (1, 2):
                gap = abs(rate_exponent(2.0 - 1e-9, alpha, d) - rate_exponent(2.0, alpha, d))
                records.append(InvariantRecord('branch_continuity', f"alpha={alpha} d={d}", gap, BRANCH_ATOL,
                                               gap <= BRANCH_ATOL))
        return records

    def groups(self) -> List[Callable[[], List[InvariantRecord]]]:
        return [self.dilation_identity, self.normalisation, self.moment_scaling, self.smoothness_inequalities,
                self.gram_psd, self.frank_wolfe_certificate, self.branch_continuity]


class InvariantsExperiment(Experiment):
    """Runs every invariant group and writes one record per case"""

    name = "invariants"
    description = "dilation, normalisation, smoothness, Gram and solver invariants"

    def write_records(self, records: List[InvariantRecord], cfg, out_dir: Path) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "invariants.csv"
        with csv_path.open('w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(['check', 'case', 'value', 'limit', 'passed', 'config_hash'])
            for r in records:
                writer.writerow([r.check, r.case, format(r.value, '.17g'), format(r.limit, '.17g'),
                                 'true' if r.passed else 'false', cfg.config_hash])

        json_path = out_dir / "invariants_report.json"
        with json_path.open('w', encoding='utf-8') as handle:
            json.dump({
                'experiment': self.name,
                'verdict': self.tally_verdict(records).value,
                'checks': self.tallies(records),
                'provenance': {'config_hash': cfg.config_hash, 'seed': cfg.seed, 'config_path': str(cfg.source)},
                'records': [{**asdict(r), 'passed': bool(r.passed), 'value': float(r.value),
                             'limit': float(r.limit)} for r in records],
            }, handle, indent=2, sort_keys=True)
            handle.write('\n')
        logger.info(f"💾 Wrote {csv_path} and {json_path}")
        return [csv_path, json_path]

    @staticmethod
    def tallies(records: List[InvariantRecord]):
        out = {}
        for r in records:
            tally = out.setdefault(r.check, {'passed': 0, 'total': 0})
            tally['passed'] += int(bool(r.passed))
            tally['total'] += 1
        return out

    @staticmethod
    def tally_verdict(records: List[InvariantRecord]) -> Verdict:
        return Verdict.PASS if all(r.passed for r in records) else Verdict.FAIL

    async def run(self, cfg, pool: TrialPool, out_dir: Path) -> ExperimentOutcome:
        checks = InvariantChecks(cfg)
        batches = await pool.map(lambda group: group(), checks.groups())
        records = [record for batch in batches for record in batch]
        for r in records:
            if not r.passed:
                logger.warning(f"⚠️ {r.check} failed for {r.case}: {r.value:.6g} vs limit {r.limit:.6g}")

        tallies = self.tallies(records)
        for name, tally in tallies.items():
            logger.info(f"📊 {name}: {tally['passed']}/{tally['total']}")
        verdict = self.tally_verdict(records)
        outcome = ExperimentOutcome(name=self.name, verdict=verdict,
                                    artifacts=self.write_records(records, cfg, out_dir),
                                    summary={name: f"{t['passed']}/{t['total']}" for name, t in tallies.items()})
        outcome.artifacts.append(self.write_summary(outcome, out_dir))
        return outcome


async def setup(harness):
    harness.add_experiment(InvariantsExperiment(harness))
