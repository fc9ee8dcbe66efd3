"""
Rate reports: per-size rows, the fitted log-log slope, the verdict, and the
CSV/JSON artifacts every experiment writes.
"""

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.stats import linregress

from mixtures.errors import InsufficientDataError

logger = logging.getLogger(__name__)

MIN_FIT_ROWS = 3


class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    NOT_CERTIFIED = "not_certified"

    @property
    def exit_code(self) -> int:
        return {Verdict.PASS: 0, Verdict.FAIL: 2, Verdict.NOT_CERTIFIED: 3}[self]


EXIT_ERROR = 1


@dataclass
class RateRow:
    """One grid point of a rate experiment"""

    size: Union[int, float]
    mean_error: float
    std_error: float
    bound: Optional[float] = None
    within_bound: Optional[bool] = None
    extra: Dict[str, Any] = field(default_factory=dict)


class SlopeFit(NamedTuple):
    slope: float
    intercept: float
    r_squared: float


@dataclass(frozen=True)
class Provenance:
    config_hash: str
    seed: int
    config_path: str = ""


def _pairs(rows) -> List[tuple]:
    pairs = []
    for row in rows:
        if isinstance(row, RateRow):
            pairs.append((float(row.size), float(row.mean_error)))
        else:
            size, value = row
            pairs.append((float(size), float(value)))
    return pairs


def fit_loglog_slope(rows: Iterable[Union[RateRow, Sequence[float]]]) -> SlopeFit:
    """OLS of log(value) on log(size); nonpositive values are dropped with a warning"""
    pairs = _pairs(rows)
    usable = [(x, y) for x, y in pairs if x > 0 and y > 0 and math.isfinite(y)]
    dropped = len(pairs) - len(usable)
    if dropped:
        logger.warning(f"⚠️ Dropped {dropped} row(s) with nonpositive or non-finite values from the log-log fit")
    if len(usable) < MIN_FIT_ROWS:
        raise InsufficientDataError(f"a log-log fit needs at least {MIN_FIT_ROWS} usable rows, got {len(usable)}")

    x = np.log([u[0] for u in usable])
    y = np.log([u[1] for u in usable])
    if np.ptp(x) == 0:
        raise InsufficientDataError("all sizes are equal; the slope is undefined")
    fit = linregress(x, y)
    return SlopeFit(slope=float(fit.slope), intercept=float(fit.intercept), r_squared=float(fit.rvalue ** 2))


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), '.17g')
    return str(value)


@dataclass
class RateReport:
    """Rows, fit and verdict of one rate experiment"""

    experiment: str
    rows: List[RateRow]
    fit: Optional[SlopeFit]
    theoretical_exponent: Optional[float]
    constant_K: Optional[float]
    verdict: Verdict
    provenance: Provenance
    size_column: str = "m"
    error_column: str = "mean_error"
    std_column: str = "std_error"
    lead_columns: List[str] = field(default_factory=list)
    tail_columns: List[str] = field(default_factory=list)
    checks: Dict[str, Any] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def fitted_slope(self) -> Optional[float]:
        return self.fit.slope if self.fit else None

    def header(self) -> List[str]:
        return ([self.size_column, *self.lead_columns, self.error_column, self.std_column, 'bound',
                 *self.tail_columns, 'within_bound', 'config_hash'])

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(self.header())
            for row in self.rows:
                writer.writerow([
                    _cell(row.size),
                    *(_cell(row.extra.get(c)) for c in self.lead_columns),
                    _cell(row.mean_error), _cell(row.std_error), _cell(row.bound),
                    *(_cell(row.extra.get(c)) for c in self.tail_columns),
                    _cell(row.within_bound), self.provenance.config_hash,
                ])
        return path

    def to_dict(self) -> Dict[str, Any]:
        return {
            'experiment': self.experiment,
            'slope': self.fit.slope if self.fit else None,
            'intercept': self.fit.intercept if self.fit else None,
            'r_squared': self.fit.r_squared if self.fit else None,
            'exponent': self.theoretical_exponent,
            'K': self.constant_K,
            'verdict': self.verdict.value,
            'provenance': asdict(self.provenance),
            'checks': self.checks,
            'details': self.details,
            'rows': [
                {self.size_column: r.size, self.error_column: r.mean_error, self.std_column: r.std_error,
                 'bound': r.bound, 'within_bound': r.within_bound, **r.extra}
                for r in self.rows
            ],
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', encoding='utf-8') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True, default=_json_default)
            handle.write('\n')
        return path

    def summary(self) -> str:
        lines = [f"📊 {self.experiment}: verdict {self.verdict.value.upper()}"]
        if self.fit:
            lines.append(f"   fitted slope {self.fit.slope:+.4f} (r^2 {self.fit.r_squared:.4f})")
        if self.theoretical_exponent is not None:
            lines.append(f"   theoretical exponent {self.theoretical_exponent:+.4f}")
        if self.constant_K is not None:
            lines.append(f"   constant K {self.constant_K:.6g}")
        for name, tally in self.checks.items():
            lines.append(f"   {name}: {tally}")
        return "\n".join(lines)


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Enum):
        return value.value
    raise TypeError(f"cannot serialise {type(value).__name__}")


def rate_verdict(fit: SlopeFit, exponent: float, tolerance: float, rows: Sequence[RateRow],
                 certified: bool) -> Verdict:
    """pass iff the slope reaches the exponent (within tolerance) and certified bounds hold"""
    slope_ok = fit.slope <= exponent + tolerance
    bounds_ok = all(r.within_bound is not False for r in rows)
    if not slope_ok:
        return Verdict.FAIL
    if bounds_ok:
        return Verdict.PASS
    return Verdict.FAIL if certified else Verdict.NOT_CERTIFIED


def config_digest(path) -> str:
    """sha256 of the config file bytes"""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def verify_provenance(report_json, config_path) -> bool:
    """True iff the report was produced from this exact config file"""
    with Path(report_json).open(encoding='utf-8') as handle:
        report = json.load(handle)
    recorded = report.get('provenance', {}).get('config_hash')
    actual = config_digest(config_path)
    if recorded != actual:
        logger.warning(f"⚠️ Provenance mismatch for {report_json}: recorded {recorded}, config hashes to {actual}")
        return False
    return True
