"""
Experiment configuration files.

An experiment is described by an INI file with one section per concern:

    [experiment]   kind, dim, seed, output_dir
    [kernel]       name, vc_dim
    [target]       name plus catalogue parameters (sigma, weights, scales, scale, s, center, path)
    [quadrature]   mode, points, radius, order, seed
    [approx]       p, m_grid, trials, C_p, construction, greedy_steps, slope_tolerance
    [estimate]     s, kernel, candidate_rule, B3, trials, n_grid, m_rule, m_scale, C_2, ...
    [smoothing]    p, nu_grid, kernels, slope_tolerance
    [diagnostics]  nu, n_grid, trials, grid_points, atoms, weight_trials, seeds, slope_tolerance
    [invariants]   kernels, targets, p_values, nu_values, shift_count, fw_instances

Every key is typed; unknown sections and keys are errors that name the line.
"""

import configparser
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from mixtures.analysis import analysis_quadrature
from mixtures.errors import ConfigError, MixRateError
from mixtures.estimate import EstimationConfig
from mixtures.kernels import KERNEL_NAMES, KernelDensity, get_kernel
from mixtures.quadrature import QuadratureMode, QuadratureSpec
from mixtures.reports import config_digest
from mixtures.targets import TARGET_NAMES, TargetDensity, get_target

logger = logging.getLogger(__name__)


class ExperimentKind(str, Enum):
    APPROX_RATE = "approx_rate"
    ESTIMATE_RATE = "estimate_rate"
    SMOOTHING = "smoothing"
    DIAGNOSTICS = "diagnostics"
    INVARIANTS = "invariants"


# ============================================================================
# SECTION SETTINGS
# ============================================================================

@dataclass(frozen=True)
class KernelSettings:
    name: str = "gaussian"
    vc_dim: Optional[float] = None

    def build(self, dim: int) -> KernelDensity:
        return get_kernel(self.name, dim, self.vc_dim)


@dataclass(frozen=True)
class TargetSettings:
    name: str = "gaussian"
    params: Dict[str, Any] = field(default_factory=dict)

    def build(self, dim: int) -> TargetDensity:
        return get_target(self.name, dim, **self.params)


@dataclass(frozen=True)
class QuadratureSettings:
    """Overrides applied on top of the default analysis box"""

    mode: Optional[QuadratureMode] = None
    points: Optional[int] = None
    radius: Optional[float] = None
    order: int = 4
    seed: int = 0

    def resolve(self, f0: TargetDensity, kernel: KernelDensity, nu: float) -> QuadratureSpec:
        if self.radius is not None:
            spec = QuadratureSpec.box(self.radius, f0.dim, order=self.order, seed=self.seed)
            if f0.dim > 2:
                spec = replace(spec, mode=QuadratureMode.MONTE_CARLO, points=65536)
            elif f0.dim == 2:
                spec = spec.with_points(256)
        else:
            spec = analysis_quadrature(f0, kernel, nu, seed=self.seed)
        overrides = {'order': self.order}
        if self.mode is not None:
            overrides['mode'] = self.mode
        if self.points is not None:
            overrides['points'] = self.points
        return replace(spec, **overrides)


@dataclass(frozen=True)
class ApproxSettings:
    p: float = 2.0
    m_grid: Tuple[int, ...] = (4, 8, 16, 32, 64, 128, 256)
    trials: int = 20
    C_p: Optional[float] = None
    construction: str = "maurey"
    greedy_steps: int = 0
    slope_tolerance: float = 0.1


@dataclass(frozen=True)
class SmoothingSettings:
    p: float = 2.0
    nu_grid: Tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
    kernels: Tuple[str, ...] = ()
    slope_tolerance: float = 0.1


@dataclass(frozen=True)
class DiagnosticsSettings:
    nu: float = 2.0
    n_grid: Tuple[int, ...] = (100, 1000, 10000)
    trials: int = 20
    grid_points: int = 201
    atoms: int = 5
    weight_trials: int = 100
    seeds: int = 10
    slope_tolerance: float = 0.15


@dataclass(frozen=True)
class InvariantSettings:
    kernels: Tuple[str, ...] = ('gaussian', 'epanechnikov')
    targets: Tuple[str, ...] = ('gaussian', 'gaussian_scale_mixture', 'laplace', 'uniform_box')
    p_values: Tuple[float, ...] = (1.5, 2.0, 3.0)
    nu_values: Tuple[float, ...] = (0.25, 1.0, 4.0)
    shift_count: int = 12
    fw_instances: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    """A parsed, validated experiment file"""

    kind: ExperimentKind
    dim: int = 1
    seed: int = 0
    output_dir: Optional[str] = None
    kernel: KernelSettings = field(default_factory=KernelSettings)
    target: TargetSettings = field(default_factory=TargetSettings)
    quadrature: QuadratureSettings = field(default_factory=QuadratureSettings)
    approx: ApproxSettings = field(default_factory=ApproxSettings)
    estimate: EstimationConfig = field(default_factory=EstimationConfig)
    smoothing: SmoothingSettings = field(default_factory=SmoothingSettings)
    diagnostics: DiagnosticsSettings = field(default_factory=DiagnosticsSettings)
    invariants: InvariantSettings = field(default_factory=InvariantSettings)
    source: Path = Path("<memory>")
    config_hash: str = ""

    def with_seed(self, seed: int) -> 'ExperimentConfig':
        return replace(self, seed=seed, estimate=replace(self.estimate, seed=seed))


# ============================================================================
# VALUE PARSERS
# ============================================================================

def _int(raw: str) -> int:
    return int(raw)


def _float(raw: str) -> float:
    return float(raw)


def _str(raw: str) -> str:
    return raw.strip()


def _bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
        raise ValueError(f"not a boolean: {raw!r}")
    return configparser.ConfigParser.BOOLEAN_STATES[lowered]


def _list(item: Callable[[str], Any]) -> Callable[[str], Tuple]:
    def parse(raw: str) -> Tuple:
        parts = [p.strip() for p in raw.replace('\n', ',').split(',')]
        return tuple(item(p) for p in parts if p)
    return parse


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        value = raw.strip().lower()
        if value not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {raw!r}")
        return value
    return parse


SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    'experiment': {'kind': _choice(*(k.value for k in ExperimentKind)), 'dim': _int, 'seed': _int,
                   'output_dir': _str},
    'kernel': {'name': _choice(*KERNEL_NAMES), 'vc_dim': _float},
    'target': {'name': _choice(*TARGET_NAMES), 'sigma': _float, 'weights': _list(_float),
               'scales': _list(_float), 'scale': _float, 's': _float, 'center': _list(_float), 'path': _str},
    'quadrature': {'mode': _choice(*(m.value for m in QuadratureMode)), 'points': _int, 'radius': _float,
                   'order': _int, 'seed': _int},
    'approx': {'p': _float, 'm_grid': _list(_int), 'trials': _int, 'C_p': _float,
               'construction': _choice('maurey', 'greedy'), 'greedy_steps': _int, 'slope_tolerance': _float},
    'estimate': {'s': _float, 'kernel': _choice(*KERNEL_NAMES), 'candidate_rule': _choice('subsample', 'grid'),
                 'B3': _float, 'trials': _int, 'n_grid': _list(_int), 'm_rule': _choice('sqrt', 'scaled'),
                 'm_scale': _float, 'C_2': _float, 'max_iters': _int, 'slope_tolerance': _float,
                 'convex_trials': _int, 'negative_control': _bool},
    'smoothing': {'p': _float, 'nu_grid': _list(_float), 'kernels': _list(_choice(*KERNEL_NAMES)),
                  'slope_tolerance': _float},
    'diagnostics': {'nu': _float, 'n_grid': _list(_int), 'trials': _int, 'grid_points': _int, 'atoms': _int,
                    'weight_trials': _int, 'seeds': _int, 'slope_tolerance': _float},
    'invariants': {'kernels': _list(_choice(*KERNEL_NAMES)), 'targets': _list(_choice(*TARGET_NAMES)),
                   'p_values': _list(_float), 'nu_values': _list(_float), 'shift_count': _int,
                   'fw_instances': _int},
}

INCREASING = {('approx', 'm_grid'), ('estimate', 'n_grid'), ('smoothing', 'nu_grid'), ('diagnostics', 'n_grid')}
POSITIVE = {('experiment', 'dim'), ('approx', 'trials'), ('estimate', 'trials'), ('diagnostics', 'trials'),
            ('diagnostics', 'grid_points'), ('diagnostics', 'atoms'), ('diagnostics', 'seeds'),
            ('invariants', 'shift_count'), ('invariants', 'fw_instances'), ('quadrature', 'points'),
            ('quadrature', 'radius'), ('diagnostics', 'nu')}


# ============================================================================
# LOADING
# ============================================================================

_SECTION_RE = re.compile(r'^\s*\[([^\]]+)\]')
_KEY_RE = re.compile(r'^\s*([^=:#;\s][^=:]*?)\s*[=:]')


def _line_index(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    """(section, key) -> 1-based line number; key None marks the section header"""
    index: Dict[Tuple[str, Optional[str]], int] = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION_RE.match(line)
        if header:
            section = header.group(1).strip()
            index.setdefault((section, None), number)
            continue
        key = _KEY_RE.match(line)
        if key and section is not None and not line[:1].isspace():
            index.setdefault((section, key.group(1).strip()), number)
    return index


def _read(text: str, source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key '{exc.option}'", section=exc.section, field=exc.option, line=exc.lineno)
    except configparser.DuplicateSectionError as exc:
        raise ConfigError("duplicate section", section=exc.section, line=exc.lineno)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("content before the first [section] header", line=exc.lineno)
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"malformed line: {exc.errors[0][1] if exc.errors else ''}".strip(), line=line)
    return parser


def _typed_sections(parser: configparser.ConfigParser, lines) -> Dict[str, Dict[str, Any]]:
    values: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section (expected one of {', '.join(SCHEMA)})",
                              section=section, line=lines.get((section, None)))
        values[section] = {}
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key (expected one of {', '.join(SCHEMA[section])})",
                                  section=section, field=key, line=line)
            try:
                value = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"invalid value {raw!r}: {exc}", section=section, field=key, line=line)

            if isinstance(value, tuple) and not value:
                raise ConfigError("list must not be empty", section=section, field=key, line=line)
            if (section, key) in INCREASING and any(b <= a for a, b in zip(value, value[1:])):
                raise ConfigError("grid must be strictly increasing", section=section, field=key, line=line)
            if (section, key) in POSITIVE and value <= 0:
                raise ConfigError("value must be positive", section=section, field=key, line=line)
            values[section][key] = value
    return values


def _settings(cls, section: Dict[str, Any], section_name: str, lines):
    try:
        return cls(**section)
    except MixRateError as exc:
        raise ConfigError(str(exc), section=section_name, line=lines.get((section_name, None)))


def parse_config(text: str, source: str = "<memory>", config_hash: str = "") -> ExperimentConfig:
    """Parse and validate experiment INI text"""
    lines = _line_index(text)
    values = _typed_sections(_read(text, source), lines)

    experiment = values.get('experiment', {})
    if 'kind' not in experiment:
        raise ConfigError("missing required key", section='experiment', field='kind',
                          line=lines.get(('experiment', None)))
    kind = ExperimentKind(experiment['kind'])
    dim = experiment.get('dim', 1)
    seed = experiment.get('seed', 0)
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be a 64-bit unsigned integer", section='experiment', field='seed',
                          line=lines.get(('experiment', 'seed')))

    kernel_section = values.get('kernel', {})
    target_section = dict(values.get('target', {}))
    target_name = target_section.pop('name', 'gaussian')
    if target_name == 'tabulated' and 'path' in target_section:
        path = Path(target_section['path'])
        if not path.is_absolute() and source != "<memory>":
            target_section['path'] = str(Path(source).parent / path)

    quadrature = dict(values.get('quadrature', {}))
    if 'mode' in quadrature:
        quadrature['mode'] = QuadratureMode(quadrature['mode'])
    quadrature.setdefault('seed', seed)

    estimate = dict(values.get('estimate', {}))
    estimate.setdefault('kernel', kernel_section.get('name', 'gaussian'))
    estimate['seed'] = seed

    smoothing = dict(values.get('smoothing', {}))
    smoothing.setdefault('kernels', (kernel_section.get('name', 'gaussian'),))

    cfg = ExperimentConfig(
        kind=kind, dim=dim, seed=seed, output_dir=experiment.get('output_dir'),
        kernel=_settings(KernelSettings, kernel_section, 'kernel', lines),
        target=TargetSettings(name=target_name, params=target_section),
        quadrature=_settings(QuadratureSettings, quadrature, 'quadrature', lines),
        approx=_settings(ApproxSettings, values.get('approx', {}), 'approx', lines),
        estimate=_settings(EstimationConfig, estimate, 'estimate', lines),
        smoothing=_settings(SmoothingSettings, smoothing, 'smoothing', lines),
        diagnostics=_settings(DiagnosticsSettings, values.get('diagnostics', {}), 'diagnostics', lines),
        invariants=_settings(InvariantSettings, values.get('invariants', {}), 'invariants', lines),
        source=Path(source), config_hash=config_hash,
    )
    _check_kind(cfg, values, lines)
    return cfg


def _check_kind(cfg: ExperimentConfig, values, lines):
    """Checks that depend on which experiment runs"""
    required = {
        ExperimentKind.APPROX_RATE: ('approx', 'm_grid'),
        ExperimentKind.ESTIMATE_RATE: ('estimate', 'n_grid'),
        ExperimentKind.SMOOTHING: ('smoothing', 'nu_grid'),
    }.get(cfg.kind)
    if required and required[1] not in values.get(required[0], {}):
        raise ConfigError("missing required key", section=required[0], field=required[1],
                          line=lines.get((required[0], None)))
    if cfg.kind is ExperimentKind.APPROX_RATE and cfg.approx.p <= 1:
        raise ConfigError("p must exceed 1", section='approx', field='p', line=lines.get(('approx', 'p')))
    if cfg.kind is ExperimentKind.APPROX_RATE and cfg.approx.construction == 'greedy' and cfg.approx.p != 2:
        raise ConfigError("greedy construction needs p = 2", section='approx', field='construction',
                          line=lines.get(('approx', 'construction')))
    try:
        cfg.target.build(cfg.dim)
    except MixRateError as exc:
        raise ConfigError(str(exc), section='target', line=lines.get(('target', None)))


def load_config(path) -> ExperimentConfig:
    """Read, parse and hash an experiment file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding='utf-8')
    cfg = parse_config(text, source=str(path), config_hash=config_digest(path))
    logger.info(f"✅ Loaded {cfg.kind.value} config from {path} (hash {cfg.config_hash[:12]})")
    return cfg
