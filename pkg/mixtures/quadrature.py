"""
Quadrature rules shared by every integral in the toolkit.

A QuadratureSpec describes a truncated box [lower, upper] and how it is
sampled: either a tensor grid built from a composite Gauss-Legendre rule
(`order` nodes inside each cell, never on a cell edge) or stratified Monte
Carlo nodes from a Latin hypercube. Node tables are memoised and read-only.
"""

import logging
import math
import threading
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence, Tuple, Union

import numpy as np
from cachetools import LRUCache, cached
from cachetools.keys import hashkey
from scipy.stats import qmc

from mixtures.errors import InvalidParameterError

logger = logging.getLogger(__name__)

MIN_COUNT = 16
MAX_ORDER = 10

# Default resolutions per dimension
DEFAULT_POINTS_1D = 4096
DEFAULT_POINTS_2D = 256
DEFAULT_MC_SAMPLES = 65536

DEFAULT_CACHE_MAXSIZE = 64

_node_lock = threading.RLock()


class QuadratureMode(str, Enum):
    TENSOR_GRID = "tensor_grid"
    MONTE_CARLO = "monte_carlo"


def _as_bound(value: Union[float, Sequence[float]], dim: int = None) -> Tuple[float, ...]:
    if np.isscalar(value):
        return (float(value),) * (dim or 1)
    return tuple(float(v) for v in value)


@dataclass(frozen=True)
class QuadratureSpec:
    """How an integral over a truncated box is discretised"""

    mode: QuadratureMode = QuadratureMode.TENSOR_GRID
    lower: Tuple[float, ...] = (-8.0,)
    upper: Tuple[float, ...] = (8.0,)
    points: int = DEFAULT_POINTS_1D
    seed: int = 0
    order: int = 4

    def __post_init__(self):
        try:
            mode = QuadratureMode(self.mode)
        except ValueError:
            raise InvalidParameterError(
                f"unknown quadrature mode '{self.mode}' "
                f"(expected one of {[m.value for m in QuadratureMode]})"
            )
        object.__setattr__(self, 'mode', mode)
        object.__setattr__(self, 'lower', _as_bound(self.lower))
        object.__setattr__(self, 'upper', _as_bound(self.upper))

        if len(self.lower) != len(self.upper) or not self.lower:
            raise InvalidParameterError("lower and upper bounds must have the same positive length")
        for axis, (a, b) in enumerate(zip(self.lower, self.upper)):
            if not (math.isfinite(a) and math.isfinite(b)) or a >= b:
                raise InvalidParameterError(f"bounds on axis {axis} must be finite and strictly ordered, got [{a}, {b}]")
        if int(self.points) != self.points or self.points < MIN_COUNT:
            raise InvalidParameterError(f"point count must be an integer >= {MIN_COUNT}, got {self.points}")
        if not 1 <= self.order <= MAX_ORDER:
            raise InvalidParameterError(f"order must lie in [1, {MAX_ORDER}], got {self.order}")
        if mode is QuadratureMode.TENSOR_GRID and self.points % self.order:
            raise InvalidParameterError(
                f"tensor grid points ({self.points}) must be a multiple of the rule order ({self.order})"
            )
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @classmethod
    def box(cls, radius: float, dim: int, points: int = DEFAULT_POINTS_1D,
            mode: QuadratureMode = QuadratureMode.TENSOR_GRID, seed: int = 0,
            order: int = 4) -> 'QuadratureSpec':
        """Symmetric box [-radius, radius]^dim"""
        if radius <= 0:
            raise InvalidParameterError(f"box radius must be positive, got {radius}")
        return cls(mode=mode, lower=(-float(radius),) * dim, upper=(float(radius),) * dim,
                   points=points, seed=seed, order=order)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def node_count(self) -> int:
        if self.mode is QuadratureMode.TENSOR_GRID:
            return self.points ** self.dim
        return self.points

    @property
    def step(self) -> float:
        """Mean node spacing, the 'h' of grid-refinement arguments"""
        if self.mode is QuadratureMode.TENSOR_GRID:
            return float(np.max(np.subtract(self.upper, self.lower))) / self.points
        return (self.volume / self.points) ** (1.0 / self.dim)

    def with_bounds(self, lower, upper) -> 'QuadratureSpec':
        return replace(self, lower=_as_bound(lower, self.dim), upper=_as_bound(upper, self.dim))

    def fitted(self, radius: Union[float, Sequence[float]]) -> 'QuadratureSpec':
        """Same resolution, mode and seed on the box [-radius, radius]"""
        half = np.broadcast_to(np.asarray(radius, dtype=float), (self.dim,))
        return self.with_bounds(tuple(-half), tuple(half))

    def with_points(self, points: int) -> 'QuadratureSpec':
        if self.mode is QuadratureMode.TENSOR_GRID:
            points = max(self.order * (points // self.order), self.order * math.ceil(MIN_COUNT / self.order))
        return replace(self, points=int(points))

    def covers(self, lower, upper) -> bool:
        lower = _as_bound(lower, self.dim)
        upper = _as_bound(upper, self.dim)
        return all(a <= lo and b >= hi for a, b, lo, hi in zip(self.lower, self.upper, lower, upper))

    def nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        """(points of shape (N, d), weights of shape (N,))"""
        if self.mode is QuadratureMode.TENSOR_GRID:
            return _tensor_nodes(self.lower, self.upper, self.points, self.order)
        return _monte_carlo_nodes(self.lower, self.upper, self.points, self.seed)

    def integrate(self, values: np.ndarray) -> float:
        _, weights = self.nodes()
        # numpy reduces contiguous float arrays pairwise, so the order is fixed
        return float(np.sum(np.asarray(values, dtype=float) * weights))


def _build_tensor_nodes(lower, upper, points, order):
    base_x, base_w = np.polynomial.legendre.leggauss(order)
    axes, axis_weights = [], []
    for a, b in zip(lower, upper):
        cells = points // order
        width = (b - a) / cells
        left = a + width * np.arange(cells)
        x = (left[:, None] + 0.5 * width * (base_x[None, :] + 1.0)).ravel()
        w = np.tile(0.5 * width * base_w, cells)
        axes.append(x)
        axis_weights.append(w)

    grids = np.meshgrid(*axes, indexing='ij')
    pts = np.stack([g.ravel() for g in grids], axis=1)
    weight_grids = np.meshgrid(*axis_weights, indexing='ij')
    weights = np.prod(np.stack([g.ravel() for g in weight_grids], axis=1), axis=1)

    pts.setflags(write=False)
    weights.setflags(write=False)
    logger.debug(f"Built tensor grid: {pts.shape[0]} nodes over {lower}..{upper}")
    return pts, weights


def _build_monte_carlo_nodes(lower, upper, points, seed):
    sampler = qmc.LatinHypercube(d=len(lower), seed=np.random.default_rng(seed))
    pts = qmc.scale(sampler.random(points), lower, upper)
    volume = float(np.prod(np.subtract(upper, lower)))
    weights = np.full(points, volume / points)

    pts.setflags(write=False)
    weights.setflags(write=False)
    return pts, weights


def _tensor_key(lower, upper, points, order):
    return hashkey('tensor', lower, upper, points, order)


def _monte_carlo_key(lower, upper, points, seed):
    return hashkey('mc', lower, upper, points, seed)


def configure_node_cache(maxsize: int = DEFAULT_CACHE_MAXSIZE):
    """Replace the node-table cache with an empty LRU cache of the given size"""
    global _node_cache, _tensor_nodes, _monte_carlo_nodes
    if int(maxsize) != maxsize or maxsize < 1:
        raise InvalidParameterError(f"cache size must be a positive integer, got {maxsize}")
    with _node_lock:
        _node_cache = LRUCache(maxsize=int(maxsize))
        _tensor_nodes = cached(cache=_node_cache, key=_tensor_key, lock=_node_lock)(_build_tensor_nodes)
        _monte_carlo_nodes = cached(cache=_node_cache, key=_monte_carlo_key, lock=_node_lock)(_build_monte_carlo_nodes)


def node_cache_size() -> Tuple[int, int]:
    """(entries, capacity) of the node-table cache"""
    return int(_node_cache.currsize), int(_node_cache.maxsize)


configure_node_cache()


def dyadic_radius(radius: float) -> float:
    """Smallest power of two >= radius, so compact supports meet cell edges"""
    if radius <= 0:
        raise InvalidParameterError(f"radius must be positive, got {radius}")
    return float(2.0 ** math.ceil(math.log2(radius)))


def default_quadrature(dim: int, radius: float, seed: int = 0) -> QuadratureSpec:
    """Tensor grid for d <= 2, stratified Monte Carlo above"""
    radius = dyadic_radius(radius)
    if dim == 1:
        return QuadratureSpec.box(radius, dim, points=DEFAULT_POINTS_1D, seed=seed)
    if dim == 2:
        return QuadratureSpec.box(radius, dim, points=DEFAULT_POINTS_2D, seed=seed)
    return QuadratureSpec.box(radius, dim, points=DEFAULT_MC_SAMPLES,
                              mode=QuadratureMode.MONTE_CARLO, seed=seed)


def as_points(x, dim: int) -> np.ndarray:
    """Coerce a point or a batch of points to shape (N, dim)"""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if dim != 1:
            raise InvalidParameterError(f"scalar point given for dimension {dim}")
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        if dim == 1:
            return arr.reshape(-1, 1)
        if arr.shape[0] != dim:
            raise InvalidParameterError(f"point of length {arr.shape[0]} given for dimension {dim}")
        return arr.reshape(1, dim)
    if arr.ndim == 2 and arr.shape[1] == dim:
        return arr
    raise InvalidParameterError(f"expected points of shape (N, {dim}), got {arr.shape}")
