"""
Shared fixtures for the mixrate test suite
"""

import os
import sys
import textwrap

import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mixtures.kernels import get_kernel  # noqa: E402
from mixtures.quadrature import QuadratureSpec, default_quadrature  # noqa: E402
from mixtures.targets import gaussian  # noqa: E402


@pytest.fixture
def gaussian_kernel():
    return get_kernel('gaussian')


@pytest.fixture
def epanechnikov_kernel():
    return get_kernel('epanechnikov')


@pytest.fixture
def standard_gaussian():
    return gaussian(sigma=1.0)


@pytest.fixture
def line_quad():
    """[-16, 16] with 4096 Gauss nodes"""
    return default_quadrature(1, 9.0)


@pytest.fixture
def unit_quad():
    return QuadratureSpec.box(1.0, 1)


@pytest.fixture
def write_config(tmp_path):
    """Write dedented INI text to a file and return its path"""
    def _write(text: str, name: str = "experiment.ini"):
        path = tmp_path / name
        path.write_text(textwrap.dedent(text).lstrip(), encoding='utf-8')
        return path
    return _write


@pytest.fixture
def small_approx_config():
    return """
        [experiment]
        kind = approx_rate
        dim = 1
        seed = 5

        [kernel]
        name = gaussian

        [target]
        name = gaussian

        [approx]
        p = 2
        m_grid = 4, 16, 64
        trials = 4
    """


@pytest.fixture
def small_estimate_config():
    return """
        [experiment]
        kind = estimate_rate
        seed = 9

        [target]
        name = gaussian

        [estimate]
        s = 1
        n_grid = 64, 128, 256
        trials = 3
        convex_trials = 5
    """
