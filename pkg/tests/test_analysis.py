"""
Tests for norms, convolution, smoothing error and the empirical measure
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from mixtures.analysis import (
    EmpiricalMeasure, LpEstimate, analysis_quadrature, convolve, empirical_mean, expectation, lp_distance,
    lp_norm_values, smoothing_error, target_tail,
)
from mixtures.approx import maurey_sample
from mixtures.errors import InvalidParameterError, NumericalFailureError, SmoothnessUnknownError
from mixtures.kernels import dilate, get_kernel
from mixtures.quadrature import QuadratureSpec
from mixtures.targets import gaussian, laplace, uniform_box


class TestNorms:
    """Lp norms on the quadrature box"""

    def test_distance_to_self(self, standard_gaussian, line_quad):
        estimate = lp_distance(standard_gaussian.pdf, standard_gaussian.pdf, 2.0, line_quad)
        assert estimate == LpEstimate(value=0.0)
        assert estimate.remainder is None and estimate.upper is None

    def test_gaussian_l2_norm(self, standard_gaussian, line_quad):
        pts, _ = line_quad.nodes()
        value = lp_norm_values(standard_gaussian.pdf(pts), 2.0, line_quad)
        assert value == pytest.approx((4.0 * math.pi) ** -0.25, rel=1e-10)

    def test_non_finite_values_name_the_point(self, standard_gaussian, line_quad):
        def broken(x):
            out = standard_gaussian.pdf(x)
            out[np.argmin(np.abs(x[:, 0] - 1.0))] = np.inf
            return out

        with pytest.raises(NumericalFailureError) as excinfo:
            lp_distance(broken, standard_gaussian.pdf, 2.0, line_quad)
        assert excinfo.value.diagnostics['point'][0] == pytest.approx(1.0, abs=0.01)

    def test_p_below_one(self, line_quad):
        with pytest.raises(InvalidParameterError):
            lp_norm_values(np.ones(4096), 0.5, line_quad)

    def test_shifted_gaussian_closed_form(self, standard_gaussian, line_quad):
        shifted = gaussian(center=[0.5])
        exact = math.sqrt((1.0 - math.exp(-0.0625)) / math.sqrt(math.pi))
        tails = (target_tail(standard_gaussian, 2.0, line_quad), target_tail(shifted, 2.0, line_quad))
        estimate = lp_distance(standard_gaussian.pdf, shifted.pdf, 2.0, line_quad, tails=tails)
        assert estimate.value == pytest.approx(exact, rel=1e-8)
        assert estimate.value == pytest.approx(0.186, abs=2e-3)
        assert 0.0 <= estimate.remainder < 1e-20

    def test_remainder_brackets_the_untruncated_distance(self, standard_gaussian):
        quad = QuadratureSpec.box(2.0, 1)
        shifted = gaussian(center=[0.5])
        exact = math.sqrt((1.0 - math.exp(-0.0625)) / math.sqrt(math.pi))
        tails = (target_tail(standard_gaussian, 2.0, quad), target_tail(shifted, 2.0, quad))
        estimate = lp_distance(standard_gaussian.pdf, shifted.pdf, 2.0, quad, tails=tails)
        assert estimate.value < exact <= estimate.upper

    def test_remainder_needs_both_tails(self, standard_gaussian, line_quad):
        estimate = lp_distance(standard_gaussian.pdf, standard_gaussian.pdf, 2.0, line_quad, tails=(0.1, None))
        assert estimate.remainder is None
        assert target_tail(replace(standard_gaussian, exterior_mass=None), 2.0, line_quad) is None

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_triangle_inequality(self, standard_gaussian, gaussian_kernel, line_quad, p):
        f, g, h = (maurey_sample(standard_gaussian, gaussian_kernel, 1.5, 8, seed) for seed in (1, 2, 3))
        fh = lp_distance(f, h, p, line_quad).value
        fg = lp_distance(f, g, p, line_quad).value
        gh = lp_distance(g, h, p, line_quad).value
        assert fh <= fg + gh + 1e-12


class TestConvolution:
    """phi_nu * f0"""

    def test_gaussian_closed_form_matches_quadrature(self, standard_gaussian, gaussian_kernel, line_quad):
        dilated = dilate(gaussian_kernel, 2.0)
        x = np.linspace(-3.0, 3.0, 13)
        closed = convolve(dilated, standard_gaussian, x, line_quad)
        numeric = convolve(dilated, replace(standard_gaussian, gaussian_components=None), x, line_quad)
        assert np.allclose(closed, numeric, rtol=1e-8, atol=1e-12)

    def test_single_point_returns_scalar(self, standard_gaussian, gaussian_kernel, line_quad):
        value = convolve(dilate(gaussian_kernel, 1.0), standard_gaussian, 0.0, line_quad)
        assert isinstance(value, float)
        assert value == pytest.approx(1.0 / math.sqrt(4.0 * math.pi))

    def test_convolution_keeps_mass(self, epanechnikov_kernel):
        f0 = laplace()
        quad = analysis_quadrature(f0, epanechnikov_kernel, 2.0)
        pts, _ = quad.nodes()
        values = convolve(dilate(epanechnikov_kernel, 2.0), f0, pts, quad)
        assert quad.integrate(values) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("kernel_name", ['gaussian', 'epanechnikov'])
    def test_large_nu_recovers_the_target(self, standard_gaussian, line_quad, kernel_name):
        value = convolve(dilate(get_kernel(kernel_name), 64.0), standard_gaussian, 0.0, line_quad)
        assert value == pytest.approx(1.0 / math.sqrt(2.0 * math.pi), abs=1e-3)

    @pytest.mark.parametrize("kernel_name", ['gaussian', 'epanechnikov'])
    def test_young_bound(self, standard_gaussian, kernel_name):
        """||phi_nu * f0||_p <= ||phi_nu||_p ||f0||_1"""
        kernel = get_kernel(kernel_name)
        for nu in np.random.default_rng(7).uniform(0.5, 8.0, size=5):
            dilated = dilate(kernel, float(nu))
            quad = analysis_quadrature(standard_gaussian, kernel, float(nu))
            pts, _ = quad.nodes()
            values = convolve(dilated, standard_gaussian, pts, quad)
            for p in (1.5, 2.0, 3.0):
                assert lp_norm_values(values, p, quad) <= dilated.lp_norm(p) * (1.0 + 1e-9)

    def test_analysis_box_is_dyadic(self, standard_gaussian, gaussian_kernel):
        quad = analysis_quadrature(standard_gaussian, gaussian_kernel, 1.0)
        assert quad.upper == (16.0,)
        assert quad.points == 4096


class TestSmoothingError:
    """||phi_nu * f0 - f0||_p against K1 K2 nu^(-alpha)"""

    @pytest.mark.parametrize("kernel_name", ['gaussian', 'epanechnikov'])
    def test_bound_holds_on_nu_grid(self, standard_gaussian, kernel_name):
        kernel = get_kernel(kernel_name)
        previous = math.inf
        for nu in (1.0, 2.0, 4.0, 8.0, 16.0, 32.0):
            result = smoothing_error(standard_gaussian, kernel, nu, 2.0,
                                     analysis_quadrature(standard_gaussian, kernel, nu))
            assert result.holds
            assert result.measured < previous
            previous = result.measured

    def test_gaussian_constants(self, standard_gaussian, gaussian_kernel):
        result = smoothing_error(standard_gaussian, gaussian_kernel, 32.0, 2.0,
                                 analysis_quadrature(standard_gaussian, gaussian_kernel, 32.0))
        assert result.K1 == pytest.approx(math.sqrt(2.0 / math.pi))
        assert result.bound == pytest.approx(math.sqrt(2.0 / math.pi) * result.K2 / 32.0)

    def test_unknown_constant(self, gaussian_kernel):
        f0 = uniform_box()
        with pytest.raises(SmoothnessUnknownError):
            smoothing_error(f0, gaussian_kernel, 2.0, 3.0, analysis_quadrature(f0, gaussian_kernel, 2.0))


class TestEmpiricalMeasure:
    """P_n and P"""

    def test_draw_is_seeded(self, standard_gaussian):
        a = EmpiricalMeasure.draw(standard_gaussian, 50, 4)
        b = EmpiricalMeasure.draw(standard_gaussian, 50, 4)
        assert a.n == 50 and a.dim == 1 and a.seed == 4
        assert np.array_equal(a.sample, b.sample)

    def test_sample_is_read_only(self, standard_gaussian):
        mu = EmpiricalMeasure.draw(standard_gaussian, 10, 0)
        with pytest.raises(ValueError):
            mu.sample[0, 0] = 1.0

    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(InvalidParameterError):
            EmpiricalMeasure(sample=np.empty((0, 1)))
        with pytest.raises(InvalidParameterError):
            EmpiricalMeasure(sample=np.array([0.0, np.nan]))

    def test_empirical_and_true_expectation(self, standard_gaussian, line_quad):
        mu = EmpiricalMeasure.draw(standard_gaussian, 20000, 1)

        def square(x):
            return x[:, 0] ** 2

        assert expectation(square, standard_gaussian, line_quad) == pytest.approx(1.0, rel=1e-8)
        assert empirical_mean(mu, square) == pytest.approx(1.0, abs=0.05)

    def test_shuffle_is_a_permutation(self, standard_gaussian):
        mu = EmpiricalMeasure.draw(standard_gaussian, 30, 2)
        shuffled = mu.shuffled(7)
        assert np.array_equal(np.sort(shuffled[:, 0]), np.sort(mu.sample[:, 0]))
