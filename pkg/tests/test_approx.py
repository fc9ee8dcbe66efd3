"""
Tests for mixture models, rate constants and the approximation experiment
"""

import math
import textwrap

import numpy as np
import pytest

from mixtures.analysis import analysis_quadrature, convolve, lp_norm_values
from mixtures.approx import (
    MixtureModel, RateBranch, approx_rate_experiment, candidate_grid, descent_tally, greedy_refine,
    maurey_sample, optimal_nu, rate_bound_constants, rate_branch, rate_exponent, theorem_constant_K,
)
from mixtures.config import parse_config
from mixtures.errors import InvalidParameterError
from mixtures.kernels import conjugate, dilate
from mixtures.reports import Verdict
from mixtures.runner import TrialPool


class TestRateConstants:
    """Closed-form exponent, scale and constant"""

    @pytest.mark.parametrize("p, alpha, d, expected", [
        (2.0, 1.0, 1, -1.0 / 3.0),
        (1.5, 1.0, 1, -0.25),
        (3.0, 1.0, 1, -0.3),
        (2.0, 0.5, 2, -0.5 / 3.0),
    ])
    def test_rate_exponent(self, p, alpha, d, expected):
        assert rate_exponent(p, alpha, d) == pytest.approx(expected)

    def test_branches_agree_at_two(self):
        for alpha in (0.3, 1.0):
            for d in (1, 3):
                assert rate_exponent(2.0 - 1e-9, alpha, d) == pytest.approx(rate_exponent(2.0, alpha, d), abs=1e-6)
        assert rate_branch(1.99) is RateBranch.P_LT_2
        assert rate_branch(2.0) is RateBranch.P_GE_2

    def test_optimal_nu_worked_value(self):
        assert optimal_nu(8, 2.0, 1.0, 1, 1.0, 1.0, 1.0, 1.0) == pytest.approx(1.52628, rel=1e-5)

    def test_optimal_nu_grows_with_m(self):
        values = [optimal_nu(m, 1.5, 1.0, 1, 0.8, 0.4, 0.6, 2.0) for m in (4, 16, 64)]
        assert values[0] < values[1] < values[2]

    def test_constant_for_unit_inputs(self):
        assert theorem_constant_K(1.5, 1.0, 1, 1.0, 1.0, 1.0, 1.0) == pytest.approx(4.0)

    def test_bound_uses_constant_and_exponent(self):
        constants = rate_bound_constants(2.0, 1.0, 1, 0.8, 0.4, 0.5)
        assert constants.C_p == 1.0
        assert constants.q == conjugate(2.0) == 2.0
        assert constants.bound(64) == pytest.approx(constants.K * 64 ** (-1.0 / 3.0))

    @pytest.mark.parametrize("kwargs", [
        {'p': 1.0}, {'alpha': 0.0}, {'alpha': 1.5}, {'d': 0}, {'K1': 0.0}, {'C_p': -1.0}, {'m': 0},
    ])
    def test_invalid_inputs(self, kwargs):
        args = {'m': 8, 'p': 2.0, 'alpha': 1.0, 'd': 1, 'K1': 1.0, 'K2': 1.0, 'phi_norm_p': 1.0, 'C_p': 1.0}
        args.update(kwargs)
        with pytest.raises(InvalidParameterError):
            optimal_nu(**args)


class TestMixtureModel:
    """Weights, locations and evaluation"""

    def test_weights_must_sum_to_one(self, gaussian_kernel):
        with pytest.raises(InvalidParameterError):
            MixtureModel(weights=[0.5, 0.6], locations=[0.0, 1.0], nu=1.0, kernel=gaussian_kernel)

    def test_one_weight_per_location(self, gaussian_kernel):
        with pytest.raises(InvalidParameterError):
            MixtureModel(weights=[1.0], locations=[0.0, 1.0], nu=1.0, kernel=gaussian_kernel)

    def test_mixture_is_a_density(self, epanechnikov_kernel, line_quad):
        model = MixtureModel(weights=[0.2, 0.3, 0.5], locations=[-1.0, 0.0, 2.0], nu=3.0, kernel=epanechnikov_kernel)
        pts, _ = line_quad.nodes()
        values = model(pts)
        assert np.all(values >= 0)
        assert line_quad.integrate(values) == pytest.approx(1.0, abs=1e-3)

    def test_atoms_shape(self, gaussian_kernel):
        model = MixtureModel(weights=[0.5, 0.5], locations=[0.0, 1.0], nu=2.0, kernel=gaussian_kernel)
        assert model.atoms(np.linspace(-1, 1, 7)).shape == (7, 2)
        assert model.m == 2 and model.dim == 1

    def test_pruned_drops_zero_weights(self, gaussian_kernel):
        model = MixtureModel(weights=[0.0, 1.0], locations=[0.0, 1.0], nu=2.0, kernel=gaussian_kernel)
        pruned = model.pruned()
        assert pruned.m == 1
        assert pruned.locations[0, 0] == 1.0

    def test_tail_of_bounded_atoms(self, epanechnikov_kernel):
        model = MixtureModel(weights=[0.5, 0.5], locations=[-1.0, 1.0], nu=1.0, kernel=epanechnikov_kernel)
        assert model.tail_mass([-2.0], [2.0]) == 0.0
        assert model.lp_tail(2.0, [-2.0], [2.0]) == 0.0
        assert model.tail_mass([-2.0], [1.0]) == 0.5
        assert model.lp_tail(2.0, [-2.0], [1.0]) == pytest.approx(math.sqrt(0.75 * 0.5))

    def test_tail_of_gaussian_atoms(self, gaussian_kernel):
        from scipy.stats import norm
        model = MixtureModel(weights=[1.0], locations=[0.0], nu=2.0, kernel=gaussian_kernel)
        assert model.tail_mass([-1.0], [1.0]) == pytest.approx(2.0 * norm.sf(2.0), rel=1e-12)


class TestConstructions:
    """Maurey sampling and greedy refinement"""

    def test_maurey_sample_is_seeded(self, standard_gaussian, gaussian_kernel):
        a = maurey_sample(standard_gaussian, gaussian_kernel, 2.0, 16, 11)
        b = maurey_sample(standard_gaussian, gaussian_kernel, 2.0, 16, 11)
        assert a.m == 16
        assert np.allclose(a.weights, 1.0 / 16)
        assert np.array_equal(a.locations, b.locations)

    def test_maurey_dimension_mismatch(self, standard_gaussian):
        from mixtures.kernels import get_kernel
        with pytest.raises(InvalidParameterError):
            maurey_sample(standard_gaussian, get_kernel('gaussian', dim=2), 1.0, 4, 0)

    def test_maurey_error_within_sampling_bound(self, standard_gaussian, gaussian_kernel):
        nu = 2.0
        quad = analysis_quadrature(standard_gaussian, gaussian_kernel, nu)
        pts, _ = quad.nodes()
        smoothed = convolve(dilate(gaussian_kernel, nu), standard_gaussian, pts, quad)
        for seed in range(5):
            model = maurey_sample(standard_gaussian, gaussian_kernel, nu, 32, seed)
            sampling = lp_norm_values(model(pts) - smoothed, 2.0, quad)
            assert sampling <= 2.0 * dilate(gaussian_kernel, nu).lp_norm(2.0)

    def test_greedy_refinement_lowers_error(self, standard_gaussian, gaussian_kernel):
        nu = 2.0
        quad = analysis_quadrature(standard_gaussian, gaussian_kernel, nu)
        dilated = dilate(gaussian_kernel, nu)

        def reference(x):
            return convolve(dilated, standard_gaussian, x, quad)

        pts, _ = quad.nodes()
        start = maurey_sample(standard_gaussian, gaussian_kernel, nu, 8, 3)
        refined = greedy_refine(start, reference, 2.0, quad, steps=20,
                                candidates=candidate_grid(quad.fitted(4.0), nu, gaussian_kernel))
        before = lp_norm_values(start(pts) - reference(pts), 2.0, quad)
        after = lp_norm_values(refined(pts) - reference(pts), 2.0, quad)
        assert after < before
        assert refined.weights.sum() == pytest.approx(1.0)

    def test_greedy_recovers_a_grid_atom(self, standard_gaussian, gaussian_kernel):
        nu = 2.0
        quad = analysis_quadrature(standard_gaussian, gaussian_kernel, nu)
        reference = MixtureModel(weights=[1.0], locations=[0.0], nu=nu, kernel=gaussian_kernel)
        start = MixtureModel(weights=[1.0], locations=[3.0], nu=nu, kernel=gaussian_kernel)
        trace = []
        refined = greedy_refine(start, reference, 2.0, quad, steps=5,
                                candidates=candidate_grid(quad.fitted(4.0), nu, gaussian_kernel), trace=trace)
        pts, _ = quad.nodes()
        heaviest = int(np.argmax(refined.weights))
        assert refined.weights[heaviest] == pytest.approx(1.0, abs=1e-12)
        assert refined.locations[heaviest, 0] == 0.0
        assert lp_norm_values(refined(pts) - reference(pts), 2.0, quad) < 1e-8
        assert trace[0] > 0.1
        assert trace[1] < 1e-20

    def test_greedy_trace_is_nonincreasing(self, standard_gaussian, gaussian_kernel):
        nu = 2.0
        quad = analysis_quadrature(standard_gaussian, gaussian_kernel, nu)
        dilated = dilate(gaussian_kernel, nu)
        trace = []
        greedy_refine(maurey_sample(standard_gaussian, gaussian_kernel, nu, 8, 3),
                      lambda x: convolve(dilated, standard_gaussian, x, quad), 2.0, quad, steps=15,
                      candidates=candidate_grid(quad.fitted(4.0), nu, gaussian_kernel), trace=trace)
        ok, total = descent_tally(trace)
        assert total == len(trace) - 1 > 0
        assert ok == total

    def test_descent_tally_counts_rises(self):
        assert descent_tally([3.0, 2.0, 2.5, 1.0]) == (2, 3)
        assert descent_tally([1.0]) == (0, 0)

    @pytest.mark.parametrize("m", [4, 16, 64])
    def test_maurey_variance_identity(self, standard_gaussian, gaussian_kernel, m):
        """E||f_m - phi_nu * f0||_2^2 = (||phi_nu||_2^2 - ||phi_nu * f0||_2^2) / m"""
        nu = 2.0
        quad = analysis_quadrature(standard_gaussian, gaussian_kernel, nu)
        pts, _ = quad.nodes()
        smoothed = convolve(dilate(gaussian_kernel, nu), standard_gaussian, pts, quad)
        expected = (dilate(gaussian_kernel, nu).lp_norm(2.0) ** 2 - lp_norm_values(smoothed, 2.0, quad) ** 2) / m
        squared = [lp_norm_values(maurey_sample(standard_gaussian, gaussian_kernel, nu, m, seed)(pts) - smoothed,
                                  2.0, quad) ** 2 for seed in range(50)]
        assert np.mean(squared) == pytest.approx(expected, rel=0.35)

    def test_greedy_needs_l2(self,standard_gaussian, gaussian_kernel, line_quad):
        start = maurey_sample(standard_gaussian, gaussian_kernel, 1.0, 4, 0)
        with pytest.raises(InvalidParameterError):
            greedy_refine(start, standard_gaussian.pdf, 1.5, line_quad, steps=3)

    def test_greedy_needs_candidates(self, standard_gaussian, gaussian_kernel, line_quad):
        start = maurey_sample(standard_gaussian, gaussian_kernel, 1.0, 4, 0)
        with pytest.raises(InvalidParameterError):
            greedy_refine(start, standard_gaussian.pdf, 2.0, line_quad, steps=3, candidates=np.empty((0, 1)))

    def test_candidate_grid_spacing(self, gaussian_kernel, unit_quad):
        grid = candidate_grid(unit_quad, 2.0, gaussian_kernel)
        assert grid[:, 0] == pytest.approx(np.arange(-8, 9) * 0.125)


class TestApproxExperiment:
    """The approximation rate experiment on a small grid"""

    @pytest.mark.asyncio
    async def test_small_grid_report(self, small_approx_config):
        cfg = parse_config(textwrap.dedent(small_approx_config))
        async with TrialPool(threads=2) as pool:
            report = await approx_rate_experiment(cfg, pool)

        assert [row.size for row in report.rows] == [4, 16, 64]
        assert report.theoretical_exponent == pytest.approx(-1.0 / 3.0)
        assert report.checks['decomposition']['passed'] == report.checks['decomposition']['total'] == 12
        assert report.checks['sampling_bound']['passed'] == 12
        assert all(row.within_bound for row in report.rows)
        assert report.rows[0].mean_error > report.rows[-1].mean_error
        assert report.header()[:2] == ['m', 'nu']
        assert report.verdict in (Verdict.PASS, Verdict.FAIL)
        assert 'greedy_descent' not in report.checks

    @pytest.mark.asyncio
    async def test_tail_remainder_column(self, small_approx_config):
        cfg = parse_config(textwrap.dedent(small_approx_config))
        async with TrialPool(threads=2) as pool:
            report = await approx_rate_experiment(cfg, pool)
        assert report.header()[-3:] == ['tail_remainder', 'within_bound', 'config_hash']
        for row in report.rows:
            assert 0.0 <= row.extra['tail_remainder'] < 1e-6

    @pytest.mark.asyncio
    async def test_greedy_descent_is_tallied(self, small_approx_config):
        text = textwrap.dedent(small_approx_config) + "construction = greedy\ngreedy_steps = 6\n"
        cfg = parse_config(text)
        async with TrialPool(threads=2) as pool:
            report = await approx_rate_experiment(cfg, pool)
        tally = report.checks['greedy_descent']
        assert tally['total'] > 0
        assert tally['passed'] == tally['total']
        assert report.details['construction'] == 'greedy'

    @pytest.mark.asyncio
    async def test_rising_greedy_objective_fails_the_run(self, small_approx_config, monkeypatch):
        import mixtures.approx as approx_module
        monkeypatch.setattr(approx_module, 'descent_tally', lambda trace: (0, 1))
        cfg = parse_config(textwrap.dedent(small_approx_config) + "construction = greedy\ngreedy_steps = 2\n")
        async with TrialPool(threads=1) as pool:
            report = await approx_rate_experiment(cfg, pool)
        assert report.checks['greedy_descent'] == {'passed': 0, 'total': 12}
        assert report.verdict is Verdict.FAIL

    @pytest.mark.asyncio
    async def test_results_do_not_depend_on_threads(self, small_approx_config):
        cfg = parse_config(textwrap.dedent(small_approx_config))
        async with TrialPool(threads=1) as pool:
            serial = await approx_rate_experiment(cfg, pool)
        async with TrialPool(threads=3) as pool:
            parallel = await approx_rate_experiment(cfg, pool)
        assert [r.mean_error for r in serial.rows] == [r.mean_error for r in parallel.rows]

    @pytest.mark.slow
    @pytest.mark.asyncio
    async def test_full_grid_reaches_rate(self):
        cfg = parse_config("""
[experiment]
kind = approx_rate
seed = 20240601

[approx]
p = 2
m_grid = 4, 8, 16, 32, 64, 128, 256
trials = 20
""")
        async with TrialPool(threads=4) as pool:
            report = await approx_rate_experiment(cfg, pool)
        assert report.fit.slope <= -1.0 / 3.0 + 0.1
        assert report.verdict is Verdict.PASS
        assert math.isfinite(report.details['best_of_trials_slope'])
