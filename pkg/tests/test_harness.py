"""
Tests for configuration, reports, the trial pool and the mixrate harness
"""

import json
import logging
import textwrap

import numpy as np
import pytest

import mixrate
from mixrate import HarnessSettings, MixRateHarness
from mixtures import configure_caches
from mixtures.config import ExperimentKind, load_config, parse_config
from mixtures.errors import ConfigError, InsufficientDataError, NumericalFailureError
from mixtures.quadrature import DEFAULT_CACHE_MAXSIZE, QuadratureSpec, node_cache_size
from mixtures.reports import (
    EXIT_ERROR, Provenance, RateReport, RateRow, Verdict, config_digest, fit_loglog_slope, rate_verdict,
    verify_provenance,
)
from mixtures.runner import ExperimentOutcome, TrialPool, combine_verdicts, trial_seed


@pytest.fixture
def quiet_env(monkeypatch, tmp_path):
    """Keep harness settings independent of the developer's environment"""
    for name in ('MIXRATE_OUT_DIR', 'MIXRATE_LOG_LEVEL', 'MIXRATE_CACHE_MAXSIZE', 'MIXRATE_THREADS'):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv('MIXRATE_LOG_FILE', '')
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def harness(quiet_env):
    return MixRateHarness(HarnessSettings())


@pytest.fixture
def restore_caches():
    yield
    configure_caches(DEFAULT_CACHE_MAXSIZE)


def _report(rows, verdict=Verdict.PASS, config_hash="abc"):
    return RateReport(experiment='approx_rate', rows=rows, fit=fit_loglog_slope(rows), theoretical_exponent=-0.5,
                      constant_K=1.0, verdict=verdict, provenance=Provenance(config_hash=config_hash, seed=1),
                      lead_columns=['nu'], tail_columns=['best_error'])


class TestConfigParsing:
    """INI parsing, typing and validation"""

    def test_defaults(self):
        cfg = parse_config("[experiment]\nkind = invariants\n")
        assert cfg.kind is ExperimentKind.INVARIANTS
        assert cfg.dim == 1 and cfg.seed == 0
        assert cfg.kernel.name == 'gaussian'
        assert cfg.approx.m_grid == (4, 8, 16, 32, 64, 128, 256)

    def test_typed_values(self, small_approx_config):
        cfg = parse_config(textwrap.dedent(small_approx_config))
        assert cfg.approx.p == 2.0
        assert cfg.approx.m_grid == (4, 16, 64)
        assert cfg.seed == 5
        assert cfg.estimate.seed == 5

    def test_seed_override(self, small_approx_config):
        cfg = parse_config(textwrap.dedent(small_approx_config)).with_seed(77)
        assert cfg.seed == 77 and cfg.estimate.seed == 77

    @pytest.mark.parametrize("text, section, field, line", [
        ("[experiment]\nkind = approx_rate\n\n[approx]\nm_grid = 4, 16, 8\n", 'approx', 'm_grid', 5),
        ("[experiment]\nkind = approx_rate\n[approx]\nm_grid = 4, 8, 16\np = 1\n", 'approx', 'p', 5),
        ("[experiment]\nkind = approx_rate\nseed = -1\n[approx]\nm_grid = 4, 8, 16\n", 'experiment', 'seed', 3),
        ("[experiment]\nkind = smoothing\n", 'smoothing', 'nu_grid', None),
        ("[experiment]\nkind = invariants\ncolour = blue\n", 'experiment', 'colour', 3),
        ("[experiment]\nkind = invariants\n[kernel]\nname = cauchy\n", 'kernel', 'name', 4),
    ])
    def test_errors_name_the_location(self, text, section, field, line):
        with pytest.raises(ConfigError) as excinfo:
            parse_config(text)
        assert excinfo.value.section == section
        assert excinfo.value.field == field
        assert excinfo.value.line == line

    def test_missing_kind(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_config("[experiment]\nseed = 1\n")
        assert excinfo.value.field == 'kind'
        assert str(excinfo.value).startswith("[experiment] kind (line 1)")

    def test_unknown_section(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_config("[experiment]\nkind = invariants\n\n[plotting]\ndpi = 300\n")
        assert excinfo.value.line == 4

    def test_greedy_needs_l2(self):
        with pytest.raises(ConfigError):
            parse_config("[experiment]\nkind = approx_rate\n[approx]\np = 1.5\nm_grid = 4, 8, 16\n"
                         "construction = greedy\n")

    def test_load_records_hash(self, write_config, small_approx_config):
        path = write_config(small_approx_config)
        cfg = load_config(path)
        assert cfg.config_hash == config_digest(path)
        assert len(cfg.config_hash) == 64

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")


class TestReports:
    """Slope fits, verdicts and report files"""

    def test_exact_power_law(self):
        rows = [(m, 3.0 * m ** -0.5) for m in (4, 16, 64, 256)]
        fit = fit_loglog_slope(rows)
        assert fit.slope == pytest.approx(-0.5)
        assert fit.intercept == pytest.approx(np.log(3.0))
        assert fit.r_squared == pytest.approx(1.0)

    def test_nonpositive_rows_are_dropped(self):
        fit = fit_loglog_slope([(1, 1.0), (2, 0.0), (4, 0.25), (8, 0.125)])
        assert fit.slope == pytest.approx(-1.0)

    def test_too_few_rows(self):
        with pytest.raises(InsufficientDataError):
            fit_loglog_slope([(1, 1.0), (2, 0.5), (4, -1.0)])

    def test_verdicts(self):
        held = [RateRow(size=1, mean_error=1.0, std_error=0.0, within_bound=True)]
        broken = [RateRow(size=1, mean_error=1.0, std_error=0.0, within_bound=False)]
        fit = fit_loglog_slope([(1, 1.0), (2, 0.5), (4, 0.25)])
        assert rate_verdict(fit, -1.0, 0.1, held, certified=True) is Verdict.PASS
        assert rate_verdict(fit, -1.2, 0.1, held, certified=True) is Verdict.FAIL
        assert rate_verdict(fit, -1.0, 0.1, broken, certified=True) is Verdict.FAIL
        assert rate_verdict(fit, -1.0, 0.1, broken, certified=False) is Verdict.NOT_CERTIFIED

    def test_exit_codes(self):
        assert [v.exit_code for v in Verdict] == [0, 2, 3]
        assert EXIT_ERROR == 1

    def test_csv_layout(self, tmp_path):
        rows = [RateRow(size=m, mean_error=m ** -0.5, std_error=0.01, bound=1.0, within_bound=True,
                        extra={'nu': 1.5, 'best_error': 0.1}) for m in (4, 16, 64)]
        path = _report(rows).to_csv(tmp_path / "rate.csv")
        lines = path.read_text(encoding='utf-8').splitlines()
        assert lines[0] == "m,nu,mean_error,std_error,bound,best_error,within_bound,config_hash"
        assert lines[1] == "4,1.5,0.5,0.01,1,0.10000000000000001,true,abc"
        assert len(lines) == 4

    def test_json_round_trips_fields(self, tmp_path):
        rows = [RateRow(size=m, mean_error=m ** -0.5, std_error=0.0, extra={'nu': np.float64(2.0)})
                for m in (4, 16, 64)]
        path = _report(rows).to_json(tmp_path / "rate.json")
        data = json.loads(path.read_text(encoding='utf-8'))
        assert data['slope'] == pytest.approx(-0.5)
        assert data['verdict'] == 'pass'
        assert data['provenance'] == {'config_hash': 'abc', 'seed': 1, 'config_path': ''}
        assert data['rows'][0]['nu'] == 2.0

    def test_provenance(self, tmp_path, write_config, small_approx_config):
        path = write_config(small_approx_config)
        rows = [RateRow(size=m, mean_error=1.0 / m, std_error=0.0) for m in (4, 16, 64)]
        report = _report(rows, config_hash=config_digest(path)).to_json(tmp_path / "rate.json")
        assert verify_provenance(report, path)
        path.write_text(path.read_text(encoding='utf-8') + "\n# edited\n", encoding='utf-8')
        assert not verify_provenance(report, path)


class TestTrialPool:
    """Threaded trials gathered in order"""

    @pytest.mark.asyncio
    async def test_results_keep_submission_order(self):
        async with TrialPool(threads=4) as pool:
            results = await pool.map(lambda k: k * k, range(20))
        assert results == [k * k for k in range(20)]
        assert pool.stats['trials'] == 20
        assert pool.stats['batches'] == 1

    def test_trial_streams_are_independent_of_order(self):
        a = np.random.default_rng(trial_seed(1, 2, 3)).normal(size=4)
        b = np.random.default_rng(trial_seed(1, 2, 3)).normal(size=4)
        c = np.random.default_rng(trial_seed(1, 3, 2)).normal(size=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_thread_count(self):
        with pytest.raises(ValueError):
            TrialPool(threads=0)

    def test_combined_verdicts(self):
        assert combine_verdicts([]) is Verdict.PASS
        assert combine_verdicts([Verdict.PASS, Verdict.NOT_CERTIFIED]) is Verdict.NOT_CERTIFIED
        assert combine_verdicts([Verdict.NOT_CERTIFIED, Verdict.FAIL, Verdict.PASS]) is Verdict.FAIL
        assert ExperimentOutcome(name='x', verdict=Verdict.FAIL).exit_code == 2


class TestHarnessSettings:
    """Environment-driven settings"""

    def test_defaults(self, quiet_env):
        settings = HarnessSettings()
        assert settings.out_dir is None
        assert settings.log_level == 'INFO'
        assert settings.cache_maxsize == 64
        assert settings.threads >= 1

    def test_from_env(self, quiet_env, monkeypatch):
        monkeypatch.setenv('MIXRATE_THREADS', '3')
        monkeypatch.setenv('MIXRATE_OUT_DIR', 'runs')
        monkeypatch.setenv('MIXRATE_LOG_LEVEL', 'debug')
        settings = HarnessSettings()
        assert settings.threads == 3
        assert settings.out_dir == 'runs'
        assert settings.log_level == 'DEBUG'

    @pytest.mark.parametrize("raw", ['abc', '0', '-2'])
    def test_bad_integers(self, quiet_env, monkeypatch, raw):
        monkeypatch.setenv('MIXRATE_THREADS', raw)
        with pytest.raises(ConfigError):
            HarnessSettings()

    @pytest.mark.parametrize("name", ['MIXRATE_THREADS', 'MIXRATE_CACHE_MAXSIZE'])
    def test_bad_values_per_variable(self, quiet_env, monkeypatch, name):
        monkeypatch.setenv(name, '0')
        with pytest.raises(ConfigError) as excinfo:
            HarnessSettings()
        assert name in str(excinfo.value)

    def test_cache_size_reaches_library(self, quiet_env, monkeypatch, restore_caches):
        monkeypatch.setenv('MIXRATE_CACHE_MAXSIZE', '3')
        MixRateHarness(HarnessSettings())
        assert node_cache_size() == (0, 3)
        for radius in (1.0, 2.0, 3.0, 4.0, 5.0):
            QuadratureSpec.box(radius, 1, points=64).nodes()
        assert node_cache_size() == (3, 3)


    def test_out_dir_precedence(self, quiet_env, monkeypatch):
        cfg = parse_config("[experiment]\nkind = invariants\noutput_dir = from_config\n")
        assert str(MixRateHarness(HarnessSettings()).resolve_out_dir(None, cfg)) == 'from_config'
        monkeypatch.setenv('MIXRATE_OUT_DIR', 'from_env')
        harness = MixRateHarness(HarnessSettings())
        assert str(harness.resolve_out_dir(None, cfg)) == 'from_env'
        assert str(harness.resolve_out_dir('from_flag', cfg)) == 'from_flag'
        bare = parse_config("[experiment]\nkind = invariants\n")
        assert str(MixRateHarness(HarnessSettings()).resolve_out_dir(None, bare)) == 'from_env'


class TestHarness:
    """Plugin loading, error handling and end-to-end runs"""

    def test_stats_initialization(self, harness):
        assert harness.stats['experiments_run'] == 0
        assert harness.stats['errors_occurred'] == 0
        assert harness.max_error_log == 50

    def test_error_log_is_bounded(self, harness):
        for k in range(55):
            assert harness.handle_error(ConfigError(f"bad {k}"), 'approx-rate') == EXIT_ERROR
        assert len(harness.recent_errors) == 50
        assert harness.recent_errors[-1]['error_message'] == "bad 54"
        assert harness.stats['errors_occurred'] == 55

    def test_error_types_are_recorded(self, harness):
        harness.handle_error(NumericalFailureError("diverged", {'point': 1.0}), 'smoothing')
        harness.handle_error(RuntimeError("boom"), 'smoothing')
        assert [e['error_type'] for e in harness.recent_errors] == ['NumericalFailureError', 'RuntimeError']

    def test_session_summary_lists_errors(self, harness):
        harness.handle_error(ConfigError("bad config"), 'smoothing')
        harness.handle_error(RuntimeError("boom"), 'invariants')
        lines = harness.session_summary()
        assert len(lines) == 3
        assert "0/0 experiment(s)" in lines[0] and "2 error(s)" in lines[0]
        assert lines[1].endswith("smoothing: ConfigError: bad config")
        assert lines[2].endswith("invariants: RuntimeError: boom")

    @pytest.mark.asyncio
    async def test_loads_every_plugin(self, harness):
        await harness.load_experiments()
        assert set(harness.experiments) == {k.value for k in ExperimentKind}

    @pytest.mark.asyncio
    async def test_missing_plugin_directory(self, harness, tmp_path):
        await harness.load_experiments(tmp_path / "absent")
        assert harness.experiments == {}

    @pytest.mark.asyncio
    async def test_end_to_end_run(self, harness, write_config, small_approx_config, tmp_path):
        path = write_config(small_approx_config)
        await harness.load_experiments()
        code = await harness.run('approx-rate', path, out=str(tmp_path / "out"), threads=2)
        assert code in (0, 2, 3)
        out = tmp_path / "out"
        assert (out / "rate_report.csv").exists()
        assert (out / "approx_rate_summary.txt").exists()
        assert verify_provenance(out / "rate_report.json", path)
        assert harness.stats['experiments_completed'] == 1
        assert harness.stats['trials_executed'] == 12

    @pytest.mark.asyncio
    async def test_kind_mismatch(self, harness, write_config, small_approx_config, tmp_path):
        path = write_config(small_approx_config)
        await harness.load_experiments()
        code = await harness.run('estimate-rate', path, out=str(tmp_path / "out"))
        assert code == EXIT_ERROR
        assert harness.recent_errors[-1]['error_type'] == 'ConfigError'
        assert not (tmp_path / "out").exists()

    def test_main_missing_config(self, quiet_env, tmp_path):
        assert mixrate.main(['smoothing', '--config', str(tmp_path / "missing.ini")]) == EXIT_ERROR

    def test_main_logs_session_summary(self, quiet_env, tmp_path, caplog):
        caplog.set_level(logging.INFO)
        assert mixrate.main(['smoothing', '--config', str(tmp_path / "missing.ini")]) == EXIT_ERROR
        assert "📊 Session: 0/1 experiment(s) completed" in caplog.text
        assert "smoothing: ConfigError" in caplog.text


    def test_main_runs_smoothing(self, quiet_env, write_config, tmp_path):
        path = write_config("""
            [experiment]
            kind = smoothing

            [smoothing]
            nu_grid = 1, 2, 4, 8
            kernels = gaussian
        """)
        code = mixrate.main(['smoothing', '--config', str(path), '--out', str(tmp_path / "out"), '--threads', '2'])
        assert code == 0
        assert (tmp_path / "out" / "smoothing_gaussian.csv").exists()

    def test_main_needs_a_command(self, quiet_env):
        with pytest.raises(SystemExit):
            mixrate.main([])

    def test_parser_commands(self):
        parser = mixrate.build_parser()
        args = parser.parse_args(['estimate-rate', '--config', 'x.ini', '--seed', '4'])
        assert args.command == 'estimate-rate'
        assert args.seed == 4
