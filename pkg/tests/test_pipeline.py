import numpy as np
import pytest

from treebal.balance import BalanceProblem, estimate_att, lambda_heuristic, solve_weights
from treebal.errors import InvalidSpecError
from treebal.forest import ForestParams
from treebal.kernel import MODE_KERNEL_PLUS_RAW, MODE_RAW_ONLY, assemble_features
from treebal.pipeline import (
    FitDiagnostics,
    PipelineConfig,
    run_cross_fit,
    run_forest_kbal,
    run_monte_carlo,
    summarize_metrics,
    write_metrics_csv,
    METRICS_CSV_HEADER,
)
from treebal.sim import DgpSpec, gen_dataset, true_att


def _split(sample):
    controls = np.flatnonzero(sample.Z == 0)
    return sample.subset(controls[: controls.size // 2])


SMALL_FOREST = ForestParams(T=10, min_leaf=5)


def _rf_config(**kw):
    kw.setdefault("kernel", "rf")
    kw.setdefault("mode", MODE_KERNEL_PLUS_RAW)
    kw.setdefault("r", 5)
    kw.setdefault("forest_params", SMALL_FOREST)
    return PipelineConfig(**kw)


class TestSingleFit:
    def test_raw_only_matches_direct_balance_path(self):
        sample = gen_dataset(DgpSpec(kind="tarr", n=300, seed=21))
        config = PipelineConfig(kernel="none", mode=MODE_RAW_ONLY, r=0)
        result = run_forest_kbal(None, sample, config)
        feats = assemble_features(sample.X, None, MODE_RAW_ONLY)
        lam = lambda_heuristic(feats, sample.Y, sample.Z)
        sol = solve_weights(BalanceProblem(feats, sample.Z, lam))
        att = estimate_att(sol.w, sample.Y, sample.Z)
        assert result.att_estimates[0] == pytest.approx(att, abs=1e-10)
        assert result.true_att == pytest.approx(true_att(sample))

    def test_pilot_with_treated_rows_rejected(self):
        sample = gen_dataset(DgpSpec(kind="tarr", n=200, seed=22))
        config = _rf_config()
        with pytest.raises(InvalidSpecError, match="pilot"):
            run_forest_kbal(sample, sample, config)

    def test_forest_kernel_requires_pilot(self):
        sample = gen_dataset(DgpSpec(kind="tarr", n=100, seed=23))
        with pytest.raises(InvalidSpecError):
            run_forest_kbal(None, sample, _rf_config())

    def test_oversized_r_capped_with_warning(self):
        sample = gen_dataset(DgpSpec(kind="tarr", n=60, seed=24))
        pilot = _split(gen_dataset(DgpSpec(kind="tarr", n=120, seed=25)))
        with pytest.warns(RuntimeWarning, match="capping"):
            result = run_forest_kbal(pilot, sample, _rf_config(r=500))
        assert result.fits[0].r_used <= sample.n

    def test_ipw_estimator_runs(self):
        sample = gen_dataset(DgpSpec(kind="tarr", n=200, seed=26))
        pilot = _split(gen_dataset(DgpSpec(kind="tarr", n=200, seed=27)))
        result = run_forest_kbal(pilot, sample, _rf_config(estimator="ipw"))
        assert np.isfinite(result.att_mean)
        assert result.fits[0].iterations is None  # no QP solve on this path


class TestCrossFit:
    def test_expected_number_of_fits_and_mean(self):
        sample = gen_dataset(DgpSpec(kind="tarr", n=240, seed=30))
        result = run_cross_fit(sample, _rf_config(cross_fits=4))
        assert result.att_estimates.shape == (4,)
        assert result.att_mean == pytest.approx(result.att_estimates.mean())
        assert result.true_att == pytest.approx(true_att(sample))

    def test_swapped_halves_cover_all_controls(self):
        sample = gen_dataset(DgpSpec(kind="tarr", n=240, seed=31))
        result = run_cross_fit(sample, _rf_config(cross_fits=2))
        n0 = int((sample.Z == 0).sum())
        assert result.fits[0].n_pilot + result.fits[1].n_pilot == n0


class TestConfigValidation:
    def test_mode_kernel_consistency(self):
        with pytest.raises(InvalidSpecError):
            PipelineConfig(kernel="none", mode=MODE_KERNEL_PLUS_RAW)
        with pytest.raises(InvalidSpecError):
            PipelineConfig(kernel="rf", mode=MODE_RAW_ONLY)
        with pytest.raises(InvalidSpecError):
            PipelineConfig(kernel="rf", r=0)
        with pytest.raises(InvalidSpecError):
            PipelineConfig(kernel="frobnicate")

    def test_labels(self):
        assert PipelineConfig(kernel="none", mode=MODE_RAW_ONLY, r=0).label == "raw"
        assert _rf_config(mode="kernel_only").label == "rf_only"
        assert _rf_config().label == "rf_plus"


class TestSummarizeMetrics:
    def test_opposite_errors_cancel_bias_not_rmse(self):
        bias, rmse, n = summarize_metrics([0.1, -0.1])
        assert bias == pytest.approx(0.0)
        assert rmse == pytest.approx(0.1)
        assert n == 2

    def test_constant_error(self):
        bias, rmse, _ = summarize_metrics([0.2, 0.2, 0.2])
        assert bias == pytest.approx(0.2)
        assert rmse == pytest.approx(0.2)

    def test_rmse_dominates_bias(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            errs = rng.standard_normal(rng.integers(2, 30))
            bias, rmse, _ = summarize_metrics(errs)
            assert rmse >= bias - 1e-15

    def test_nan_handling(self):
        bias, rmse, n = summarize_metrics([0.5, np.nan, 0.5])
        assert n == 2 and bias == pytest.approx(0.5)
        with pytest.raises(InvalidSpecError):
            summarize_metrics([np.nan, np.nan])


def _oracle_runner(pilot, analysis, config, model_seed):
    return FitDiagnostics(
        att=true_att(analysis), ess=float((analysis.Z == 0).sum()), lam=None,
        imbalance_sq=None, objective=None, iterations=None, converged=True,
        r_used=0, n_pilot=pilot.n, n_analysis=analysis.n,
    )


_SEEN_DATA = []


def _recording_runner(pilot, analysis, config, model_seed):
    _SEEN_DATA.append((config.label, analysis.X.tobytes(), pilot.X.tobytes()))
    return _oracle_runner(pilot, analysis, config, model_seed)


class TestMonteCarlo:
    def test_oracle_estimator_has_zero_error(self):
        dgp = DgpSpec(kind="tarr", n=80, seed=40)
        grid = [PipelineConfig(kernel="none", mode=MODE_RAW_ONLY, r=0)]
        rows = run_monte_carlo(dgp, grid, reps=5, fit_runner=_oracle_runner)
        assert rows[0].abs_rel_bias == pytest.approx(0.0, abs=1e-12)
        assert rows[0].rel_rmse == pytest.approx(0.0, abs=1e-12)
        assert rows[0].failures == 0
        assert rows[0].reps == 5

    def test_all_configs_see_identical_data(self):
        _SEEN_DATA.clear()
        dgp = DgpSpec(kind="tarr", n=60, seed=41)
        grid = [
            PipelineConfig(kernel="none", mode=MODE_RAW_ONLY, r=0),
            _rf_config(r=2),
        ]
        run_monte_carlo(dgp, grid, reps=3, fit_runner=_recording_runner)
        by_rep = {}
        for label, a_bytes, p_bytes in _SEEN_DATA:
            by_rep.setdefault((a_bytes, p_bytes), set()).add(label)
        assert len(by_rep) == 3  # one dataset per rep
        for labels in by_rep.values():
            assert labels == {"raw", "rf_plus"}

    def test_kim_rows_use_absolute_errors(self):
        dgp = DgpSpec(kind="kim", n=60, seed=42, sigma_eps_sq=30.0)
        grid = [PipelineConfig(kernel="none", mode=MODE_RAW_ONLY, r=0)]

        def biased_runner(pilot, analysis, config, model_seed):
            d = _oracle_runner(pilot, analysis, config, model_seed)
            d.att = d.att + 0.25  # absolute offset against tau = 0
            return d

        rows = run_monte_carlo(dgp, grid, reps=4, fit_runner=biased_runner)
        assert rows[0].abs_rel_bias == pytest.approx(0.25, abs=1e-12)

    def test_failures_recorded_not_fatal(self):
        dgp = DgpSpec(kind="tarr", n=60, seed=43)
        grid = [PipelineConfig(kernel="none", mode=MODE_RAW_ONLY, r=0)]

        def flaky_runner(pilot, analysis, config, model_seed):
            if true_att(analysis) < -8:  # data-dependent, deterministic
                raise RuntimeError("boom")
            return _oracle_runner(pilot, analysis, config, model_seed)

        rows = run_monte_carlo(dgp, grid, reps=8, fit_runner=flaky_runner)
        assert rows[0].reps == 8
        assert rows[0].failures >= 0
        assert rows[0].failures + summarize_metrics(
            [0.0] * (8 - rows[0].failures)
        )[2] == 8

    def test_deterministic_csv_bytes(self, tmp_path):
        dgp = DgpSpec(kind="tarr", n=120, seed=44)
        grid = [
            PipelineConfig(kernel="none", mode=MODE_RAW_ONLY, r=0),
            _rf_config(r=3),
        ]
        paths = []
        for name in ("a.csv", "b.csv"):
            rows = run_monte_carlo(dgp, grid, reps=3)
            path = tmp_path / name
            write_metrics_csv(rows, str(path))
            paths.append(path.read_bytes())
        assert paths[0] == paths[1]

    def test_jobs_do_not_change_results(self, tmp_path):
        dgp = DgpSpec(kind="tarr", n=100, seed=45)
        grid = [_rf_config(r=2)]
        serial = run_monte_carlo(dgp, grid, reps=4, jobs=1)
        parallel = run_monte_carlo(dgp, grid, reps=4, jobs=2)
        a, b = tmp_path / "s.csv", tmp_path / "p.csv"
        write_metrics_csv(serial, str(a))
        write_metrics_csv(parallel, str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_per_rep_truth_matches_sim(self):
        taus = []

        def tau_runner(pilot, analysis, config, model_seed):
            taus.append(true_att(analysis))
            return _oracle_runner(pilot, analysis, config, model_seed)

        dgp = DgpSpec(kind="tarr", n=50, seed=46)
        run_monte_carlo(dgp, [PipelineConfig(kernel="none", mode=MODE_RAW_ONLY, r=0)],
                        reps=3, fit_runner=tau_runner)
        assert len(taus) == 3 and len(set(taus)) == 3

    def test_csv_schema_header(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv([], str(path))
        assert path.read_text().splitlines()[0] == METRICS_CSV_HEADER
        assert (
            METRICS_CSV_HEADER
            == "feature_grouping,kernel,num_pcs,reps,abs_rel_bias,rel_rmse,ess_mean,failures"
        )

    def test_validation(self):
        dgp = DgpSpec(kind="tarr", n=50, seed=47)
        with pytest.raises(InvalidSpecError):
            run_monte_carlo(dgp, [], reps=2)
        with pytest.raises(InvalidSpecError):
            run_monte_carlo(dgp, [PipelineConfig(kernel="none", mode=MODE_RAW_ONLY, r=0)], reps=0)
