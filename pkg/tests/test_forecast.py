import numpy as np
import pytest

from proxmpc.errors import DataError
from proxmpc.forecast import (
    AR_HORIZON,
    AR_WINDOW,
    N_PARAMS,
    PERIODS,
    ARModel,
    BaselineModel,
    ForecastModel,
    ScenarioSet,
    fit_ar,
    fit_baseline,
    fit_error_model,
    fit_forecast_model,
    fourier_features,
    load_model,
    model_from_dict,
    model_to_dict,
    point_forecast,
    rms_log_error,
    sample_scenarios,
    save_model,
    training_errors,
)
from proxmpc.prices import HOURS_PER_WEEK, expexp, from_arrays

from .oracles import ar1_series, ridge_normal_equations


def _uniform_error_model(scale: float = 0.0) -> "ErrorModel":
    from proxmpc.forecast import ErrorModel

    covs = np.repeat((scale**2 * np.eye(AR_HORIZON))[None], HOURS_PER_WEEK, axis=0)
    return ErrorModel(np.zeros((HOURS_PER_WEEK, AR_HORIZON)), covs, 0.0,
                      np.ones(HOURS_PER_WEEK, dtype=np.int64))


def _model(baseline=None, gamma=None, error=None, n_train=1000) -> ForecastModel:
    if baseline is None:
        baseline = BaselineModel(0.0, np.zeros(16), np.zeros(16))
    if gamma is None:
        gamma = np.zeros((AR_HORIZON, AR_WINDOW))
    if error is None:
        error = _uniform_error_model()
    return ForecastModel(baseline, ARModel(gamma), error, n_train)


class TestFourierFeatures:
    def test_phase_zero(self):
        f = fourier_features(0)
        assert f.shape == (N_PARAMS,)
        assert f[0] == 1.0
        assert np.allclose(f[1::2], 1.0)  # all cosines
        assert np.allclose(f[2::2], 0.0)  # all sines

    def test_period_list(self):
        assert len(PERIODS) == 16
        assert PERIODS[:4].tolist() == [24.0, 12.0, 8.0, 6.0]
        assert PERIODS[4:8].tolist() == [168.0, 84.0, 56.0, 42.0]
        assert PERIODS[8:12].tolist() == [8760.0, 4380.0, 2920.0, 2190.0]
        assert PERIODS[12:].tolist() == [192.0, 144.0, 8784.0, 8736.0]

    def test_diurnal_periodicity(self):
        f0, f24 = fourier_features(np.array([0, 24]))
        # diurnal entries (periods 24, 12, 8, 6) repeat after 24 hours
        assert np.allclose(f0[1:9], f24[1:9], atol=1e-12)

    def test_halfday_cosine(self):
        f = fourier_features(12)
        assert f[1] == pytest.approx(np.cos(np.pi), abs=1e-12)


class TestFitBaseline:
    def test_constant_series_intercept_only(self):
        model = fit_baseline(np.full(500, 0.5), ridge_lambda=0.0)
        assert model.intercept == pytest.approx(0.5, abs=1e-8)
        assert np.max(np.abs(model.cos_coeffs)) <= 1e-8
        assert np.max(np.abs(model.sin_coeffs)) <= 1e-8

    def test_recovers_pure_diurnal_cosine(self):
        t = np.arange(17520)
        model = fit_baseline(np.cos(2 * np.pi * t / 24.0), ridge_lambda=0.0)
        assert model.cos_coeffs[0] == pytest.approx(1.0, abs=1e-6)
        theta = model.theta.copy()
        theta[1] -= 1.0
        assert np.max(np.abs(theta)) <= 1e-6

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(4)
        z = rng.normal(1.2, 0.3, 4000)
        lam = 4.0
        model = fit_baseline(z, ridge_lambda=lam)
        X = fourier_features(np.arange(len(z)))
        penalize = np.ones(N_PARAMS)
        penalize[0] = 0.0
        oracle = ridge_normal_equations(X, z, lam, penalize)
        assert np.max(np.abs(model.theta - oracle)) / max(1.0, np.max(np.abs(oracle))) < 1e-8

    def test_too_short(self):
        with pytest.raises(DataError):
            fit_baseline(np.zeros(10))


class TestFitAR:
    def test_zero_residuals_give_zero_gamma(self):
        model = fit_ar(np.zeros(500), ridge_lambda=1e-6)
        assert np.max(np.abs(model.gamma)) < 1e-12

    def test_ar1_recovery(self):
        rng = np.random.default_rng(7)
        r = ar1_series(0.9, 0.1, 20000, rng)
        model = fit_ar(r, ridge_lambda=1e-4 * len(r))
        for j in range(AR_HORIZON):
            row = model.gamma[j]
            assert row[-1] == pytest.approx(0.9 ** (j + 1), abs=0.05)
            assert np.max(np.abs(row[:-1])) < 0.05

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(8)
        r = rng.normal(0, 0.2, 800)
        lam = 2.5
        model = fit_ar(r, ridge_lambda=lam)
        from proxmpc.forecast import residual_windows

        W, Y = residual_windows(r)
        oracle = ridge_normal_equations(W, Y, lam, np.ones(AR_WINDOW)).T
        scale = max(1.0, np.max(np.abs(oracle)))
        assert np.max(np.abs(model.gamma - oracle)) / scale < 1e-8

    def test_insufficient_data(self):
        with pytest.raises(DataError):
            fit_ar(np.zeros(30))


class TestPointForecast:
    def test_zero_gamma_reduces_to_baseline(self):
        rng = np.random.default_rng(9)
        base = BaselineModel(1.1, rng.normal(0, 0.05, 16), rng.normal(0, 0.05, 16))
        model = _model(baseline=base)
        window = rng.normal(0, 1, AR_WINDOW)
        out = point_forecast(model, 100, window)
        expect = expexp(base.predict(np.arange(101, 124)))
        assert np.allclose(out, expect, rtol=1e-12)

    def test_zero_everything_gives_e(self):
        out = point_forecast(_model(), 0, np.zeros(AR_WINDOW))
        assert np.allclose(out, np.e, rtol=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(10)
        base = BaselineModel(1.0, rng.normal(0, 0.1, 16), rng.normal(0, 0.1, 16))
        gamma = rng.normal(0, 0.05, (AR_HORIZON, AR_WINDOW))
        model = _model(baseline=base, gamma=gamma)
        window = rng.normal(0, 0.3, AR_WINDOW)
        t = 777
        out = point_forecast(model, t, window)
        # independent re-computation of exp exp (b + Gamma w), row by row
        for j in range(AR_HORIZON):
            b_j = base.theta @ fourier_features(t + 1 + j)
            expect = np.exp(np.exp(b_j + float(gamma[j] @ window)))
            assert out[j] == pytest.approx(expect, rel=1e-12)

    def test_always_above_one(self):
        rng = np.random.default_rng(11)
        model = _model(gamma=rng.normal(0, 0.2, (AR_HORIZON, AR_WINDOW)))
        out = point_forecast(model, 5, rng.normal(0, 3, AR_WINDOW))
        assert np.all(out > 1.0)


class TestErrorModel:
    def _errors(self, rng, per_stratum=6, scale=1.0):
        T = HOURS_PER_WEEK * per_stratum
        strata = np.tile(np.arange(HOURS_PER_WEEK), per_stratum)
        return rng.normal(0, scale, (T, AR_HORIZON)), strata

    def test_zero_smoothing_gives_empirical_cov(self):
        rng = np.random.default_rng(12)
        errors, strata = self._errors(rng)
        model = fit_error_model(errors, strata, smoothing=0.0)
        m = 17
        rows = errors[strata == m]
        emp = np.cov(rows.T, bias=True)
        # flooring may only lift eigenvalues below 1e-8
        assert np.max(np.abs(model.covs[m] - emp)) < 1e-7
        assert np.allclose(model.means[m], rows.mean(axis=0))

    def test_large_smoothing_consensus(self):
        rng = np.random.default_rng(13)
        errors, strata = self._errors(rng)
        model = fit_error_model(errors, strata, smoothing=1e12)
        scale = np.linalg.norm(model.covs[0])
        for m in range(1, HOURS_PER_WEEK):
            assert np.linalg.norm(model.covs[m] - model.covs[0]) <= 1e-6 * scale

    def test_consensus_is_count_weighted_average(self):
        rng = np.random.default_rng(14)
        errors, strata = self._errors(rng)
        model = fit_error_model(errors, strata, smoothing=1e12)
        emp = []
        counts = []
        for m in range(HOURS_PER_WEEK):
            rows = errors[strata == m]
            emp.append(np.cov(rows.T, bias=True) * len(rows))
            counts.append(len(rows))
        target = np.sum(emp, axis=0) / np.sum(counts)
        assert np.max(np.abs(model.covs[0] - target)) < 1e-5

    def test_iid_standard_normal_recovers_identity(self):
        rng = np.random.default_rng(15)
        errors, strata = self._errors(rng, per_stratum=400)
        model = fit_error_model(errors, strata, smoothing=0.0)
        worst = max(np.linalg.norm(model.covs[m] - np.eye(AR_HORIZON)) for m in range(HOURS_PER_WEEK))
        assert worst < 0.1 * np.linalg.norm(np.eye(AR_HORIZON)) * 3  # Frobenius error 0.1-ish scale

    def test_psd_floor(self):
        rng = np.random.default_rng(16)
        # one sample per stratum: empirical covariance is rank-0
        errors = rng.normal(0, 1, (HOURS_PER_WEEK, AR_HORIZON))
        strata = np.arange(HOURS_PER_WEEK)
        model = fit_error_model(errors, strata, smoothing=0.0)
        for m in range(0, HOURS_PER_WEEK, 17):
            w = np.linalg.eigvalsh(model.covs[m])
            assert w.min() >= 1e-8 * (1 - 1e-9)
            assert np.array_equal(model.covs[m], model.covs[m].T)

    def test_smoothness_monotone_in_gamma(self):
        rng = np.random.default_rng(17)
        errors, strata = self._errors(rng, per_stratum=4)
        dists = []
        for gamma in (0.0, 5.0, 500.0):
            model = fit_error_model(errors, strata, smoothing=gamma)
            d = sum(
                np.linalg.norm(model.covs[m] - model.covs[(m + 1) % HOURS_PER_WEEK])
                for m in range(HOURS_PER_WEEK)
            )
            dists.append(d)
        assert dists[0] >= dists[1] >= dists[2]

    def test_empty_stratum_rejected(self):
        errors = np.zeros((10, AR_HORIZON))
        strata = np.zeros(10, dtype=int)
        with pytest.raises(DataError, match="stratum"):
            fit_error_model(errors, strata, smoothing=1.0)


class TestSampleScenarios:
    def test_zero_covariance_equals_point_forecast(self):
        rng = np.random.default_rng(18)
        model = _model(gamma=rng.normal(0, 0.05, (AR_HORIZON, AR_WINDOW)),
                       error=_uniform_error_model(0.0))
        window = rng.normal(0, 0.2, AR_WINDOW)
        out = sample_scenarios(model, 50, 3, window, 25.0, 5, seed=0)
        pf = point_forecast(model, 50, window)
        for i in range(5):
            assert out.prices[i, 0] == 25.0
            assert np.allclose(out.prices[i, 1:], pf, rtol=1e-12)

    def test_deterministic_given_seed(self):
        model = _model(error=_uniform_error_model(0.4))
        a = sample_scenarios(model, 9, 9 % 168, np.zeros(AR_WINDOW), 30.0, 16, seed=123)
        b = sample_scenarios(model, 9, 9 % 168, np.zeros(AR_WINDOW), 30.0, 16, seed=123)
        assert np.array_equal(a.prices, b.prices)
        c = sample_scenarios(model, 9, 9 % 168, np.zeros(AR_WINDOW), 30.0, 16, seed=124)
        assert not np.array_equal(a.prices, c.prices)

    def test_sample_mean_concentrates(self):
        sigma = 0.05
        model = _model(error=_uniform_error_model(sigma))
        out = sample_scenarios(model, 0, 0, np.zeros(AR_WINDOW), np.e, 10_000, seed=7)
        z = np.log(np.log(out.prices[:, 1:]))
        assert np.max(np.abs(z.mean(axis=0))) < 3 * sigma / 100.0

    def test_anchor_shared(self):
        model = _model(error=_uniform_error_model(0.3))
        out = sample_scenarios(model, 4, 4, np.zeros(AR_WINDOW), 42.5, 8, seed=5)
        assert np.all(out.prices[:, 0] == 42.5)
        assert out.anchor == 42.5
        assert np.all(out.weights == 1.0)

    def test_prefix(self):
        model = _model(error=_uniform_error_model(0.3))
        out = sample_scenarios(model, 4, 4, np.zeros(AR_WINDOW), 42.5, 8, seed=5)
        sub = out.prefix(3)
        assert sub.count == 3
        assert np.array_equal(sub.prices, out.prices[:3])


class TestRmsLogError:
    def test_exact_forecast_is_zero(self):
        p = np.full((10, AR_HORIZON), 30.0)
        assert rms_log_error(p, p) == 0.0

    def test_constant_log_error(self):
        actual = np.full((4, AR_HORIZON), 20.0)
        forecast = actual / np.exp(0.3)
        assert rms_log_error(forecast, actual) == pytest.approx(0.3, rel=1e-12)

    def test_by_lead_shape(self):
        rng = np.random.default_rng(19)
        actual = np.exp(rng.normal(3, 0.3, (50, AR_HORIZON)))
        forecast = actual * np.exp(rng.normal(0, 0.1, (50, AR_HORIZON)))
        by_lead = rms_log_error(forecast, actual, by_lead=True)
        assert by_lead.shape == (AR_HORIZON,)
        overall = rms_log_error(forecast, actual)
        assert overall == pytest.approx(np.sqrt(np.mean(by_lead**2)), rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            rms_log_error(np.ones((3, 23)), np.ones((4, 23)))


class TestPipelineAndPersistence:
    def _train_series(self, seed=20, weeks=6):
        rng = np.random.default_rng(seed)
        n = weeks * HOURS_PER_WEEK
        t = np.arange(n)
        z = 1.1 + 0.08 * np.cos(2 * np.pi * t / 24) + ar1_series(0.7, 0.05, n, rng)
        ts = np.datetime64("2021-03-01T00:00:00", "s") + t * np.timedelta64(3600, "s")
        return from_arrays(ts, np.exp(np.exp(z)))

    def test_fit_pipeline_and_round_trip(self, tmp_path):
        series = self._train_series()
        model = fit_forecast_model(series, smoothing=5.0)
        assert model.n_train == len(series)

        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert np.allclose(loaded.baseline.theta, model.baseline.theta)
        assert np.allclose(loaded.ar.gamma, model.ar.gamma)
        assert np.allclose(loaded.error.means, model.error.means)
        assert np.allclose(loaded.error.covs, model.error.covs, atol=1e-12)
        assert loaded.n_train == model.n_train

        # loaded model produces identical scenarios
        window = np.zeros(AR_WINDOW)
        a = sample_scenarios(model, 100, 100 % 168, window, 25.0, 4, seed=1)
        b = sample_scenarios(loaded, 100, 100 % 168, window, 25.0, 4, seed=1)
        assert np.array_equal(a.prices, b.prices)

    def test_pure_baseline_data_gives_negligible_ar(self):
        # prices with only seasonal structure + IID noise: nothing for the AR
        # stage to predict, so Gamma shrinks to ~0 and the report's baseline
        # and forecast RMS both sit at the noise level
        rng = np.random.default_rng(21)
        n = 8 * HOURS_PER_WEEK
        t = np.arange(n)
        noise = 0.02
        z = 1.15 + 0.10 * np.cos(2 * np.pi * t / 24) + rng.normal(0, noise, n)
        ts = np.datetime64("2021-03-01T00:00:00", "s") + t * np.timedelta64(3600, "s")
        series = from_arrays(ts, np.exp(np.exp(z)))
        model = fit_forecast_model(series, smoothing=5.0)
        assert np.max(np.abs(model.ar.gamma)) < 0.05
        from proxmpc.forecast import fit_report

        report = fit_report(model, series)
        # log-price errors scale z-noise by d(log p)/dz = exp(z) ~ exp(1.15)
        noise_logprice = noise * np.exp(1.15)
        assert report["baseline_rms_log"] == pytest.approx(noise_logprice, rel=0.25)
        assert report["forecast_rms_log"] == pytest.approx(noise_logprice, rel=0.25)

    def test_model_version_checked(self):
        doc = model_to_dict(_model())
        doc["model_version"] = 99
        with pytest.raises(DataError, match="model_version"):
            model_from_dict(doc)

    def test_training_errors_strata_alignment(self):
        series = self._train_series(weeks=5)
        model = fit_forecast_model(series, smoothing=1.0)
        from proxmpc.prices import loglog

        errors, strata = training_errors(model.baseline, model.ar, loglog(series),
                                         series.hour_of_week)
        # first start hour is t = 23, whose hour-of-week is 23 (series starts Monday 0)
        assert strata[0] == 23
        assert len(errors) == len(series) - AR_WINDOW - AR_HORIZON + 1

    def test_scenario_set_validation(self):
        with pytest.raises(ValueError, match="anchor"):
            ScenarioSet(np.array([[10.0, 20.0], [11.0, 20.0]]), np.ones(2), 10.0)
        with pytest.raises(ValueError, match="positive"):
            ScenarioSet(np.array([[10.0, -1.0]]), np.ones(1), 10.0)
