"""Oracle tests for the Cox model: likelihood values, gradients, recovery,
correlation filtering, and exact linear attribution."""

import time as _time

import numpy as np
import pytest

from ctsl.survival import (
    IMAGE_NEG_AGGREGATE,
    IMAGE_POS_AGGREGATE,
    CoxModel,
    FusedSample,
    correlation_filter,
    cox_neg_log_likelihood,
    cumulative_hazard,
    fit_cox,
    linear_attribution,
    predict_risk,
    samples_from_arrays,
)


def nlpl_brute(theta, X, times, events, penalizer=0.0):
    """Naive risk-set-loop oracle for the Breslow partial likelihood."""
    theta = np.asarray(theta, float)
    f = 0.0
    for i in range(len(times)):
        if events[i] != 1:
            continue
        denom = sum(
            np.exp(X[j] @ theta) for j in range(len(times)) if times[j] >= times[i]
        )
        f += np.log(denom) - X[i] @ theta
    return f + penalizer * float(theta @ theta)


class TestLikelihood:
    def test_two_subject_hand_value(self):
        # beta = 0, times (1, 2), both events: risk sets of sizes 2 and 1
        # contribute log 2 and log 1
        X = np.array([[1.0], [0.0]])
        f, grad, hess = cox_neg_log_likelihood(
            np.zeros(1), X, np.array([1.0, 2.0]), np.array([1, 1])
        )
        assert f == pytest.approx(np.log(2.0), abs=1e-12)

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            n, p = 25, 3
            X = rng.normal(size=(n, p))
            times = rng.integers(1, 8, size=n).astype(float)  # force ties
            events = rng.integers(0, 2, size=n)
            events[:3] = 1
            theta = rng.normal(scale=0.5, size=p)
            lam = float(rng.uniform(0, 0.3))
            f, _, _ = cox_neg_log_likelihood(theta, X, times, events, lam)
            assert f == pytest.approx(nlpl_brute(theta, X, times, events, lam), rel=1e-10)

    def test_penalty_added_on_sum_scale(self):
        X = np.array([[1.0], [0.0]])
        theta = np.array([0.7])
        t = np.array([1.0, 2.0])
        e = np.array([1, 1])
        f0, _, _ = cox_neg_log_likelihood(theta, X, t, e, 0.0)
        f1, _, _ = cox_neg_log_likelihood(theta, X, t, e, 2.0)
        assert f1 - f0 == pytest.approx(2.0 * 0.49, rel=1e-12)

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(1)
        n, p = 30, 4
        X = rng.normal(size=(n, p))
        times = rng.integers(1, 9, size=n).astype(float)
        events = rng.integers(0, 2, size=n)
        events[0] = 1
        theta = rng.normal(scale=0.4, size=p)
        lam = 0.05
        _, grad, hess = cox_neg_log_likelihood(theta, X, times, events, lam)
        eps = 1e-6
        for k in range(p):
            step = np.zeros(p)
            step[k] = eps
            fp, gp, _ = cox_neg_log_likelihood(theta + step, X, times, events, lam)
            fm, gm, _ = cox_neg_log_likelihood(theta - step, X, times, events, lam)
            fd_grad = (fp - fm) / (2 * eps)
            assert abs(fd_grad - grad[k]) < 1e-5 * max(1.0, abs(grad[k]))
            fd_hess_col = (gp - gm) / (2 * eps)
            assert np.max(np.abs(fd_hess_col - hess[:, k])) < 1e-5

    def test_large_eta_does_not_overflow(self):
        X = np.array([[100.0], [-100.0], [0.0]])
        f, grad, hess = cox_neg_log_likelihood(
            np.array([10.0]), X, np.array([1.0, 2.0, 3.0]), np.array([1, 1, 1])
        )
        assert np.isfinite(f) and np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))


class TestCorrelationFilter:
    def test_duplicate_column_dropped(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=50)
        b = rng.normal(size=50)
        X = np.stack([a, a.copy(), b], axis=1)
        kept = correlation_filter(X, 0.9)
        assert kept.tolist() == [0, 2]

    def test_greedy_keeps_earliest(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=60)
        X = np.stack([a, a + 0.01 * rng.normal(size=60)], axis=1)
        kept = correlation_filter(X, 0.7)
        assert kept.tolist() == [0]

    def test_constant_columns_dropped_first(self):
        rng = np.random.default_rng(4)
        X = np.stack([np.ones(40), rng.normal(size=40), np.zeros(40)], axis=1)
        kept = correlation_filter(X, 0.9)
        assert kept.tolist() == [1]

    def test_threshold_one_keeps_noisy_near_duplicates(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=50)
        X = np.stack([a, a + 1e-3 * rng.normal(size=50)], axis=1)
        assert correlation_filter(X, 1.0).tolist() == [0, 1]
        assert correlation_filter(X, 0.5).tolist() == [0]

    def test_negative_correlation_also_dropped(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=50)
        X = np.stack([a, -a], axis=1)
        assert correlation_filter(X, 0.9).tolist() == [0]

    def test_errors(self):
        with pytest.raises(ValueError):
            correlation_filter(np.ones((2, 3)), 0.5)
        with pytest.raises(ValueError):
            correlation_filter(np.ones((10, 3)), 0.0)
        with pytest.raises(ValueError):
            correlation_filter(np.ones((10, 3)), 1.5)
        with pytest.raises(ValueError):
            correlation_filter(np.ones((10, 0)), 0.5)


def _simulate_cox(rng, n, beta, censor_scale=3.0):
    """Inverse-transform exponential survival with hazard h0*exp(beta x)."""
    x = rng.normal(size=n)
    h0 = 0.2
    t_event = rng.exponential(1.0 / (h0 * np.exp(beta * x)))
    t_cens = rng.exponential(censor_scale, size=n)
    times = np.minimum(t_event, t_cens)
    events = (t_event <= t_cens).astype(int)
    return x[:, None], np.maximum(times, 1e-9), events


class TestFitCox:
    def test_beta_recovery_within_20_percent(self):
        rng = np.random.default_rng(12)
        X, times, events = _simulate_cox(rng, 500, beta=1.0)
        start = _time.perf_counter()
        model = fit_cox(samples_from_arrays(X, times, events), penalizer=1e-4)
        elapsed = _time.perf_counter() - start
        assert elapsed < 5.0
        assert model.converged
        beta_hat = model.coefficients[0]
        assert 0.8 <= beta_hat <= 1.2

    def test_all_zero_covariates_give_zero_theta(self):
        X = np.zeros((10, 3))
        times = np.arange(1.0, 11.0)
        events = np.ones(10, dtype=int)
        model = fit_cox(samples_from_arrays(X, times, events), penalizer=1e-2)
        assert np.allclose(model.theta, 0.0)
        assert np.allclose(model.coefficients, 0.0)

    def test_risk_invariant_to_feature_rescaling(self):
        rng = np.random.default_rng(13)
        X, times, events = _simulate_cox(rng, 200, beta=0.8)
        X2 = np.hstack([X, rng.normal(size=(200, 1))])
        m1 = fit_cox(samples_from_arrays(X2, times, events), penalizer=1e-3)
        X_scaled = X2 * np.array([50.0, 0.02])
        m2 = fit_cox(samples_from_arrays(X_scaled, times, events), penalizer=1e-3)
        r1 = predict_risk(m1, X2)
        r2 = predict_risk(m2, X_scaled)
        assert np.allclose(r1, r2, atol=1e-5)

    def test_higher_penalizer_shrinks_coefficients(self):
        rng = np.random.default_rng(14)
        X, times, events = _simulate_cox(rng, 300, beta=1.2)
        small = fit_cox(samples_from_arrays(X, times, events), penalizer=1e-4)
        large = fit_cox(samples_from_arrays(X, times, events), penalizer=50.0)
        assert abs(large.theta[0]) < abs(small.theta[0])

    def test_correlation_threshold_applied(self):
        rng = np.random.default_rng(15)
        X, times, events = _simulate_cox(rng, 150, beta=1.0)
        X_dup = np.hstack([X, X])
        model = fit_cox(
            samples_from_arrays(X_dup, times, events),
            penalizer=1e-3,
            correlation_threshold=0.9,
        )
        assert model.kept_idx.tolist() == [0]
        assert model.coefficients[1] == 0.0

    def test_requires_an_event(self):
        with pytest.raises(ValueError):
            fit_cox(
                samples_from_arrays(np.ones((5, 1)), np.arange(1.0, 6.0), np.zeros(5)),
                penalizer=1e-2,
            )

    def test_rejects_nonfinite_features(self):
        X = np.ones((5, 1))
        X[0, 0] = np.nan
        with pytest.raises(ValueError):
            fit_cox(
                samples_from_arrays(X, np.arange(1.0, 6.0), np.ones(5)), penalizer=1e-2
            )

    def test_final_loss_matches_brute(self):
        rng = np.random.default_rng(16)
        X, times, events = _simulate_cox(rng, 80, beta=0.5)
        model = fit_cox(samples_from_arrays(X, times, events), penalizer=1e-3)
        Xs = model.standardize(X)
        assert model.final_loss == pytest.approx(
            nlpl_brute(model.theta, Xs, times, events, 1e-3), rel=1e-9
        )


class TestBaselineHazard:
    def test_cumulative_hazard_monotone(self):
        rng = np.random.default_rng(17)
        X, times, events = _simulate_cox(rng, 120, beta=1.0)
        model = fit_cox(samples_from_arrays(X, times, events), penalizer=1e-3)
        x = X[:1]
        grid = np.linspace(0.0, times.max(), 25)
        vals = [cumulative_hazard(model, x, t)[0] for t in grid]
        assert vals[0] == 0.0
        assert np.all(np.diff(vals) >= -1e-12)

    def test_baseline_breslow_hand_case(self):
        # beta = 0 on constant covariates: increments are d_t / n_at_risk
        X = np.zeros((3, 1))
        model = fit_cox(
            samples_from_arrays(X, np.array([1.0, 2.0, 3.0]), np.ones(3)),
            penalizer=1e-2,
        )
        assert np.allclose(model.baseline_times, [1.0, 2.0, 3.0])
        assert np.allclose(model.baseline_cumhaz, np.cumsum([1 / 3, 1 / 2, 1 / 1]))


class TestAttribution:
    def _fitted(self, rng, n=100, p=6):
        X = rng.normal(size=(n, p))
        beta = np.array([1.0, -0.5, 0.8, 0.0, 0.3, -0.2])
        h = 0.2 * np.exp(X @ beta)
        times = np.maximum(rng.exponential(1.0 / h), 1e-9)
        events = np.ones(n, dtype=int)
        names = ["f0", "f1", "img0", "img1", "img2", "img3"]
        model = fit_cox(
            samples_from_arrays(X, times, events), penalizer=1e-3, feature_names=names
        )
        return model, X, names

    def test_completeness_identity(self):
        rng = np.random.default_rng(18)
        model, X, _ = self._fitted(rng)
        report = linear_attribution(model, X)
        risks = predict_risk(model, X)
        assert np.allclose(report.phi.sum(axis=1), risks - risks.mean(), atol=1e-10)

    def test_phi_formula_direct(self):
        rng = np.random.default_rng(19)
        model, X, _ = self._fitted(rng)
        report = linear_attribution(model, X)
        Xs = model.standardize(X)
        want = model.theta * (Xs - Xs.mean(axis=0))
        assert np.allclose(report.phi, want)

    def test_image_aggregates_hand_case(self):
        # craft a model directly so contributions are known
        model = CoxModel(
            theta=np.array([1.0, 1.0, 1.0]),
            kept_idx=np.arange(3),
            feature_means=np.zeros(3),
            feature_scales=np.ones(3),
            n_features=3,
            baseline_times=np.array([1.0]),
            baseline_cumhaz=np.array([1.0]),
            penalizer=0.0,
            feature_names=["f0", "img0", "img1"],
        )
        X = np.array(
            [
                [0.0, 2.0, -1.0],
                [0.0, -2.0, 1.0],
            ]
        )
        report = linear_attribution(model, X)
        # centered image contributions row 0: img0 = +2, img1 = -1
        assert report.image_top_pos[0] == pytest.approx(2.0)
        assert report.image_top_neg[0] == pytest.approx(-1.0)
        assert report.image_top_pos[1] == pytest.approx(1.0)
        assert report.image_top_neg[1] == pytest.approx(-2.0)
        names = [nm for nm, _ in report.ranking]
        assert IMAGE_POS_AGGREGATE in names and IMAGE_NEG_AGGREGATE in names
        assert "img0" not in names and "f0" in names

    def test_top5_limits_aggregation(self):
        p = 9
        model = CoxModel(
            theta=np.ones(p),
            kept_idx=np.arange(p),
            feature_means=np.zeros(p),
            feature_scales=np.ones(p),
            n_features=p,
            baseline_times=np.array([1.0]),
            baseline_cumhaz=np.array([1.0]),
            penalizer=0.0,
            feature_names=[f"img{j}" for j in range(p)],
        )
        # two rows, symmetric so the column means are zero and phi = X
        row = np.array([7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25])
        X = np.stack([row, -row])
        report = linear_attribution(model, X)
        assert report.image_top_pos[0] == pytest.approx(7 + 6 + 5 + 4 + 3)
        assert report.image_top_neg[1] == pytest.approx(-(7 + 6 + 5 + 4 + 3))

    def test_ranking_sorted_descending(self):
        rng = np.random.default_rng(20)
        model, X, _ = self._fitted(rng)
        report = linear_attribution(model, X)
        vals = [v for _, v in report.ranking]
        assert vals == sorted(vals, reverse=True)

    def test_no_image_features_gives_zero_aggregates(self):
        rng = np.random.default_rng(21)
        X = rng.normal(size=(50, 2))
        times = np.maximum(rng.exponential(2.0, size=50), 1e-9)
        events = np.ones(50, dtype=int)
        model = fit_cox(
            samples_from_arrays(X, times, events),
            penalizer=1e-2,
            feature_names=["f0", "f1"],
        )
        report = linear_attribution(model, X)
        assert np.all(report.image_top_pos == 0.0)
        assert {nm for nm, _ in report.ranking} == {"f0", "f1"}


def test_fused_sample_roundtrip():
    s = FusedSample(study_id="s1", features=np.array([1.0, 2.0]), time=3.0, event=1)
    assert s.study_id == "s1" and s.time == 3.0 and s.event == 1
