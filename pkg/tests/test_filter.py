"""Filter recursion: hand examples, martingale identity, EWMA structure, moments."""
import math

import numpy as np
import pytest

from countssm.dist import DomainError, GammaLaw, NBLaw, nb_log_pmf, rng_stream
from countssm.filtering import (
    FilterState,
    Observation,
    forecast_mean,
    init_state,
    predict,
    predictive_law,
    predictive_mean,
    run_filter,
    update,
)
from countssm.regimes import RegimeSpec
from countssm.simulate import simulate_path


def obs(count, intensity=1.0):
    return Observation(count=count, intensity=intensity)


# --- single steps ------------------------------------------------------------


def test_init_state():
    s = init_state(3.0)
    assert s.t == 1
    assert (s.pred.shape, s.pred.rate) == (3.0, 3.0)
    assert s.pred.mean() == 1.0
    assert s.post is None
    s2 = init_state(0.651)
    assert (s2.pred.shape, s2.pred.rate) == (0.651, 0.651)
    assert init_state(1.0).pred.variance() == 1.0
    with pytest.raises(DomainError):
        init_state(0.0)


def test_update_observed_and_missing():
    s = update(init_state(3.0), obs(2, 1.0))
    assert (s.post.shape, s.post.rate) == (5.0, 4.0)
    s_missing = update(init_state(3.0), obs(None, 1.0))
    assert s_missing.post == s_missing.pred
    s3 = update(init_state(0.786), obs(0, 0.5))
    assert (s3.post.shape, s3.post.rate) == (0.786, 1.286)


def test_predict_hand_values():
    s = update(init_state(3.0), obs(2, 1.0))  # post (5, 4)
    p1 = predict(s, 0.8, 0.8)
    assert (p1.pred.shape, p1.pred.rate) == (4.0, 3.2)
    assert p1.pred.mean() == pytest.approx(1.25, abs=1e-15)
    p2 = predict(s, 1.0, 1.0)
    assert (p2.pred.shape, p2.pred.rate) == (5.0, 4.0)
    p3 = predict(s, 0.8, 1.0)
    assert (p3.pred.shape, p3.pred.rate) == (4.8, 4.0)
    assert p1.t == s.t + 1


def test_predict_validates_constraints():
    s = update(init_state(3.0), obs(2, 1.0))
    for q1, q2 in [(0.9, 0.8), (-0.1, 0.5), (0.5, 1.2), (0.0, 0.0)]:
        with pytest.raises(DomainError):
            predict(s, q1, q2)
    with pytest.raises(DomainError):
        predict(init_state(3.0), 0.8, 0.8)  # no posterior yet


def test_predictive_law_and_mean():
    s = init_state(3.0)
    law = predictive_law(s, 1.0)
    assert (law.mean, law.size) == (1.0, 3.0)
    assert predictive_mean(s, 1.7) == pytest.approx(1.7, abs=1e-15)

    s2 = FilterState(t=2, pred=GammaLaw(4.0, 3.2))
    law2 = predictive_law(s2, 2.0)
    assert law2.mean == pytest.approx(2.5, abs=1e-15)
    assert law2.size == 4.0

    s3 = FilterState(t=2, pred=GammaLaw(4.8, 4.0))
    law3 = predictive_law(s3, 1.0)
    assert (law3.mean, law3.size) == (1.2, 4.8)
    # linear in the intensity
    assert predictive_mean(s3, 3.0) == pytest.approx(3.0 * predictive_mean(s3, 1.0), rel=1e-15)


# --- whole-series filtering ----------------------------------------------------


def test_run_filter_two_step_hand_composition():
    shared = RegimeSpec(kind="shared", beta0=3.0)
    trace = run_filter([obs(2), obs(0)], shared)
    expected = math.log(0.158203125) + math.log(0.32768)
    # step 1: NB(2; mean 1, size 3) = 6 * (1/4)^2 (3/4)^3 = 81/512
    # step 2: post (5,4) carried through, NB(0; mean 5/4, size 5) = 0.8^5
    assert trace.loglik == pytest.approx(expected, abs=1e-12)
    assert trace.loglik == pytest.approx(
        nb_log_pmf(2, NBLaw(1.0, 3.0)) + nb_log_pmf(0, NBLaw(1.25, 5.0)), abs=1e-15
    )


def test_run_filter_single_observation():
    shared = RegimeSpec(kind="shared", beta0=3.0)
    trace = run_filter([obs(0)], shared)
    assert trace.loglik == pytest.approx(math.log(0.421875), abs=1e-13)


def test_run_filter_all_missing():
    spec = RegimeSpec(kind="increasing", beta0=3.0, q=0.8)
    trace = run_filter([obs(None), obs(None), obs(None)], spec)
    assert trace.loglik == 0.0
    for step in trace.steps:
        assert step.loglik is None
        assert step.post == step.pred


def test_run_filter_trace_consistency():
    spec = RegimeSpec(kind="increasing", beta0=2.0, q=0.9)
    series = [obs(1, 0.7), obs(None, 1.3), obs(4, 1.1), obs(0, 0.4)]
    trace = run_filter(series, spec)
    assert len(trace.steps) == len(series)
    parts = [s.loglik for s in trace.steps if s.loglik is not None]
    total = 0.0
    for p in parts:
        total += p
    assert trace.loglik == total


def test_run_filter_independent_resets():
    spec = RegimeSpec(kind="independent", beta0=3.0)
    trace = run_filter([obs(5), obs(0), obs(2)], spec)
    for step in trace.steps:
        assert (step.pred.shape, step.pred.rate) == (3.0, 3.0)
    # each period scored against the prior predictive
    law = NBLaw(1.0, 3.0)
    expected = sum(nb_log_pmf(y, law) for y in (5, 0, 2))
    assert trace.loglik == pytest.approx(expected, abs=1e-12)


def test_run_filter_rejects_empty():
    with pytest.raises(DomainError):
        run_filter([], RegimeSpec(kind="shared", beta0=3.0))


def test_forecast_mean_matches_manual_predict():
    spec = RegimeSpec(kind="increasing", beta0=3.0, q=0.8)
    trace = run_filter([obs(2), obs(1)], spec)
    manual = predictive_mean(predict(trace.final_state, 0.8, 0.8), 1.4)
    assert forecast_mean(trace, spec, 1.4) == manual


def test_multi_step_means_via_missing_padding():
    # a two-step-ahead mean is the forecast after filtering one extra
    # missing period (the update is a no-op, the predict still runs)
    spec = RegimeSpec(kind="increasing", beta0=3.0, q=0.8)
    series = [obs(2), obs(1)]
    padded = run_filter(series + [obs(None, 1.0)], spec)
    two_step_mean = forecast_mean(padded, spec, 1.0)
    state = predict(run_filter(series, spec).final_state, 0.8, 0.8)
    state = update(state, obs(None, 1.0))
    manual = predictive_mean(predict(state, 0.8, 0.8), 1.0)
    assert two_step_mean == manual


# --- structural invariants -----------------------------------------------------


def _random_updated_state(rng) -> FilterState:
    shape = float(rng.uniform(0.2, 50.0))
    rate = float(rng.uniform(0.2, 50.0))
    return FilterState(t=int(rng.integers(1, 30)), pred=GammaLaw(shape, rate), post=GammaLaw(shape, rate))


def test_mean_preservation_identity():
    # predictive mean after predict = (q1/q2) * post mean + (q2 - q1)/q2
    rng = rng_stream(77)
    for _ in range(200):
        s = _random_updated_state(rng)
        q2 = float(rng.uniform(0.05, 1.0))
        q1 = float(rng.uniform(0.0, q2))
        nxt = predict(s, q1, q2)
        expected = (q1 / q2) * s.post.mean() + (q2 - q1) / q2
        assert nxt.pred.mean() == pytest.approx(expected, rel=1e-12)


def test_martingale_identity_when_pair_is_equal():
    rng = rng_stream(78)
    for _ in range(1000):
        s = _random_updated_state(rng)
        q = float(rng.uniform(0.05, 1.0))
        nxt = predict(s, q, q)
        assert nxt.pred.mean() == pytest.approx(s.post.mean(), rel=1e-12)


def test_ewma_structure_by_finite_differencing():
    # with a constant thinning fraction c, bumping Y_s by 1 moves the
    # one-step-ahead mean by lam * c^(T+1-s) / predictive rate
    base_counts = [2, 0, 3, 1, 0]
    lam_next = 1.3
    for spec, c in [
        (RegimeSpec(kind="increasing", beta0=3.0, q=0.8), 0.8),
        (RegimeSpec(kind="decreasing", beta0=2.0, p=0.6), 0.6),
        (RegimeSpec(kind="converging", beta0=3.0, p=0.7, q=0.9), 0.7 * 0.9),
    ]:
        trace = run_filter([obs(y) for y in base_counts], spec)
        base_forecast = forecast_mean(trace, spec, lam_next)
        pred_rate_next = trace.final_state.post.rate  # before the final predict
        # rate after the final predict step:
        from countssm.regimes import ScheduleContext, q_pair

        _, q2 = q_pair(spec, ScheduleContext(beta=pred_rate_next))
        beta_next = q2 * pred_rate_next
        T = len(base_counts)
        for s_idx in range(T):
            bumped = list(base_counts)
            bumped[s_idx] += 1
            trace_b = run_filter([obs(y) for y in bumped], spec)
            diff = forecast_mean(trace_b, spec, lam_next) - base_forecast
            expected = lam_next * c ** (T + 1 - (s_idx + 1)) / beta_next
            assert diff == pytest.approx(expected, rel=1e-9)


def test_filtered_moments_track_their_deterministic_targets():
    # across simulated paths, the mean of the posterior shape equals the
    # (count-free) posterior rate, and the mean posterior variance is its inverse
    spec = RegimeSpec(kind="increasing", beta0=3.0, q=0.8)
    n_paths, horizon = 3000, 15
    lam = [1.0] * horizon
    shapes = np.empty((n_paths, horizon))
    rates = np.empty(horizon)
    for i in range(n_paths):
        path = simulate_path(spec, lam, rng_stream(900, i))
        trace = run_filter([obs(int(y)) for y in path.counts], spec)
        shapes[i] = [s.post.shape for s in trace.steps]
        if i == 0:
            rates = np.array([s.post.rate for s in trace.steps])
    for t in (0, 4, 9, 14):
        sample = shapes[:, t]
        se = sample.std(ddof=1) / math.sqrt(n_paths)
        assert abs(sample.mean() - rates[t]) < 4.0 * se
        # posterior variance shape/rate^2 averages to 1/rate
        post_var = sample / rates[t] ** 2
        se_v = post_var.std(ddof=1) / math.sqrt(n_paths)
        assert abs(post_var.mean() - 1.0 / rates[t]) < 4.0 * se_v
