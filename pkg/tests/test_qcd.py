import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcdrive.qcd import (
    DetectorConfig,
    DetectorStopped,
    ErrorSample,
    GaussianSpec,
    calibrate,
    cusum_step,
    detect_stream,
    estimate_add,
    estimate_far,
    estimate_wadd,
    glrt_step,
    init_state,
    kl_gaussian,
    log_lr,
    make_config,
    mcusum_step,
    nu_hat,
    prediction_error,
    threshold,
)
from qcdrive.qcd import _pykernels, kernels
from qcdrive.core import Position2D

F_T4 = GaussianSpec(0.89, 0.88)
G_T4 = GaussianSpec(1.93, 3.17)


def normal_logpdf(x, m, s):
    return -0.5 * math.log(2 * math.pi) - math.log(s) - (x - m) ** 2 / (2 * s * s)


def brute_glrt(e, mu0, s0, nu_m, delta_m):
    """Double maximisation written directly from the definition."""
    n = len(e)
    best = -math.inf
    for k in range(n):
        w = e[k:]
        nu = max(sum(abs(x - mu0) for x in w) / len(w) - nu_m, 0.0) + nu_m
        total = 0.0
        for x in w:
            total += nu * (x - mu0) / s0**2 - nu**2 / (2 * s0**2) + math.log(s0 / (s0 + delta_m))
        best = max(best, total)
    return best


# -- error, likelihood ratio, KL ----------------------------------------------

@pytest.mark.parametrize("z,mu,expected", [((1, 2), (1, 2), 0.0), ((3, 4), (0, 0), 5.0), ((1, 1), (0, 0), math.sqrt(2))])
def test_prediction_error(z, mu, expected):
    assert prediction_error(Position2D(*z), Position2D(*mu)) == pytest.approx(expected, abs=1e-15)


def test_log_lr_examples():
    f = GaussianSpec(0.3, 0.7)
    assert log_lr(1.7, f, f) == 0.0
    assert log_lr(0.0, GaussianSpec(0, 1), GaussianSpec(0, 2)) == pytest.approx(-0.6931471805599453, abs=1e-15)
    v = log_lr(3.0, F_T4, G_T4)
    assert v > 0
    assert v == pytest.approx(normal_logpdf(3.0, 1.93, 3.17) - normal_logpdf(3.0, 0.89, 0.88), abs=1e-12)


def test_kl_examples():
    assert kl_gaussian(F_T4, F_T4) == 0.0
    assert kl_gaussian(GaussianSpec(0, 1), GaussianSpec(1, 1)) == pytest.approx(0.5, abs=1e-15)
    a = kl_gaussian(GaussianSpec(0, 1), GaussianSpec(0, 2))
    b = kl_gaussian(GaussianSpec(0, 2), GaussianSpec(0, 1))
    assert a == pytest.approx(math.log(2) + 1 / 8 - 0.5)
    assert b == pytest.approx(-math.log(2) + 2 - 0.5)
    assert a != pytest.approx(b)


def test_kl_matches_quadrature():
    from scipy import integrate

    f, g = GaussianSpec(0.4, 0.9), GaussianSpec(1.1, 1.6)
    val, _ = integrate.quad(lambda x: math.exp(normal_logpdf(x, 0.4, 0.9)) * (normal_logpdf(x, 0.4, 0.9) - normal_logpdf(x, 1.1, 1.6)), -20, 20)
    assert kl_gaussian(f, g) == pytest.approx(val, abs=1e-9)


def test_log_lr_mean_signs():
    rng = np.random.default_rng(3)
    ef = F_T4.sample(rng, 100_000)
    eg = G_T4.sample(rng, 100_000)
    assert np.mean(log_lr(ef, F_T4, G_T4)) < 0
    assert np.mean(log_lr(eg, F_T4, G_T4)) > 0
    assert np.mean(log_lr(ef, F_T4, G_T4)) == pytest.approx(-kl_gaussian(F_T4, G_T4), rel=0.05)


def test_gaussian_spec_rejects_bad_sigma():
    with pytest.raises(ValueError):
        GaussianSpec(0.0, 0.0)
    with pytest.raises(ValueError):
        ErrorSample(1, -0.1)


# -- thresholds ----------------------------------------------------------------

def test_thresholds():
    assert threshold(0.01) == pytest.approx(4.60517, abs=1e-5)
    assert threshold(0.01, 4) == pytest.approx(math.log(400), abs=1e-12)
    assert math.log(400) == pytest.approx(5.9915, abs=1e-4)
    cfg = make_config("mcusum", F_T4, G_T4, alpha=0.01)
    assert cfg.threshold == pytest.approx(math.log(400))
    with pytest.raises(ValueError):
        threshold(1.5)


# -- CuSum ---------------------------------------------------------------------

def test_cusum_step_matches_recursion():
    cfg = make_config("cusum", F_T4, G_T4, b=50.0)
    st_ = init_state(cfg)
    w = 0.0
    for e in [0.2, 3.0, 0.1, 4.5, 0.0, 0.9]:
        st_ = cusum_step(st_, e)
        w = max(w + log_lr(e, F_T4, G_T4), 0.0)
        assert st_.w == pytest.approx(w, abs=1e-12)
    assert st_.n == 6 and st_.stopped_at is None


def test_cusum_stops_and_rejects_further_steps():
    cfg = make_config("cusum", F_T4, G_T4, alpha=0.01)
    st_ = init_state(cfg)
    while st_.stopped_at is None:
        st_ = cusum_step(st_, 12.0)
    assert st_.stopped_at == st_.n
    with pytest.raises(DetectorStopped):
        cusum_step(st_, 0.0)


def test_cusum_returns_to_zero_under_f():
    rng = np.random.default_rng(11)
    e = F_T4.sample(rng, 10_000)
    cfg = make_config("cusum", F_T4, G_T4, b=1e9)
    _, trace = detect_stream(e, cfg)
    zeros = np.flatnonzero(trace == 0.0)
    assert len(zeros) > 1000
    assert zeros[-1] > 9_000


def test_cusum_delay_scales_with_kl():
    f, g = GaussianSpec(0.0, 1.0), GaussianSpec(0.5, 1.0)
    cfg = make_config("cusum", f, g, b=20.0)
    add = estimate_add(cfg, gamma=1, n_runs=400, rng=np.random.default_rng(5))
    target = 20.0 / kl_gaussian(g, f)
    assert target / 2 <= add <= target * 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 20, allow_nan=False), min_size=1, max_size=60))
def test_cusum_nonnegative_and_monotone_in_b(errs):
    lo = make_config("cusum", F_T4, G_T4, b=3.0)
    hi = make_config("cusum", F_T4, G_T4, b=6.0)
    t_lo, tr = detect_stream(errs, lo)
    t_hi, _ = detect_stream(errs, hi)
    assert np.all(tr >= 0)
    if t_hi is not None:
        assert t_lo is not None and t_lo <= t_hi


# -- MCuSum --------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 20, allow_nan=False), min_size=1, max_size=60))
def test_mcusum_single_candidate_equals_cusum(errs):
    a = DetectorConfig("cusum", F_T4, g=G_T4, alpha=0.01)
    b = DetectorConfig("mcusum", F_T4, candidates=(G_T4,), alpha=0.01)
    assert a.threshold == b.threshold
    ta, tra = detect_stream(errs, a)
    tb, trb = detect_stream(errs, b)
    assert ta == tb
    assert np.array_equal(tra, trb)


def test_mcusum_steps_match_stream():
    cfg = make_config("mcusum", F_T4, G_T4, b=1e6)
    errs = np.random.default_rng(2).normal(1.5, 2.0, 40).clip(0)
    st_ = init_state(cfg)
    stats = []
    for e in errs:
        st_ = mcusum_step(st_, e)
        stats.append(st_.statistic)
    _, trace = detect_stream(errs, cfg)
    np.testing.assert_allclose(stats, trace, atol=1e-12)


def test_mcusum_no_later_than_any_component():
    rng = np.random.default_rng(8)
    cands = (GaussianSpec(1.5, 2.5), G_T4, GaussianSpec(2.5, 4.0))
    b = 6.0
    for _ in range(50):
        e = np.concatenate([F_T4.sample(rng, 100), G_T4.sample(rng, 100)])
        tm, _ = detect_stream(e, DetectorConfig("mcusum", F_T4, candidates=cands, b=b))
        for c in cands:
            tc, _ = detect_stream(e, DetectorConfig("cusum", F_T4, g=c, b=b))
            if tc is not None:
                assert tm is not None and tm <= tc


# -- GLRT ----------------------------------------------------------------------

def test_nu_hat_clamp():
    assert nu_hat([1.2, 0.8, 1.1], mu0=1.0, nu_m=0.5) == 0.5
    assert nu_hat([2.0, 0.0, 2.0, 0.0], mu0=1.0, nu_m=0.5) == pytest.approx(1.0)


def test_glrt_hand_stream_matches_bruteforce():
    e = [0.4, 1.8, 2.5, 0.9, 3.1]
    cfg = DetectorConfig("glrt", GaussianSpec(1.0, 1.0), nu_m=0.5, delta_m=0.5, b=1e6, cap=0)
    st_ = init_state(cfg)
    for n in range(1, 6):
        st_ = glrt_step(st_, e[n - 1])
        assert st_.w == pytest.approx(brute_glrt(e[:n], 1.0, 1.0, 0.5, 0.5), abs=1e-12)


def test_glrt_uncapped_matches_bruteforce_on_random_streams():
    rng = np.random.default_rng(21)
    for _ in range(100):
        n = int(rng.integers(1, 51))
        e = rng.gamma(2.0, 0.6, n)
        mu0, s0 = rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5)
        nu_m, dm = rng.uniform(0.05, 1.0), rng.uniform(0.05, 1.0)
        cfg = DetectorConfig("glrt", GaussianSpec(mu0, s0), nu_m=nu_m, delta_m=dm, b=1e9, cap=0)
        _, trace = detect_stream(e, cfg)
        expect = [brute_glrt(list(e[: k + 1]), mu0, s0, nu_m, dm) for k in range(n)]
        np.testing.assert_allclose(trace, expect, rtol=0, atol=1e-9)


def test_glrt_cap_limits_lookback():
    e = np.random.default_rng(1).gamma(2.0, 0.6, 80)
    base = dict(nu_m=0.3, delta_m=0.2, b=1e9)
    _, capped = detect_stream(e, DetectorConfig("glrt", GaussianSpec(1, 1), cap=10, **base))
    for n in (5, 30, 79):
        lo = max(0, n + 1 - 10)
        assert capped[n] == pytest.approx(brute_glrt(list(e[lo : n + 1]), 1, 1, 0.3, 0.2), abs=1e-9)
    # cap longer than the stream is the same as no cap
    _, big = detect_stream(e, DetectorConfig("glrt", GaussianSpec(1, 1), cap=200, **base))
    _, free = detect_stream(e, DetectorConfig("glrt", GaussianSpec(1, 1), cap=0, **base))
    np.testing.assert_array_equal(big, free)


def test_glrt_requires_bounds():
    with pytest.raises(ValueError):
        DetectorConfig("glrt", F_T4, nu_m=0.0, delta_m=0.1)


# -- calibration -----------------------------------------------------------------

def test_calibrate():
    spec = calibrate([ErrorSample(1, 1.0), ErrorSample(2, 2.0), ErrorSample(3, 3.0)])
    assert spec.mu == pytest.approx(2.0) and spec.sigma == pytest.approx(1.0)
    with pytest.raises(ValueError):
        calibrate([0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        calibrate([0.5])


# -- detect_stream -----------------------------------------------------------------

def test_detect_stream_labels_and_prefix_invariance():
    rng = np.random.default_rng(4)
    e = np.concatenate([F_T4.sample(rng, 150), G_T4.sample(rng, 60)])
    samples = [ErrorSample(100 + i, abs(x)) for i, x in enumerate(e)]
    cfg = make_config("cusum", F_T4, G_T4, b=5.0)
    tau, trace = detect_stream(samples, cfg)
    assert tau is not None
    k = tau - 100
    assert len(trace) == k + 1
    tau2, _ = detect_stream(samples[: k + 1], cfg)
    assert tau2 == tau
    # changing the future leaves the stop untouched
    altered = samples[: k + 1] + [ErrorSample(s.n, 0.0) for s in samples[k + 1 :]]
    assert detect_stream(altered, cfg)[0] == tau


def test_detect_stream_never_stops_under_f_with_high_b():
    e = np.abs(F_T4.sample(np.random.default_rng(0), 400))
    tau, trace = detect_stream(e, make_config("cusum", F_T4, G_T4, b=1e6))
    assert tau is None and len(trace) == 400


# -- Monte Carlo estimators ----------------------------------------------------------

def test_far_with_unreachable_threshold_is_censored():
    cfg = make_config("cusum", F_T4, G_T4, b=1e6)
    est = estimate_far(cfg, 50, 500, np.random.default_rng(0))
    assert est.censored == 50
    assert est.far == pytest.approx(1 / 500)


def test_far_monotone_in_threshold():
    prev = None
    for b in (2.0, 4.0, 8.0):
        est = estimate_far(make_config("cusum", F_T4, G_T4, b=b), 300, 3000, np.random.default_rng(9))
        if prev is not None:
            assert est.far <= prev
        prev = est.far


def test_wadd_grid():
    cfg = make_config("cusum", F_T4, G_T4, alpha=0.01)
    add1 = estimate_add(cfg, 1, 500, np.random.default_rng(1))
    assert estimate_wadd(cfg, [1], 500, np.random.default_rng(1)) == add1
    assert estimate_wadd(cfg, [1, 20, 60], 500, np.random.default_rng(1)) >= add1
    with pytest.raises(ValueError):
        estimate_wadd(cfg, [], 10, np.random.default_rng(1))


def test_far_for_non_cusum_detectors():
    for kind in ("mcusum", "glrt"):
        cfg = make_config(kind, F_T4, G_T4, alpha=0.01)
        est = estimate_far(cfg, 20, 200, np.random.default_rng(2))
        assert 0 < est.far <= 1


# -- kernels -------------------------------------------------------------------------

@pytest.mark.skipif(kernels.compiled_kernels is None, reason="extension not built")
def test_compiled_kernels_match_fallback():
    ck, pk = kernels.compiled_kernels, _pykernels
    rng = np.random.default_rng(17)
    for _ in range(20):
        e = rng.gamma(2.0, 0.7, 300)
        a = ck.cusum_run(e, 0.9, 0.9, 1.9, 3.1, 6.0)
        b = pk.cusum_run(e, 0.9, 0.9, 1.9, 3.1, 6.0)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])
        a = ck.mcusum_run(e, 0.9, 0.9, [1.5, 2.5], [2.0, 3.0], 6.0)
        b = pk.mcusum_run(e, 0.9, 0.9, [1.5, 2.5], [2.0, 3.0], 6.0)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])
        a = ck.glrt_run(e, 0.9, 0.9, 0.4, 0.3, 50, 8.0)
        b = pk.glrt_run(e, 0.9, 0.9, 0.4, 0.3, 50, 8.0)
        assert a[0] == b[0]
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)
    E = rng.gamma(2.0, 0.7, (40, 100))
    wa, wb = np.zeros(40), np.zeros(40)
    sa = ck.cusum_batch(E, wa, 0.9, 0.9, 1.9, 3.1, 4.6)
    sb = pk.cusum_batch(E, wb, 0.9, 0.9, 1.9, 3.1, 4.6)
    np.testing.assert_array_equal(sa, sb)
    np.testing.assert_allclose(wa, wb, atol=1e-12)
