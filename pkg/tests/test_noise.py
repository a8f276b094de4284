import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spde_fpe import noise as nz
from spde_fpe.spectral import build_eigensystem


@pytest.fixture(scope="module")
def es():
    return build_eigensystem(64, 256)


def test_trace_verdicts(es):
    white = nz.CovarianceSpec.white(64)
    assert nz.check_trace_condition(white, 1.0, es, delta=0.2).verdict is nz.Verdict.SATISFIED
    assert nz.check_trace_condition(white, 1.0, es, delta=0.3).verdict is nz.Verdict.VIOLATED
    decay = nz.CovarianceSpec.power_decay(64, 3.0)
    for d in (0.1, 0.3, 0.5):
        assert nz.check_trace_condition(decay, 1.0, es, delta=d, delta1=0.2).verdict is nz.Verdict.SATISFIED


def test_trace_custom_inconclusive_and_zero(es):
    w = np.ones(64)
    assert nz.check_trace_condition(nz.CovarianceSpec.custom(w), 1.0, es).verdict is nz.Verdict.INCONCLUSIVE
    rep = nz.check_trace_condition(nz.CovarianceSpec.zero(64), 1.0, es)
    assert rep.verdict is nz.Verdict.SATISFIED and rep.finite_partial_sum == 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.24), st.floats(0.0, 0.2), st.floats(0.5, 3.0))
def test_trace_monotone_in_delta_and_weights(d, dd, factor):
    es = build_eigensystem(16, 32)
    spec = nz.CovarianceSpec.power_decay(16, 1.0)
    lo = nz.check_trace_condition(spec, 1.0, es, delta=d, delta1=0.2)
    hi = nz.check_trace_condition(spec, 1.0, es, delta=d + dd, delta1=0.2)
    assert hi.first_partial >= lo.first_partial * (1 - 1e-12)
    bigger = nz.CovarianceSpec.power_decay(16, 1.0, scale=max(factor, 1.0))
    assert nz.check_trace_condition(bigger, 1.0, es, delta=d).finite_partial_sum >= lo.finite_partial_sum * (1 - 1e-12)


def test_G1(es):
    rep = nz.check_G1(nz.CovarianceSpec.white(64), es, theta=0.3, q=5)
    assert rep.verdict is nz.Verdict.SATISFIED and np.isfinite(rep.value)
    zero = nz.check_G1(nz.CovarianceSpec.zero(64), es, theta=0.3, q=5)
    assert zero.value == 0 and zero.verdict is nz.Verdict.SATISFIED
    with pytest.raises(ValueError):
        nz.check_G1(nz.CovarianceSpec.white(64), es, theta=0.5, q=5)


def test_convolution_step_zero_noise_decays(es):
    w0 = np.random.default_rng(0).standard_normal(64)
    out = nz.sample_convolution_step(nz.ConvolutionState(0.0, w0), 0.01, nz.CovarianceSpec.zero(64), es,
                                     np.random.default_rng(1))
    assert np.array_equal(out.modes, np.exp(-es.lambdas * 0.01) * w0)
    assert out.time == pytest.approx(0.01)


def test_stationary_variance(es):
    assert nz.stationary_variance(nz.CovarianceSpec.white(64), es)[0] == pytest.approx(1 / (2 * np.pi**2))
    assert 1 / (2 * np.pi**2) == pytest.approx(0.050661, abs=1e-6)


def test_ou_step_variance_exact():
    es = build_eigensystem(1, 2)
    spec = nz.CovarianceSpec.white(1)
    dt, n = 1e-3, 100_000
    z = nz.RngStream(7).normals(n, 1)
    w = nz.sample_convolution_step(nz.ConvolutionState(0.0, np.zeros((n, 1))), dt, spec, es, z).modes[:, 0]
    exact = -np.expm1(-2 * np.pi**2 * dt) / (2 * np.pi**2)
    se = exact * np.sqrt(2 / (n - 1))
    assert abs(w.var(ddof=1) - exact) < 3 * se


def test_ou_additivity_in_distribution(es):
    spec = nz.CovarianceSpec.white(64)
    M, dt = 20000, 0.01
    rng = np.random.default_rng(5)
    w0 = np.zeros((M, 64))
    one = nz.sample_convolution_step(nz.ConvolutionState(0, w0), dt, spec, es, rng).modes
    half = nz.sample_convolution_step(nz.ConvolutionState(0, w0), dt / 2, spec, es, rng)
    two = nz.sample_convolution_step(half, dt / 2, spec, es, rng).modes
    for k in (0, 4):
        v1, v2 = one[:, k].var(ddof=1), two[:, k].var(ddof=1)
        se = np.sqrt(2 / (M - 1)) * np.hypot(v1, v2)
        assert abs(v1 - v2) < 4 * se


def test_wiener_increments():
    spec = nz.CovarianceSpec.custom([1.0, 4.0, 1.0])
    rng = np.random.default_rng(0)
    assert np.all(nz.wiener_mode_increments(spec, 0.0, rng) == 0)
    inc = nz.wiener_mode_increments(spec, 0.25, rng, size=200_000)
    assert inc[:, 1].var() == pytest.approx(1.0, rel=0.02)
    white = nz.wiener_mode_increments(nz.CovarianceSpec.white(3), 1.0, rng, size=200_000)
    assert np.allclose(white.var(axis=0), 1.0, rtol=0.02)


def test_rng_streams_deterministic_and_distinct():
    a = nz.RngStream(11, 3).normals(5, 4)
    assert np.array_equal(a, nz.RngStream(11, 3).normals(5, 4))
    assert not np.array_equal(a, nz.RngStream(11, 4).normals(5, 4))
    assert not np.array_equal(a, nz.RngStream(11, 3, nz.Purpose.INITIAL).normals(5, 4))
    b = nz.batch_normals(11, [5, 3], 5, 4)
    assert np.array_equal(b[:, 1], a)


def test_convolution_moment(es):
    zero = nz.estimate_convolution_moment(nz.CovarianceSpec.zero(64), es, 0.0, 1.0, 10, 20, 0)
    assert zero.sup_estimate == 0
    white = nz.CovarianceSpec.white(64)
    lam = es.lambdas
    assert nz.convolution_moment_bound(white, es, 0.0, 1.0) == pytest.approx(np.sum(-np.expm1(-2 * lam) / (2 * lam)))
    rep = nz.estimate_convolution_moment(white, es, 0.2, 0.25, 1000, 50, 1)
    assert rep.passed
    single = build_eigensystem(1, 2)
    rep1 = nz.estimate_convolution_moment(nz.CovarianceSpec.white(1), single, 0.0, 0.25, 4000, 50, 2)
    # the bound is monotone in t, so its sup is the value at T
    assert abs(rep1.sup_estimate - rep1.bound) < 4 * rep1.stderr
    assert rep1.bound == pytest.approx(-np.expm1(-2 * np.pi**2 * 0.25) / (2 * np.pi**2))
    with pytest.raises(ValueError):
        nz.estimate_convolution_moment(white, es, 0.3, 1.0, 10, 10, 0)


def test_fernique_probe_limits(es):
    r = np.array([0.0, 0.5, 1.0])
    zero = nz.fernique_tail_probe(nz.CovarianceSpec.zero(64), es, 0.25, 50, r, 0, steps=20)
    assert zero.prob[0] == 1.0 and np.all(zero.prob[1:] == 0)
    white = nz.fernique_tail_probe(nz.CovarianceSpec.white(64), es, 0.25, 200, r, 0, steps=20)
    assert white.prob[0] == 1.0
