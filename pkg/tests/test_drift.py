import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spde_fpe import drift as dr
from spde_fpe.spectral import build_eigensystem, derivative_grid, norm_Lp, to_grid, to_spectral

from conftest import unit


@pytest.fixture(scope="module")
def es():
    return build_eigensystem(64, 256)


def _states(es, n, scale=0.5, seed=0):
    return dr.random_band_limited(es, n, np.random.default_rng(seed), scale=scale, modes=16)


def test_eval_F1_examples(es):
    m = dr.preset("b")
    assert np.all(dr.eval_F1(m, 0.0, np.zeros(256), es) == 0)
    v = np.zeros(256)
    v[10] = 2.0
    assert dr.eval_F1(m, 0.0, v, es)[10] == -6.0
    with pytest.raises(dr.NonFiniteDrift):
        dr.eval_F1(m, 0.0, np.full(256, np.inf), es)


def test_regularize_examples():
    assert dr.regularize(np.array([2.0]), 0.5)[0] == 1.0
    for a in (0.01, 0.5, 1.0):
        assert dr.regularize(np.array([0.0]), a)[0] == 0.0
    with pytest.raises(ValueError):
        dr.regularize_F1(dr.preset("b"), 0.0, 0.0, np.zeros(8), build_eigensystem(4, 8))


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_regularization_envelope(u, a, b):
    lo, hi = sorted((a, b))
    d_lo = abs(u - dr.regularize(np.array(u), lo))
    d_hi = abs(u - dr.regularize(np.array(u), hi))
    ulp = 4e-16 * abs(u)  # cancellation in u - u/(1 + a|u|)
    assert d_lo <= d_hi + ulp
    # |u - u/(1+a|u|)| = a u^2 / (1 + a|u|) <= a u^2
    assert d_lo == pytest.approx(lo * u * u / (1 + lo * abs(u)), rel=1e-9, abs=ulp)
    assert abs(dr.regularize(np.array(u), lo)) <= 1 / lo


def test_burgers_pairing(es):
    p = dr.pair_F2(dr.preset("a"), 0.0, to_grid(unit(64), es), es)
    assert p[1] == pytest.approx(np.pi / np.sqrt(2), abs=1e-6)
    assert np.max(np.abs(np.delete(p, 1))) < 1e-6
    assert np.all(dr.pair_F2(dr.preset("b"), 0.0, to_grid(unit(64), es), es) == 0)


def test_linear_flux_pairing_symmetry(es):
    model = dr.DriftModel(transport=dr.TransportSpec(g2=dr.Poly.in_z([0.0, 1.0]), K=1.0, L=1.0))
    p = dr.pair_F2(model, 0.0, to_grid(unit(64), es), es)
    assert abs(p[0]) < 1e-12


def test_burgers_energy_orthogonality(es):
    x = _states(es, 1000, scale=1.0)
    p = dr.pair_F2(dr.preset("a"), 0.0, to_grid(x, es), es)
    assert np.max(np.abs(np.sum(x * p, axis=-1))) < 1e-8


def test_weak_form_consistency(es):
    # smooth g and band-limited v: weak pairing equals projection of d/dxi g(v)
    model = dr.preset("a")
    x = np.zeros(64)
    x[:3] = [0.7, -0.3, 0.2]
    v = to_grid(x, es)
    strong = to_spectral(v * derivative_grid(x, es), es)
    assert np.max(np.abs(dr.pair_F2(model, 0.0, v, es) - strong)) < 1e-6


def test_lyapunov_examples(es):
    m = dr.preset("c")
    assert dr.lyapunov_J(m, 0.0, np.zeros(256), es) == pytest.approx(2 * (1.2 + 0.5))
    model = dr.DriftModel(dr.ReactionSpec(m=2, c1=dr.Poly.const(1.0)), dr.TransportSpec(K=1.0))
    v = to_grid(unit(64), es)
    v = v / norm_Lp(v, 4, es)
    assert dr.lyapunov_J(model, 0.0, v, es) == pytest.approx(8.0, abs=1e-12)


def test_approximation_bound(es):
    h = unit(64)
    zero = dr.check_approximation_bound(dr.preset("a"), 0.5, h, [(0.0, to_grid(_states(es, 10), es))], es)
    assert zero.max_ratio == 0 and zero.passed
    v = to_grid(_states(es, 1000, scale=0.05), es)
    for a in (1.0, 0.1, 0.01):
        rep = dr.check_approximation_bound(dr.preset("b"), a, h, [(0.0, v)], es)
        assert rep.passed and rep.c_h == pytest.approx(np.sqrt(2), abs=1e-3)


def test_bound_chain(es):
    v = to_grid(_states(es, 1000, scale=0.1), es)
    for name in dr.PRESETS:
        m = dr.preset(name)
        F = dr.drift_coefficients(m, 0.0, v, es)
        J = dr.lyapunov_J(m, 0.0, v, es)
        f2 = dr.vstar_norm(dr.pair_F2(m, 0.0, v, es), es)
        assert np.all(f2 <= 2 * m.K * (1 + norm_Lp(v, 4, es) ** 2) + 1e-12)
        assert np.all(dr.vstar_norm(F, es) <= J)


def test_audits_pass_for_presets():
    for name in dr.PRESETS:
        audit = dr.audit_conditions(dr.preset(name))
        assert dr.audit_passed(audit), name
        assert not audit["one_sided"].skipped
    audit = dr.audit_conditions(dr.preset("b"))
    assert audit["one_sided"].worst_margin >= 0 and audit["decomposition"].passed


def test_audit_witness_for_wrong_constant():
    m = dr.preset("b")
    bad = dr.DriftModel(dr.ReactionSpec(m.reaction.f, 3, 2.0, dr.Poly.const(0.5), m.reaction.c2,
                                        m.reaction.decomposition), m.transport, 1.0)
    audit = dr.audit_conditions(bad)
    assert not audit["f1"].passed
    w = audit["f1"].witness
    assert abs(w["z"]) > 1 and set(w) >= {"xi", "t", "z"}
    burgers = dr.DriftModel(transport=dr.TransportSpec(g2=dr.Poly.in_z([0, 0, 0.5]), K=0.5, L=0.4))
    assert not dr.audit_conditions(burgers)["g2"].passed


def test_model_serialisation_round_trip():
    for name in dr.PRESETS:
        m = dr.preset(name)
        back = dr.DriftModel.from_dict(m.to_dict())
        assert back.digest() == m.digest()
    assert dr.preset("burgers").digest() == dr.preset("a").digest()
    with pytest.raises(KeyError):
        dr.preset("zzz")


def test_chi_shape():
    n = 5.0
    r = np.linspace(-15, 15, 3001)
    c = dr.chi(r, n)
    assert np.all(c[np.abs(r) <= n] == r[np.abs(r) <= n])
    assert np.all(c[np.abs(r) >= 2 * n] == 0)
    slope = np.max(np.abs(np.diff(c) / np.diff(r)))
    assert slope <= dr.CHI_SLOPE + 1e-2
    assert np.max(np.abs(dr.chi(np.linspace(-30, 30, 3001), 10.0))) <= 2 * 10.0


def test_mollified_transport():
    m = dr.preset("a")
    for n in (10, 100, 1000):
        g = dr.mollify_transport(m, n)
        assert g.K == 1.0 and g.L == pytest.approx(3 * dr.CHI_SLOPE * 0.5)
    errs = [max(abs(float(dr.mollify_transport(m, n)(0.5, 0.0, z)) - z * z / 2) for z in (-3.0, 0.0, 3.0))
            for n in (10, 100, 1000)]
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-5
    g10 = dr.mollify_transport(m, 10)
    assert abs(float(g10(0.5, 0.0, 100.0))) <= 2 * 10
    # clamp inactive: deviation of the smoothing only
    zs = np.linspace(-3, 3, 61)
    dev = np.max(np.abs(g10(0.5, 0.0, zs) - zs**2 / 2))
    assert dev <= 3.1 * (1 / 10) + (1 / 10) ** 2


def test_mollified_transport_satisfies_growth_and_lipschitz():
    m = dr.preset("a")
    g = dr.mollify_transport(m, 10)
    model = dr.DriftModel(transport=g, one_sided_L=0.0)
    z = np.linspace(-40, 40, 801)
    assert np.all(np.abs(g(0.5, 0.0, z)) <= g.K * (1 + z**2) + 1e-12)
    z1, z2 = np.meshgrid(z[::8], z[::8])
    lhs = np.abs(g(0.5, 0.0, z1) - g(0.5, 0.0, z2))
    assert np.all(lhs <= g.L * (1 + np.abs(z1) + np.abs(z2)) * np.abs(z1 - z2) + 1e-12)
    assert model.transport.L > 0
