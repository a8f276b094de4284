from dataclasses import replace

import numpy as np
import pytest

from spde_fpe import drift as dr
from spde_fpe import noise as nz
from spde_fpe.solver import (BlowUp, PathState, Scheme, SolverConfig, integrate_ensemble, integrate_pair_shared_noise,
                             integrate_path, pathwise_energy_check, step)

from conftest import unit

CFG = SolverConfig(N=32, grid_size=128, dt=1e-3, T=0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0)
    with pytest.raises(ValueError):
        SolverConfig(alpha=1.5)
    with pytest.raises(ValueError):
        SolverConfig(s=0.3, T=0.25)
    with pytest.raises(ValueError):
        SolverConfig(dt=0.3, T=1.0)
    assert SolverConfig().n_steps == 250


def test_heat_flow_step_exact():
    cfg = replace(CFG, dt=0.1, T=0.1)
    st = PathState(0.0, unit(32), np.zeros(32), unit(32))
    out = step(cfg, dr.preset("d"), nz.CovarianceSpec.zero(32), st, np.random.default_rng(0))
    assert out.x[0] == pytest.approx(np.exp(-np.pi**2 * 0.1), abs=1e-15)
    assert np.exp(-np.pi**2 * 0.1) == pytest.approx(0.372708, abs=1e-6)
    assert out.t == pytest.approx(0.1)


def test_record_at_start_time():
    cfg = replace(CFG, s=0.25, T=0.25)
    rec = integrate_path(cfg, dr.preset("c"), nz.CovarianceSpec.white(32), unit(32), 0)
    assert rec.states.shape == (1, 32) and np.array_equal(rec.states[0], unit(32))


def test_determinism_and_threads():
    cfg = replace(CFG, block_size=16)
    args = (cfg, dr.preset("c"), nz.CovarianceSpec.white(32), unit(32), 9)
    a = integrate_ensemble(*args, M=100, sample_every=10, threads=1)
    b = integrate_ensemble(*args, M=100, sample_every=10, threads=8)
    c = integrate_ensemble(replace(cfg, block_size=7), *args[1:], M=100, sample_every=10, threads=3)
    for other in (b, c):
        assert np.array_equal(a.states, other.states)
        for k in a.integrals:
            assert np.array_equal(a.integrals[k], other.integrals[k])
    r1 = integrate_path(*args, path=4)
    r2 = integrate_path(*args, path=4)
    assert np.array_equal(r1.states, r2.states)
    # a lone path and the same path inside a batch differ only by BLAS rounding
    batch = integrate_ensemble(*args, M=100, sample_every=1).states[-1, 4]
    assert np.allclose(r1.states[-1], batch, rtol=0, atol=1e-12)


def test_shared_noise_pair_identical():
    r1, r2 = integrate_pair_shared_noise(CFG, dr.preset("c"), nz.CovarianceSpec.white(32), unit(32), unit(32), 3)
    assert np.array_equal(r1.states, r2.states)


def test_schemes_agree():
    # with F frozen at X both updates are the same map, so they agree to rounding
    spec = nz.CovarianceSpec.white(32)
    for name in ("d", "c"):
        x = [integrate_path(replace(CFG, scheme=s), dr.preset(name), spec, unit(32), 1).states for s in Scheme]
        assert np.max(np.abs(x[0] - x[1])) < 1e-10


def test_shifted_state_invariant():
    cfg = replace(CFG, scheme=Scheme.SHIFTED_Y)
    ens = integrate_ensemble(cfg, dr.preset("c"), nz.CovarianceSpec.white(32), unit(32), 0, M=20)
    rng_paths = [nz.RngStream(0, p).generator() for p in range(20)]
    z = np.stack([g.standard_normal((cfg.n_steps, 32)) for g in rng_paths], axis=1)
    st = PathState(0.0, np.tile(unit(32), (20, 1)), np.zeros((20, 32)), np.tile(unit(32), (20, 1)))
    for i in range(cfg.n_steps):
        st = step(cfg, dr.preset("c"), nz.CovarianceSpec.white(32), st, z[i])
        assert np.max(np.abs(st.x - (st.y + st.wa))) < 1e-12
    assert np.max(np.abs(st.x - ens.states[-1])) < 1e-12


def test_running_integrals_nondecreasing():
    rec = integrate_path(CFG, dr.preset("c"), nz.CovarianceSpec.white(32), unit(32), 2)
    for k in ("Y_V2", "F_Vstar2", "J2", "L2m"):
        assert np.all(np.diff(rec.integrals[k]) >= 0), k


def test_energy_heat_flow_and_zero():
    rec = integrate_path(CFG, dr.preset("d"), nz.CovarianceSpec.zero(32), unit(32) + 0.3 * unit(32, 2), 0)
    chk = pathwise_energy_check(rec)
    assert np.max(np.abs(chk.identity_defect)) < 1e-10
    assert np.all(chk.slack >= -1e-10)
    zero = pathwise_energy_check(integrate_path(CFG, dr.preset("d"), nz.CovarianceSpec.zero(32), np.zeros(32), 0))
    assert np.all(zero.lhs == 0) and np.all(zero.rhs == 0) and np.all(zero.slack == 0)


def test_energy_identity_all_presets():
    cfg = replace(CFG, scheme=Scheme.SHIFTED_Y)
    for name in dr.PRESETS:
        for a in (0.0, 0.1):
            rec = integrate_path(replace(cfg, alpha=a), dr.preset(name), nz.CovarianceSpec.white(32), unit(32), 5)
            chk = pathwise_energy_check(rec)
            assert np.max(np.abs(chk.identity_defect)) < 1e-10


def test_blowup():
    cfg = replace(CFG, blowup_threshold=1e-6)
    with pytest.raises(BlowUp) as exc:
        integrate_path(cfg, dr.preset("c"), nz.CovarianceSpec.white(32), unit(32), 0)
    assert exc.value.record.blowup_time == 0.0
    ens = integrate_ensemble(cfg, dr.preset("c"), nz.CovarianceSpec.white(32), unit(32), 0, M=5)
    assert ens.blowup_fraction == 1.0 and np.all(np.isnan(ens.states[-1]))
