import json
from dataclasses import replace

import numpy as np
import pytest

from spde_fpe import drift as dr
from spde_fpe import fpe
from spde_fpe import harness as H
from spde_fpe import noise as nz
from spde_fpe.solver import SolverConfig, integrate_path
from spde_fpe.spectral import build_eigensystem, to_grid

SMALL = SolverConfig(N=16, grid_size=64, dt=1e-3, T=0.1)


def spec(name, model="c", **kw):
    kw.setdefault("M", 200)
    return H.ExperimentSpec(name, model=dr.preset(model), solver=kw.pop("solver", SMALL), **kw)


def test_spec_invariants():
    with pytest.raises(ValueError):
        spec("energy", alpha_ladder=(1.5,))
    with pytest.raises(ValueError):
        spec("energy", tolerances={"margin": -1})
    with pytest.raises(ValueError):
        spec("nonsense")
    s = spec("energy")
    assert s.inputs_hash() == spec("energy").inputs_hash()
    assert s.inputs_hash() != spec("energy", seed=1).inputs_hash()


def test_report_status_rule():
    rep = H.ExperimentReport("energy", "x")
    rep.check("a", 1.0, 2.0)
    assert rep.finalize().status == "pass"
    rep.check("b", 3.0, 2.0)
    assert rep.finalize().status == "fail"
    assert rep.finalize(invalid=True).status == "invalid"


def test_invalid_on_blowup():
    s = spec("moment2m", solver=replace(SMALL, blowup_threshold=1e-6), M=20)
    assert H.run_experiment(s).status == "invalid"


def test_linear_preset_experiments_pass():
    for name in ("energy", "moment2m", "lyapunov", "gronwall", "fpeCheck"):
        rep = H.run_experiment(spec(name, "d", gronwall_seeds=4))
        assert rep.status == "pass", (name, [a for a in rep.assertions if not a.passed])
    assert H.MARGIN_NOTE in H.run_experiment(spec("moment2m", "d", M=20)).notes


def test_energy_heat_identity_no_noise():
    s = spec("energy", "d", noise=nz.CovarianceSpec.zero(16), M=4)
    rep = H.run_experiment(s)
    assert rep.passed
    slack = np.array([r[4] for r in rep.series["energy"]["rows"]])
    assert np.all(slack >= -1e-8)


def test_lyapunov_heat_flow_contracts():
    s = spec("lyapunov", "d", noise=nz.CovarianceSpec.zero(16), M=4,
             initial_states=(H.unit_state(16), H.unit_state(16, {1: 0.5, 2: -0.7})))
    rep = H.run_experiment(s)
    assert rep.passed and rep.values["K_hat_coarsest"] <= 1.0 + 1e-12


def test_lyapunov_homogeneous_in_c1():
    base = spec("lyapunov", "c", M=100)
    scaled = replace(base, model=base.model.scaled_c1(10.0))
    k1 = H.run_experiment(base).values["K_hat"]
    k2 = H.run_experiment(scaled).values["K_hat"]
    for a in k1:
        assert k1[a] == pytest.approx(k2[a], rel=1e-12)


def test_lyapunov_zero_initial_state_finite():
    rep = H.run_experiment(spec("lyapunov", "c", M=100, initial_states=(np.zeros(16),)))
    assert np.isfinite(rep.values["K_hat_coarsest"])


def test_alpha_convergence_trivial_without_reaction():
    rep = H.run_experiment(spec("alphaConvergence", "a", M=50))
    assert all(v == 0 for v in rep.values["weak_error"].values())


def test_gaussian_moment_oracle():
    # x = 0, F = 0, trace-class noise: E|W_A(t)|_{L^4}^4 = int 3 sigma(xi, t)^4 dxi
    noise = nz.CovarianceSpec.power_decay(16, 3.0)
    s = spec("moment2m", "d", noise=noise, x0=np.zeros(16), M=4000, sample_every=100)
    rep = H.run_experiment(s)
    es = SMALL.eigensystem()
    basis = np.array([es.basis(k) for k in range(1, 17)])
    rows = rep.series["moment2m"]["rows"]
    sup = rep.values["sup_moment"]
    assert len({round(v, 15) for v in sup.values()}) == 1  # identical across alpha
    for a, t, est, se in rows:
        var = noise.weights * -np.expm1(-2 * es.lambdas * t) / (2 * es.lambdas)
        sigma2 = var @ basis**2
        exact = es.h * np.sum(3 * sigma2**2)
        assert abs(est - exact) <= 3 * se + 1e-15


def test_gronwall_linear_exact():
    rep = H.run_experiment(spec("gronwall", "d", gronwall_seeds=4))
    a = [x for x in rep.assertions if x.name.startswith("linear ratio")][0]
    assert a.passed and a.statistic < 1e-10


def test_admission_and_override():
    m = dr.preset("b")
    bad = dr.DriftModel(dr.ReactionSpec(m.reaction.f, 3, 2.0, dr.Poly.const(0.5), m.reaction.c2,
                                        m.reaction.decomposition), m.transport, 1.0, "bad")
    s = H.ExperimentSpec("energy", model=bad, solver=SMALL, M=20)
    rep = H.run_experiment(s)
    assert rep.status == "fail" and "f1" in rep.values["witnesses"]
    assert H.run_experiment(replace(s, override_audit=True)).status in ("pass", "fail")
    audit = H.run_experiment(replace(s, name="hypothesisAudit"))
    assert audit.status == "fail" and audit.values["witnesses"]["f1"]["z"] != 0


def test_hypothesis_audit_and_noise_diagnostics_pass():
    for p in dr.PRESETS:
        assert H.run_experiment(spec("hypothesisAudit", p)).passed, p
    assert H.run_experiment(spec("noiseDiagnostics", "c", M=500)).passed


def test_rerun_bit_identical():
    s = spec("energy", "c", M=100)
    assert H.run_experiment(s).statistics_digest() == H.run_experiment(s).statistics_digest()
    t8 = replace(s, threads=8, solver=replace(SMALL, block_size=16))
    t1 = replace(s, threads=1, solver=replace(SMALL, block_size=16))
    assert H.run_experiment(t8).statistics_digest() == H.run_experiment(t1).statistics_digest()


def test_persist_report_idempotent_and_tamper(tmp_path):
    rep = H.run_experiment(spec("gronwall", "d", gronwall_seeds=2))
    a = H.persist_run(rep, tmp_path, "echo: 1\n")
    rep2 = H.run_experiment(spec("gronwall", "d", gronwall_seeds=2))
    assert H.persist_run(rep2, tmp_path, "echo: 1\n") == a
    loaded = H.load_run(tmp_path, a)
    assert loaded["report"]["status"] == "pass" and loaded["config.yaml"] == b"echo: 1\n"
    (tmp_path / a / "report.tsv").write_text("tampered\n")
    with pytest.raises(H.ArchiveCorruption):
        H.load_run(tmp_path, a)
    with pytest.raises(H.ArchiveCorruption):
        H.persist_run(rep, tmp_path, "echo: 2\n")


def test_record_round_trip(tmp_path):
    rec = integrate_path(SMALL, dr.preset("c"), nz.CovarianceSpec.white(16), H.unit_state(16), 3, path=2,
                         sample_every=5)
    rid = H.persist_run(rec, tmp_path)
    assert H.persist_run(rec, tmp_path) == rid
    back = H.load_run(tmp_path, rid)["record"]
    assert np.array_equal(back.states, rec.states) and np.array_equal(back.y_states, rec.y_states)
    assert np.array_equal(back.sample_times, rec.sample_times)
    for k in rec.integrals:
        assert np.array_equal(back.integrals[k], rec.integrals[k])
    assert back.config == rec.config and back.model_hash == rec.model_hash and back.seed == 3


def test_record_binary_layout(tmp_path):
    rec = integrate_path(SMALL, dr.preset("d"), nz.CovarianceSpec.white(16), H.unit_state(16), 0, sample_every=50)
    path = tmp_path / "r.bin"
    H.write_record(rec, path)
    raw = path.read_bytes()
    assert raw[:8] == H.RECORD_MAGIC
    n = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12:12 + n])
    assert header["N"] == 16 and header["dt"] == 1e-3 and header["seed"] == 0 and header["model_hash"]
    body = np.frombuffer(raw[12 + n:], "<f8")
    rows = rec.sample_times.size
    assert np.array_equal(body[:rows], rec.sample_times)  # time column first
    assert np.array_equal(body[rows:2 * rows], rec.states[:, 0])
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(H.ArchiveCorruption):
        H.read_record(path)


def test_persist_ensemble(tmp_path):
    ens = fpe.build_ensemble(SMALL, dr.preset("d"), nz.CovarianceSpec.white(16), H.unit_state(16), 10, 0)
    rid = H.persist_run(ens, tmp_path)
    assert H.persist_run(ens, tmp_path) == rid
    with np.load(tmp_path / rid / "ensemble.npz") as z:
        assert np.array_equal(z["states"], ens.samples)
