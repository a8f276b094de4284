"""Exponential-Euler Galerkin integrator for the (regularised) semilinear SPDE.

Per mode the scheme reads

    a_k <- e^{-lambda_k dt} a_k + (1 - e^{-lambda_k dt}) / lambda_k * F_k(t, X) + eta_k

where ``F_k`` is the ``k``-th coefficient of ``F_1^alpha + F_2`` frozen at the
left endpoint and ``eta_k`` is the exact increment of the stochastic
convolution.  ``shiftedY`` advances ``Y = X - W_A`` without noise and
reconstructs ``X = Y + W_A``; both schemes consume the same noise.

Running integrals of quadratic quantities in ``Y`` are computed exactly along
the scheme's own interpolant ``Y(s) = F/lambda + (Y_0 - F/lambda) e^{-lambda s}``,
so the discrete energy identity holds to rounding.  ``J^2`` and the
``L^{2m}`` moment use the left-endpoint rule.
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import drift as dr
from .noise import CovarianceSpec, Purpose, RngStream, ou_factors
from .spectral import EigenSystem, build_eigensystem, power_integral, to_grid, to_spectral

INTEGRALS = ("Y_V2", "YF", "F_Vstar2", "J2", "L2m")


class Scheme(str, enum.Enum):
    EXPONENTIAL_EULER_X = "exponentialEulerX"
    SHIFTED_Y = "shiftedY"


class BlowUp(RuntimeError):
    """A path exceeded the L^inf guard; ``record`` holds the finite prefix."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class SolverConfig:
    N: int = 64
    grid_size: int = 256
    dt: float = 1e-3
    T: float = 0.25
    s: float = 0.0
    scheme: Scheme = Scheme.EXPONENTIAL_EULER_X
    alpha: float = 0.0
    blowup_threshold: float = 1e3
    block_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.s <= self.T:
            raise ValueError("start time must not exceed T")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        steps = (self.T - self.s) / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("T - s must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.s) / self.dt))

    def eigensystem(self) -> EigenSystem:
        return build_eigensystem(self.N, self.grid_size)


@dataclass
class PathState:
    t: float
    x: np.ndarray
    wa: np.ndarray
    y: np.ndarray


@dataclass
class TrajectoryRecord:
    sample_times: np.ndarray
    states: np.ndarray
    y_states: np.ndarray
    integrals: dict
    seed: int
    path: int
    config: SolverConfig
    model_hash: str = ""
    blowup_time: float | None = None

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]


class _Stepper:
    """Precomputed per-mode factors shared by every path of a run."""

    def __init__(self, config: SolverConfig, model: dr.DriftModel, spec: CovarianceSpec,
                 es: EigenSystem | None = None):
        self.config, self.model, self.spec = config, model, spec
        self.es = es or config.eigensystem()
        if spec.N != self.es.N:
            raise ValueError(f"noise has {spec.N} modes, solver {self.es.N}")
        lam, dt = self.es.lambdas, config.dt
        self.decay, self.noise_sd = ou_factors(spec, self.es, dt)
        self.phi = -np.expm1(-lam * dt) / lam  # phi1(lambda dt) dt
        self.one_minus_e2 = -np.expm1(-2 * lam * dt)

    def drift(self, t: float, x: np.ndarray):
        """Return ``(F coefficients, grid values, F_1^alpha projection)``."""
        es, model, alpha = self.es, self.model, self.config.alpha
        v = to_grid(x, es)
        out = dr.pair_F2(model, t, v, es)
        f1 = None
        if not model.reaction.f.is_zero:
            f1 = to_spectral(dr.regularize(dr.eval_F1(model, t, v, es), alpha), es)
            out = out + f1
        return out, v, f1

    def step(self, t, x, wa, y, z, acc=None, v=None):
        """One step for a batch; ``z`` holds the standard normals of this step."""
        cfg, es, lam = self.config, self.es, self.es.lambdas
        F, v, f1 = self.drift(t, x)
        if f1 is not None and cfg.alpha > 0:
            # |<w, e_k>| <= |w|_inf |e_k|_{L^1} < sqrt(2)/alpha for |w| < 1/alpha
            if np.max(np.abs(f1)) > np.sqrt(2.0) / cfg.alpha * (1 + 1e-12):
                raise RuntimeError("regularised reaction exceeded its a-priori envelope")
        eta = self.noise_sd * z
        if acc is not None:
            dt = cfg.dt
            c = F / lam
            d = y - c
            one_m_e = self.phi * lam
            acc["Y_V2"] += np.sum(lam * c * c * dt + 2 * c * d * one_m_e
                                  + 0.5 * d * d * self.one_minus_e2, axis=-1)
            acc["YF"] += np.sum(F * (c * dt + d * self.phi), axis=-1)
            acc["F_Vstar2"] += dt * np.sum(F * F / lam, axis=-1)
            acc["J2"] += dt * dr.lyapunov_J(self.model, t, v, es) ** 2
            acc["L2m"] += dt * power_integral(v, 2 * self.model.m, es)
        wa_new = self.decay * wa + eta
        if cfg.scheme is Scheme.SHIFTED_Y:
            y_new = self.decay * y + self.phi * F
            x_new = y_new + wa_new
        else:
            x_new = self.decay * x + self.phi * F + eta
            y_new = x_new - wa_new
        return x_new, wa_new, y_new, v


def step(config: SolverConfig, model: dr.DriftModel, spec: CovarianceSpec, state: PathState,
         rng, es: EigenSystem | None = None) -> PathState:
    """Advance a single path (or a batch) by one step.

    ``rng`` is a numpy Generator or an array of standard normals shaped like
    ``state.x``.
    """
    if state.t + config.dt > config.T + 1e-12:
        raise ValueError("step would pass the horizon T")
    st = _Stepper(config, model, spec, es)
    z = rng.standard_normal(np.shape(state.x)) if hasattr(rng, "standard_normal") else rng
    v = to_grid(state.x, st.es)
    if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > config.blowup_threshold:
        raise BlowUp(f"|X|_inf above {config.blowup_threshold} at t={state.t}")
    x, wa, y, _ = st.step(state.t, state.x, state.wa, state.y, z)
    return PathState(state.t + config.dt, x, wa, y)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleResult:
    """Snapshots of ``M`` paths at ``sample_times``.

    ``states`` is ``(n_samples, M, N)`` (or None when not stored);
    ``integrals[name]`` and ``y_norm2`` are ``(n_samples, M)``.  Paths that
    blew up have ``blown[p]`` set and are excluded by :meth:`alive`.
    """

    sample_times: np.ndarray
    states: np.ndarray | None
    y_states: np.ndarray | None
    y_norm2: np.ndarray
    integrals: dict
    blown: np.ndarray
    blowup_time: np.ndarray
    x0: np.ndarray
    config: SolverConfig
    seed: int
    paths: np.ndarray

    @property
    def M(self) -> int:
        return self.blown.size

    @property
    def alive(self) -> np.ndarray:
        return ~self.blown

    @property
    def blowup_fraction(self) -> float:
        return float(self.blown.mean()) if self.blown.size else 0.0


def _run_block(stepper: _Stepper, x0, paths, seed, stride, store_states, chunk=64):
    cfg, es = stepper.config, stepper.es
    B, n = len(paths), cfg.n_steps
    n_samples = n // stride + 1
    gens = [RngStream(seed, int(p), Purpose.NOISE).generator() for p in paths]
    x = np.array(x0, dtype=float, copy=True)
    wa = np.zeros_like(x)
    y = x.copy()
    acc = {k: np.zeros(B) for k in INTEGRALS}
    states = np.empty((n_samples, B, es.N)) if store_states else None
    y_states = np.empty((n_samples, B, es.N)) if store_states else None
    y2 = np.empty((n_samples, B))
    ints = {k: np.empty((n_samples, B)) for k in INTEGRALS}
    blown = np.zeros(B, dtype=bool)
    blow_t = np.full(B, np.nan)

    def snap(i):
        if store_states:
            states[i], y_states[i] = x, y
        y2[i] = np.sum(y * y, axis=-1)
        for k in INTEGRALS:
            ints[k][i] = acc[k]

    snap(0)
    z = None
    for i in range(n):
        if i % chunk == 0:
            rows = min(chunk, n - i)
            z = np.stack([g.standard_normal((rows, es.N)) for g in gens], axis=1)
        t = cfg.s + i * cfg.dt
        v = to_grid(x, es)
        bad = ~np.all(np.isfinite(v), axis=-1) | (np.max(np.abs(v), axis=-1) > cfg.blowup_threshold)
        new = bad & ~blown
        if np.any(new):
            blown |= new
            blow_t[new] = t
        if np.any(blown):
            # frozen rows keep their last finite snapshot; zero the working copy
            x[blown] = 0.0
            wa[blown] = 0.0
            y[blown] = 0.0
        x, wa, y, _ = stepper.step(t, x, wa, y, z[i % chunk], acc)
        if (i + 1) % stride == 0:
            j = (i + 1) // stride
            snap(j)
            if np.any(blown) and store_states:
                states[j][blown] = np.nan
                y_states[j][blown] = np.nan
    return states, y_states, y2, ints, blown, blow_t


def integrate_ensemble(config: SolverConfig, model: dr.DriftModel, spec: CovarianceSpec,
                       x0, seed: int, M: int | None = None, paths=None,
                       sample_every: int = 1, store_states: bool = True,
                       threads: int = 1) -> EnsembleResult:
    """Integrate ``M`` independent paths; path ``p`` draws noise from stream ``(seed, p)``.

    ``x0`` is one initial state (shared) or an ``(M, N)`` array.  Paths are
    processed in fixed blocks of ``config.block_size``; ``threads`` only
    changes which worker runs a block, so results are schedule independent.
    """
    st = _Stepper(config, model, spec)
    es = st.es
    x0 = np.asarray(x0, dtype=float)
    if paths is None:
        if M is None:
            M = 1 if x0.ndim == 1 else x0.shape[0]
        paths = np.arange(M)
    paths = np.asarray(paths, dtype=np.int64)
    M = paths.size
    x0 = np.broadcast_to(x0, (M, es.N)) if x0.ndim == 1 else x0
    if x0.shape != (M, es.N):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({M}, {es.N})")
    n = config.n_steps
    if sample_every < 1 or (n and n % sample_every):
        raise ValueError("sample_every must divide the number of steps")
    stride = sample_every if n else 1
    bs = config.block_size
    blocks = [(lo, min(lo + bs, M)) for lo in range(0, M, bs)]

    def work(b):
        lo, hi = b
        return _run_block(st, x0[lo:hi], paths[lo:hi], seed, stride, store_states)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]

    def cat(idx, axis=1):
        return np.concatenate([p[idx] for p in parts], axis=axis)

    times = config.s + config.dt * stride * np.arange(n // stride + 1)
    return EnsembleResult(
        sample_times=times,
        states=cat(0) if store_states else None,
        y_states=cat(1) if store_states else None,
        y_norm2=cat(2),
        integrals={k: np.concatenate([p[3][k] for p in parts], axis=1) for k in INTEGRALS},
        blown=cat(4, axis=0), blowup_time=cat(5, axis=0),
        x0=np.array(x0), config=config, seed=seed, paths=paths,
    )


def _record(ens: EnsembleResult, i: int, model: dr.DriftModel) -> TrajectoryRecord:
    keep = slice(None)
    if ens.blown[i]:
        last = int(np.floor((ens.blowup_time[i] - ens.config.s) / (ens.sample_times[1] - ens.sample_times[0]) + 1e-9)) \
            if ens.sample_times.size > 1 else 0
        keep = slice(0, last + 1)
    try:
        mh = model.digest()
    except TypeError:
        mh = ""
    return TrajectoryRecord(
        sample_times=ens.sample_times[keep].copy(),
        states=ens.states[keep, i].copy(),
        y_states=ens.y_states[keep, i].copy(),
        integrals={k: v[keep, i].copy() for k, v in ens.integrals.items()},
        seed=ens.seed, path=int(ens.paths[i]), config=ens.config, model_hash=mh,
        blowup_time=None if not ens.blown[i] else float(ens.blowup_time[i]),
    )


def integrate_path(config: SolverConfig, model: dr.DriftModel, spec: CovarianceSpec, x0,
                   seed: int, path: int = 0, sample_every: int = 1) -> TrajectoryRecord:
    ens = integrate_ensemble(config, model, spec, np.asarray(x0, float)[None, :], seed,
                             paths=[path], sample_every=sample_every)
    rec = _record(ens, 0, model)
    if rec.blowup_time is not None:
        raise BlowUp(f"path blew up at t={rec.blowup_time}", rec)
    return rec


def integrate_pair_shared_noise(config: SolverConfig, model: dr.DriftModel, spec: CovarianceSpec,
                                x0, x0_prime, seed: int, path: int = 0, sample_every: int = 1):
    """Two paths driven by one noise realisation."""
    x = np.stack([np.asarray(x0, float), np.asarray(x0_prime, float)])
    ens = integrate_ensemble(config, model, spec, x, seed, paths=[path, path],
                             sample_every=sample_every)
    if np.any(ens.blown):
        raise BlowUp("a path of the pair blew up", None)
    return _record(ens, 0, model), _record(ens, 1, model)


# ---------------------------------------------------------------------------
# energy inequality


@dataclass
class EnergyCheck:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    slack: np.ndarray
    identity_defect: np.ndarray = field(repr=False)


def energy_terms(y_norm2, integrals, x0_norm2):
    """Pathwise ``|Y|^2 + int |Y|_V^2 <= |x|^2 + int |F_alpha|_{V*}^2``.

    ``identity_defect`` is the residual of the exact energy identity
    ``|Y|^2 + 2 int |Y|_V^2 - 2 int <Y, F> = |x|^2`` that the inequality is
    derived from.
    """
    lhs = y_norm2 + integrals["Y_V2"]
    rhs = x0_norm2 + integrals["F_Vstar2"]
    defect = y_norm2 + 2 * integrals["Y_V2"] - 2 * integrals["YF"] - x0_norm2
    return lhs, rhs, rhs - lhs, defect


def pathwise_energy_check(record: TrajectoryRecord) -> EnergyCheck:
    y2 = np.sum(record.y_states**2, axis=-1)
    x2 = float(np.sum(record.states[0] ** 2))
    lhs, rhs, slack, defect = energy_terms(y2, record.integrals, x2)
    return EnergyCheck(record.sample_times, lhs, rhs, slack, defect)


def with_alpha(config: SolverConfig, alpha: float) -> SolverConfig:
    return replace(config, alpha=alpha)
