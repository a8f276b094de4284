"""Diagonal noise covariance, keyed random streams and the stochastic convolution.

Each mode of the stochastic convolution ``W_A(t) = int_0^t e^{(t-r)A} sqrt(G) dW``
is an Ornstein-Uhlenbeck process, so it is sampled exactly:

    w_k <- exp(-lambda_k dt) w_k + sqrt(g_k (1 - exp(-2 lambda_k dt)) / (2 lambda_k)) z_k

with ``z_k`` standard normal.  No time discretisation error enters.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .spectral import EigenSystem, to_grid


class NoiseKind(str, enum.Enum):
    WHITE = "white"
    POWER_DECAY = "powerDecay"
    CUSTOM = "custom"


class Verdict(str, enum.Enum):
    SATISFIED = "satisfied"
    VIOLATED = "violated"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class CovarianceSpec:
    """Diagonal covariance ``G e_k = g_k e_k``.

    ``delta``/``delta1`` are the exponents of the trace condition on the
    stochastic convolution, ``theta``/``q`` those of the L^q square-function
    condition.  ``rho`` is the decay exponent for ``powerDecay``.
    """

    weights: np.ndarray = field(repr=False)
    kind: NoiseKind = NoiseKind.WHITE
    rho: float = 0.0
    delta: float = 0.2
    delta1: float = 0.2
    theta: float = 0.3
    q: float = 5.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("noise weights must be a finite nonnegative 1-D sequence")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "kind", NoiseKind(self.kind))

    @classmethod
    def white(cls, N: int, **kw) -> "CovarianceSpec":
        return cls(np.ones(N), NoiseKind.WHITE, 0.0, **kw)

    @classmethod
    def power_decay(cls, N: int, rho: float, scale: float = 1.0, **kw) -> "CovarianceSpec":
        k = np.arange(1, N + 1, dtype=float)
        return cls(scale * k**-rho, NoiseKind.POWER_DECAY, rho, **kw)

    @classmethod
    def custom(cls, weights, **kw) -> "CovarianceSpec":
        return cls(np.asarray(weights, dtype=float), NoiseKind.CUSTOM, 0.0, **kw)

    @classmethod
    def zero(cls, N: int, **kw) -> "CovarianceSpec":
        return cls(np.zeros(N), NoiseKind.CUSTOM, 0.0, **kw)

    @property
    def N(self) -> int:
        return self.weights.size

    def _tail_scale(self) -> float | None:
        """Prefactor ``s`` with ``g_k <= s k^{-rho}`` for ``k > N``, or None."""
        if self.kind is NoiseKind.CUSTOM:
            if not np.any(self.weights):
                # the zero covariance is its own (vanishing) tail model
                return 0.0
            return None
        k = np.arange(1, self.N + 1, dtype=float)
        return float(np.max(self.weights * k**self.rho))


# ---------------------------------------------------------------------------
# random streams


class Purpose(enum.IntEnum):
    NOISE = 0
    INITIAL = 1
    STATES = 2
    AUX = 3


@dataclass(frozen=True)
class RngStream:
    """Counter-based stream keyed by ``(seed, path_index, purpose)``.

    Every path owns its own Philox key, so draws do not depend on how paths
    are grouped into batches or which worker runs them.
    """

    seed: int
    path: int = 0
    purpose: int = Purpose.NOISE

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), self.path, int(self.purpose)])
        return np.random.Generator(np.random.Philox(ss))

    def normals(self, n_steps: int, n_modes: int) -> np.ndarray:
        """Standard normals for steps ``0..n_steps-1``; row ``i`` drives step ``i``."""
        return self.generator().standard_normal((n_steps, n_modes))


def batch_normals(seed: int, paths, n_steps: int, n_modes: int,
                  purpose: int = Purpose.NOISE) -> np.ndarray:
    """Stack per-path streams into an ``(n_steps, len(paths), n_modes)`` array."""
    out = np.empty((n_steps, len(paths), n_modes))
    for i, p in enumerate(paths):
        out[:, i, :] = RngStream(seed, int(p), purpose).normals(n_steps, n_modes)
    return out


# ---------------------------------------------------------------------------
# stochastic convolution


@dataclass
class ConvolutionState:
    time: float
    modes: np.ndarray


def ou_factors(spec: CovarianceSpec, es: EigenSystem, dt: float):
    """Per-mode decay ``e^{-lambda dt}`` and innovation standard deviation."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    decay = np.exp(-es.lambdas * dt)
    var = spec.weights * -np.expm1(-2.0 * es.lambdas * dt) / (2.0 * es.lambdas)
    return decay, np.sqrt(var)


def stationary_variance(spec: CovarianceSpec, es: EigenSystem) -> np.ndarray:
    return spec.weights / (2.0 * es.lambdas)


def sample_convolution_step(state: ConvolutionState, dt: float, spec: CovarianceSpec,
                            es: EigenSystem, rng) -> ConvolutionState:
    """Advance every mode by the exact OU transition over ``dt``.

    ``rng`` is a numpy Generator or an array of standard normals with the
    shape of ``state.modes``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    decay, sd = ou_factors(spec, es, dt)
    z = rng.standard_normal(np.shape(state.modes)) if hasattr(rng, "standard_normal") else rng
    return ConvolutionState(state.time + dt, decay * state.modes + sd * z)


def wiener_mode_increments(spec: CovarianceSpec, dt: float, rng, size=None) -> np.ndarray:
    """Cylindrical Wiener increments ``sqrt(g_k dt) z_k``."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    shape = spec.weights.shape if size is None else tuple(np.atleast_1d(size)) + spec.weights.shape
    return np.sqrt(spec.weights * dt) * rng.standard_normal(shape)


def simulate_convolution(spec: CovarianceSpec, es: EigenSystem, T: float, steps: int,
                         M: int, seed: int, purpose: int = Purpose.AUX):
    """Yield ``(t, modes)`` for ``t = 0, dt, ..., T`` over ``M`` paths."""
    dt = T / steps
    decay, sd = ou_factors(spec, es, dt)
    z = batch_normals(seed, range(M), steps, es.N, purpose)
    w = np.zeros((M, es.N))
    yield 0.0, w
    for i in range(steps):
        w = decay * w + sd * z[i]
        yield (i + 1) * dt, w


# ---------------------------------------------------------------------------
# checkers


@dataclass
class TraceReport:
    first_partial: float
    first_tail: float
    second_partial: float
    second_tail: float
    verdict: Verdict

    @property
    def finite_partial_sum(self) -> float:
        return self.first_partial + self.second_partial

    @property
    def tail_bound(self) -> float:
        return self.first_tail + self.second_tail


def _power_tail(N: int, beta: float) -> float:
    """Integral-test bound on ``sum_{k>N} k^{-beta}``."""
    if beta <= 1.0:
        return np.inf
    return N ** (1.0 - beta) / (beta - 1.0)


def trace_terms(spec: CovarianceSpec, T: float, es: EigenSystem, delta: float | None = None,
                delta1: float | None = None):
    """Per-mode terms of both trace integrals (closed forms)."""
    delta = spec.delta if delta is None else delta
    delta1 = spec.delta1 if delta1 is None else delta1
    lam, g = es.lambdas, spec.weights
    first = g * lam ** (2 * delta) * -np.expm1(-2 * lam * T) / (2 * lam)
    a = 1.0 - 2.0 * delta1
    if a <= 0:
        second = np.full_like(lam, np.inf)
        second[g == 0] = 0.0
    else:
        # int_0^1 r^{-2 delta1} e^{-2 lambda r} dr = (2 lambda)^{-a} gamma_lower(a, 2 lambda)
        second = g * (2 * lam) ** (-a) * special.gamma(a) * special.gammainc(a, 2 * lam)
    return first, second


def check_trace_condition(spec: CovarianceSpec, T: float, es: EigenSystem,
                          delta: float | None = None, delta1: float | None = None) -> TraceReport:
    delta = spec.delta if delta is None else delta
    delta1 = spec.delta1 if delta1 is None else delta1
    if delta <= 0 or delta1 <= 0:
        raise ValueError("delta and delta1 must be positive")
    first, second = trace_terms(spec, T, es, delta, delta1)
    p1, p2 = float(first.sum()), float(second.sum())
    scale = spec._tail_scale()
    if scale is None:
        verdict = Verdict.INCONCLUSIVE if np.isfinite(p1 + p2) else Verdict.VIOLATED
        return TraceReport(p1, np.nan, p2, np.nan, verdict)
    if scale == 0.0:
        t1 = t2 = 0.0
    else:
        # g_k lambda_k^{2 delta - 1} / 2 <= scale pi^{4 delta - 2} k^{4 delta - 2 - rho} / 2
        t1 = scale * np.pi ** (4 * delta - 2) / 2 * _power_tail(es.N, spec.rho + 2 - 4 * delta)
        a = 1.0 - 2.0 * delta1
        if a <= 0:
            t2 = np.inf
        else:
            t2 = (scale * special.gamma(a) * (2 * np.pi**2) ** (-a)
                  * _power_tail(es.N, spec.rho + 2 - 4 * delta1))
    total = p1 + p2 + t1 + t2
    verdict = Verdict.SATISFIED if np.isfinite(total) else Verdict.VIOLATED
    return TraceReport(p1, float(t1), p2, float(t2), verdict)


@dataclass
class G1Report:
    value: float
    tail_bound: float
    verdict: Verdict


def check_G1(spec: CovarianceSpec, es: EigenSystem, theta: float | None = None,
             q: float | None = None) -> G1Report:
    """L^q norm of the square function ``(sum_k lambda_k^{-2 theta} g_k e_k^2)^{1/2}``."""
    theta = spec.theta if theta is None else theta
    q = spec.q if q is None else q
    if theta < 0 or q <= 0 or not 1.0 / (2.0 * q) + 2.0 * theta < 1.0:
        raise ValueError(f"exponents violate 1/(2q) + 2 theta < 1: theta={theta}, q={q}")
    coeff = es.lambdas ** (-2 * theta) * spec.weights
    basis_sq = 2.0 * np.sin(np.outer(es.grid_points, np.arange(1, es.N + 1)) * np.pi) ** 2
    partial = basis_sq @ coeff
    scale = spec._tail_scale()
    if scale is None:
        tail = np.nan
        sq = partial
    elif scale == 0.0:
        tail = 0.0
        sq = partial
    else:
        # e_k^2 <= 2 and lambda_k^{-2 theta} g_k <= scale pi^{-4 theta} k^{-4 theta - rho}
        tail = 2.0 * scale * np.pi ** (-4 * theta) * _power_tail(es.N, 4 * theta + spec.rho)
        sq = partial + tail
    if not np.isfinite(tail) and not np.isnan(tail):
        return G1Report(np.inf, np.inf, Verdict.VIOLATED)
    value = float((es.h * np.sum(np.sqrt(sq) ** q)) ** (1.0 / q))
    if np.isnan(tail):
        return G1Report(value, np.nan, Verdict.INCONCLUSIVE)
    return G1Report(value, float(tail), Verdict.SATISFIED)


@dataclass
class MomentReport:
    sup_estimate: float
    bound: float
    stderr: float
    passed: bool
    estimates: np.ndarray = field(repr=False)


def convolution_moment_bound(spec: CovarianceSpec, es: EigenSystem, delta: float, T: float) -> float:
    """``sum_k g_k lambda_k^{2 delta} (1 - e^{-2 lambda_k T}) / (2 lambda_k)`` over retained modes."""
    lam = es.lambdas
    return float(np.sum(spec.weights * lam ** (2 * delta) * -np.expm1(-2 * lam * T) / (2 * lam)))


def estimate_convolution_moment(spec: CovarianceSpec, es: EigenSystem, delta: float, T: float,
                                M: int, steps: int, seed: int) -> MomentReport:
    """Monte Carlo ``sup_t E|(-A)^delta W_A(t)|^2`` against its closed-form bound."""
    if delta > 0:
        rep = check_trace_condition(spec, T, es, delta=delta)
        if rep.verdict is Verdict.VIOLATED:
            raise ValueError(f"trace condition violated for delta={delta}")
    weights = es.lambdas ** (2 * delta)
    est = np.empty(steps + 1)
    err = np.empty(steps + 1)
    for i, (_, w) in enumerate(simulate_convolution(spec, es, T, steps, M, seed)):
        vals = (w * w) @ weights
        est[i] = vals.mean()
        err[i] = vals.std(ddof=1) / np.sqrt(M) if M > 1 else 0.0
    i_max = int(np.argmax(est))
    bound = convolution_moment_bound(spec, es, delta, T)
    passed = bool(est[i_max] <= bound * (1.0 + 3.0 / np.sqrt(M)))
    return MomentReport(float(est[i_max]), bound, float(err[i_max]), passed, est)


@dataclass
class TailReport:
    r: np.ndarray
    prob: np.ndarray
    epsilon: float
    epsilon_stderr: float
    intercept: float
    passed: bool
    n_fit: int
    sup_samples: np.ndarray = field(repr=False)

    @property
    def epsilon_ci(self):
        return self.epsilon - 1.96 * self.epsilon_stderr, self.epsilon + 1.96 * self.epsilon_stderr


def fernique_tail_probe(spec: CovarianceSpec, es: EigenSystem, T: float, M: int, r_grid,
                        seed: int, steps: int = 250, min_count: int = 5) -> TailReport:
    """Empirical ``P(sup_{t<=T} |W_A(t)|_inf >= r)`` with a sub-Gaussian fit.

    The fit regresses ``log P`` on ``r^2`` over the tail part of the grid
    (probability at most 1/2 and at least ``min_count`` exceedances); a
    positive slope magnitude ``epsilon`` with a confidence interval that
    excludes zero is what the probe certifies.
    """
    r = np.asarray(r_grid, dtype=float)
    sup = np.zeros(M)
    for _, w in simulate_convolution(spec, es, T, steps, M, seed):
        np.maximum(sup, np.abs(to_grid(w, es)).max(axis=-1), out=sup)
    prob = (sup[None, :] >= r[:, None]).mean(axis=1)
    use = (prob <= 0.5) & (prob * M >= min_count)
    if use.sum() < 3:
        return TailReport(r, prob, np.nan, np.nan, np.nan, False, int(use.sum()), sup)
    fit = stats.linregress(r[use] ** 2, np.log(prob[use]))
    eps = -fit.slope
    passed = bool(eps - 1.96 * fit.stderr > 0)
    return TailReport(r, prob, float(eps), float(fit.stderr), float(fit.intercept), passed,
                      int(use.sum()), sup)
