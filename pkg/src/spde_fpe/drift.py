"""Reaction and transport nonlinearities of the semilinear equation.

The drift is ``F = F_1 + F_2`` with ``F_1(t, x)(xi) = f(xi, t, x(xi))`` and
``F_2(t, x) = d/dxi g(xi, t, x(xi))``, the latter only meaningful weakly
(paired against ``d/dxi e_k``).  Coefficients are polynomial tables so a model
can be serialised, hashed and audited; :func:`mollify_transport` is the one
place where non-polynomial callables appear.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .spectral import EigenSystem, cosine_pairing, norm_Lp, to_spectral


class NonFiniteDrift(ArithmeticError):
    """The drift evaluated to inf/nan; the state has blown up."""


class Poly:
    """Sum of monomials ``coef * xi^i * t^j * z^l``.

    Built from ``[(coef, i, j, l), ...]``.  Called as ``p(xi, t, z)`` with
    broadcasting numpy arguments.
    """

    def __init__(self, monomials: Sequence[Sequence[float]] = ()):
        mons = []
        for coef, i, j, l in monomials:
            if coef != 0:
                mons.append((float(coef), int(i), int(j), int(l)))
        self.monomials = tuple(sorted(mons, key=lambda m: m[1:]))

    @classmethod
    def in_z(cls, coeffs: Sequence[float], t_coeffs: Sequence[float] = (1.0,)) -> "Poly":
        """``(sum_j t_coeffs[j] t^j) * (sum_l coeffs[l] z^l)``."""
        return cls([(a * b, 0, j, l) for j, b in enumerate(t_coeffs)
                    for l, a in enumerate(coeffs)])

    @classmethod
    def const(cls, c: float) -> "Poly":
        return cls([(c, 0, 0, 0)])

    def __call__(self, xi, t, z):
        xi, t, z = np.asarray(xi, float), np.asarray(t, float), np.asarray(z, float)
        out = np.zeros(np.broadcast_shapes(xi.shape, t.shape, z.shape))
        zpow = [None, z]
        for c, i, j, l in self.monomials:
            while len(zpow) <= l:
                zpow.append(zpow[-1] * z)
            term = c
            if i:
                term = term * xi**i
            if j:
                term = term * t**j
            if l:
                term = term * zpow[l]
            out = out + term
        return out

    def profile(self, t):
        """Evaluate a ``t``-only polynomial."""
        return self(0.0, t, 0.0)

    def dz(self) -> "Poly":
        return Poly([(c * l, i, j, l - 1) for c, i, j, l in self.monomials if l])

    @property
    def depends_on_xi(self) -> bool:
        return any(i for _, i, _, _ in self.monomials)

    @property
    def depends_on_t(self) -> bool:
        return any(j for _, _, j, _ in self.monomials)

    @property
    def is_zero(self) -> bool:
        return not self.monomials

    def to_list(self):
        return [list(m) for m in self.monomials]

    def __add__(self, other: "Poly") -> "Poly":
        acc: dict = {}
        for c, *p in self.monomials + other.monomials:
            acc[tuple(p)] = acc.get(tuple(p), 0.0) + c
        return Poly([(c, *p) for p, c in acc.items()])

    def __eq__(self, other):
        return isinstance(other, Poly) and self.monomials == other.monomials

    def __repr__(self):
        return f"Poly({self.to_list()})"


ZERO = Poly()


@dataclass(frozen=True)
class Decomposition:
    """``f = f1 + f2`` with ``d/dz f1 <= C``, ``f2 z <= C(1+z^2)``, ``|f2| <= C(1+|z|^{2-1/m})``."""

    f1: Poly
    f2: Poly
    C: float


@dataclass(frozen=True)
class ReactionSpec:
    f: Poly = ZERO
    m: int = 2
    m1: float = 2.0
    c1: Poly = ZERO
    c2: Poly = ZERO
    decomposition: Decomposition | None = None

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("growth degree m must be >= 2")
        if self.m1 <= 0:
            raise ValueError("m1 must be positive")


@dataclass(frozen=True)
class TransportSpec:
    """``g = g1(xi, t, z) + g2(t, z)``; ``g2`` is called with ``xi`` ignored."""

    g1: Callable = ZERO
    g2: Callable = ZERO
    K: float = 0.5
    L: float = 0.0
    label: str = ""

    def __call__(self, xi, t, z):
        return self.g1(xi, t, z) + self.g2(0.0, t, z)

    @property
    def is_zero(self) -> bool:
        return all(isinstance(g, Poly) and g.is_zero for g in (self.g1, self.g2))


@dataclass(frozen=True)
class DriftModel:
    reaction: ReactionSpec = field(default_factory=ReactionSpec)
    transport: TransportSpec = field(default_factory=TransportSpec)
    one_sided_L: float | None = None
    name: str = "custom"

    @property
    def m(self) -> int:
        return self.reaction.m

    @property
    def K(self) -> float:
        return self.transport.K

    def c1(self, t) -> np.ndarray:
        return self.reaction.c1.profile(t)

    def to_dict(self) -> dict:
        r, tr = self.reaction, self.transport
        if not (isinstance(tr.g1, Poly) and isinstance(tr.g2, Poly)):
            raise TypeError("mollified transports are not serialisable")
        d = {
            "name": self.name,
            "f": r.f.to_list(), "m": r.m, "m1": r.m1,
            "c1": r.c1.to_list(), "c2": r.c2.to_list(),
            "g1": tr.g1.to_list(), "g2": tr.g2.to_list(), "K": tr.K, "L": tr.L,
            "one_sided_L": self.one_sided_L,
        }
        if r.decomposition is not None:
            dec = r.decomposition
            d["decomposition"] = {"f1": dec.f1.to_list(), "f2": dec.f2.to_list(), "C": dec.C}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DriftModel":
        dec = d.get("decomposition")
        reaction = ReactionSpec(
            f=Poly(d.get("f", [])), m=int(d.get("m", 2)), m1=float(d.get("m1", 2.0)),
            c1=Poly(d.get("c1", [])), c2=Poly(d.get("c2", [])),
            decomposition=None if dec is None else Decomposition(Poly(dec["f1"]), Poly(dec["f2"]), float(dec["C"])),
        )
        transport = TransportSpec(g1=Poly(d.get("g1", [])), g2=Poly(d.get("g2", [])),
                                  K=float(d.get("K", 0.5)), L=float(d.get("L", 0.0)))
        osl = d.get("one_sided_L")
        return cls(reaction, transport, None if osl is None else float(osl), d.get("name", "custom"))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def scaled_c1(self, factor: float) -> "DriftModel":
        r = self.reaction
        c1 = Poly([(c * factor, i, j, l) for c, i, j, l in r.c1.monomials])
        return DriftModel(ReactionSpec(r.f, r.m, r.m1, c1, r.c2, r.decomposition),
                          self.transport, self.one_sided_L, self.name)


# ---------------------------------------------------------------------------
# presets

_ALLEN_CAHN = Poly.in_z([0.0, 1.0, 0.0, -1.0])
_BURGERS = Poly.in_z([0.0, 0.0, 0.5])


def _allen_cahn_reaction() -> ReactionSpec:
    # |z - z^3| <= 1.2 (1 + |z|^3): the ratio peaks near 1.118 at |z| ~ 1.7
    # (f(z1+z2) - f(z1)) z2 = z2^2 - z2^2 (3 z1^2 + 3 z1 z2 + z2^2) <= z2^2
    return ReactionSpec(
        f=_ALLEN_CAHN, m=3, m1=2.0, c1=Poly.const(1.2), c2=Poly.const(1.0),
        decomposition=Decomposition(_ALLEN_CAHN, ZERO, 1.0),
    )


def preset(name: str) -> DriftModel:
    """Shipped models.

    ``a``/``burgers``: g = z^2/2, f = 0.  ``b``/``allen_cahn``: f = z - z^3.
    ``c``/``combined``: both.  ``d``/``linear``: f = g = 0.
    """
    key = {"burgers": "a", "allen_cahn": "b", "combined": "c", "linear": "d"}.get(name, name)
    burgers = TransportSpec(g2=_BURGERS, K=0.5, L=0.5, label="z^2/2")
    if key == "a":
        return DriftModel(ReactionSpec(m=2), burgers, one_sided_L=0.0, name="a")
    if key == "b":
        return DriftModel(_allen_cahn_reaction(), TransportSpec(K=0.5), one_sided_L=1.0, name="b")
    if key == "c":
        return DriftModel(_allen_cahn_reaction(), burgers, one_sided_L=1.0, name="c")
    if key == "d":
        return DriftModel(ReactionSpec(m=2), TransportSpec(K=0.5), one_sided_L=0.0, name="d")
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("a", "b", "c", "d")


# ---------------------------------------------------------------------------
# operators


def eval_F1(model: DriftModel, t: float, v: np.ndarray, es: EigenSystem) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        out = model.reaction.f(es.grid_points, t, v)
    if not np.all(np.isfinite(out)):
        raise NonFiniteDrift(f"reaction term not finite at t={t}")
    return out


def regularize(u: np.ndarray, alpha: float) -> np.ndarray:
    """``u / (1 + alpha |u|)``; ``alpha = 0`` returns ``u`` unchanged."""
    if alpha == 0:
        return u
    return u / (1.0 + alpha * np.abs(u))


def regularize_F1(model: DriftModel, alpha: float, t: float, v: np.ndarray,
                  es: EigenSystem) -> np.ndarray:
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return regularize(eval_F1(model, t, v, es), alpha)


def pair_F2(model: DriftModel, t: float, v: np.ndarray, es: EigenSystem) -> np.ndarray:
    """``<F_2(t, v), e_k> = -int g(xi, t, v) d/dxi e_k dxi`` for ``k <= N``."""
    tr = model.transport
    if tr.is_zero:
        return np.zeros(np.shape(v)[:-1] + (es.N,))
    with np.errstate(invalid="ignore", over="ignore"):
        g = tr(es.grid_points, t, v)
    if not np.all(np.isfinite(g)):
        raise NonFiniteDrift(f"transport term not finite at t={t}")
    return cosine_pairing(g, tr(0.0, t, 0.0), tr(1.0, t, 0.0), es)


def drift_coefficients(model: DriftModel, t: float, v: np.ndarray, es: EigenSystem,
                       alpha: float = 0.0) -> np.ndarray:
    """``<F_alpha(t, v), e_k>`` for ``k <= N`` (alpha = 0: unregularised)."""
    out = pair_F2(model, t, v, es)
    if not model.reaction.f.is_zero:
        out = out + to_spectral(regularize(eval_F1(model, t, v, es), alpha), es)
    return out


def vstar_norm(coeffs: np.ndarray, es: EigenSystem) -> np.ndarray:
    return np.sqrt(np.sum(coeffs * coeffs / es.lambdas, axis=-1))


def lyapunov_J(model: DriftModel, t: float, v: np.ndarray, es: EigenSystem) -> np.ndarray:
    """``J(t, x) = 2 (c1(t) + K) (1 + |x|_{L^{2m}}^m)``."""
    m = model.m
    return 2.0 * (model.c1(t) + model.K) * (1.0 + norm_Lp(v, 2 * m, es) ** m)


def random_band_limited(es: EigenSystem, count: int, rng: np.random.Generator,
                        scale: float = 0.1, modes: int | None = None) -> np.ndarray:
    """States ``a_k = scale * Z_k / k`` on the first ``modes`` modes."""
    modes = es.N if modes is None else min(modes, es.N)
    a = np.zeros((count, es.N))
    k = np.arange(1, modes + 1)
    a[:, :modes] = scale * rng.standard_normal((count, modes)) / k
    return a


# ---------------------------------------------------------------------------
# checkers


@dataclass
class ApproximationReport:
    max_ratio: float
    c_h: float
    passed: bool
    ratios: np.ndarray = field(repr=False)
    failures: list = field(default_factory=list)


def check_approximation_bound(model: DriftModel, alpha: float, h: np.ndarray,
                              samples, es: EigenSystem) -> ApproximationReport:
    """Measure ``|<F - F_alpha, h>| / (alpha J^2)`` against ``c(h) = |h|_inf``.

    ``samples`` is an iterable of ``(t, v)`` with ``v`` a grid field or a
    batch of grid fields.  ``F_2`` is not regularised, so only ``F_1``
    contributes to the difference.
    """
    from .spectral import to_grid

    h_grid = to_grid(np.asarray(h, float), es)
    c_h = float(np.max(np.abs(h_grid)))
    ratios, failures = [], []
    for t, v in samples:
        u = eval_F1(model, t, v, es)
        diff = u - regularize(u, alpha)
        inner = np.abs(es.h * np.sum(diff * h_grid, axis=-1))
        r = np.atleast_1d(inner / (alpha * lyapunov_J(model, t, v, es) ** 2))
        ratios.append(r)
        for i in np.flatnonzero(r > c_h):
            failures.append((t, i, float(r[i])))
    ratios = np.concatenate(ratios) if ratios else np.zeros(0)
    max_ratio = float(ratios.max()) if ratios.size else 0.0
    return ApproximationReport(max_ratio, c_h, max_ratio <= c_h, ratios, failures)


@dataclass(frozen=True)
class Lattice:
    z_max: float = 10.0
    nz: int = 401
    nt: int = 41
    nxi: int = 33
    T: float = 1.0
    npair: int = 401

    @property
    def z(self):
        return np.linspace(-self.z_max, self.z_max, self.nz)

    @property
    def zpair(self):
        return np.linspace(-self.z_max, self.z_max, self.npair)

    @property
    def t(self):
        return np.linspace(0.0, self.T, self.nt)

    @property
    def xi(self):
        return np.linspace(0.0, 1.0, self.nxi)


@dataclass
class ConditionAudit:
    """Worst margin ``rhs - lhs`` of one inequality over the lattice.

    ``arg_worst`` is where the minimum sits; ``witness`` is set only when the
    inequality is violated.
    """

    name: str
    worst_margin: float
    arg_worst: dict | None
    passed: bool
    skipped: bool = False

    @property
    def witness(self) -> dict | None:
        return None if self.passed else self.arg_worst


def _depends(fn, attr):
    return getattr(fn, attr) if isinstance(fn, Poly) else True


def _scan(lattice: Lattice, depends_xi: bool, depends_t: bool, margin_fn, coords):
    """Minimise ``margin_fn(xi, t) -> (margin, scale)`` over the (xi, t) lattice.

    ``coords`` names the axes of the margin array for the witness report.
    """
    xis = lattice.xi if depends_xi else lattice.xi[lattice.nxi // 2: lattice.nxi // 2 + 1]
    ts = lattice.t if depends_t else lattice.t[:1]
    worst, witness, ok = np.inf, None, True
    for t in ts:
        for xi in xis:
            margin, scale, grids = margin_fn(xi, t)
            tol = 1e-9 * (1.0 + np.abs(scale))
            bad = margin < -tol
            idx = int(np.argmin(margin))
            if margin.flat[idx] < worst:
                worst = float(margin.flat[idx])
                pos = np.unravel_index(idx, margin.shape)
                witness = {"xi": float(xi), "t": float(t)}
                witness.update({c: float(g[pos]) for c, g in zip(coords, grids)})
            if np.any(bad):
                ok = False
    return worst, witness, ok


def audit_conditions(model: DriftModel, lattice: Lattice | None = None) -> dict[str, ConditionAudit]:
    """Falsification audit of the growth, dissipativity and Lipschitz conditions."""
    lat = lattice or Lattice()
    r, tr = model.reaction, model.transport
    f, m = r.f, r.m
    z = lat.z
    z1, z2 = np.meshgrid(lat.zpair, lat.zpair, indexing="ij")
    f_xi, f_t = _depends(f, "depends_on_xi"), _depends(f, "depends_on_t")
    out: dict[str, ConditionAudit] = {}

    def record(name, dxi, dt, fn, coords):
        worst, arg_worst, ok = _scan(lat, dxi, dt, fn, coords)
        out[name] = ConditionAudit(name, worst, arg_worst, ok)

    def f1_margin(xi, t):
        rhs = r.c1.profile(t) * (1 + np.abs(z) ** m)
        return rhs - np.abs(f(xi, t, z)), rhs, (z,)

    record("f1", f_xi, f_t or r.c1.depends_on_t, f1_margin, ("z",))

    def f2_margin(xi, t):
        lhs = (f(xi, t, z1 + z2) - f(xi, t, z1)) * z2
        rhs = r.c2.profile(t) * (z2**2 + np.abs(z1) ** r.m1 + 1)
        return rhs - lhs, rhs, (z1, z2)

    record("f2", f_xi, f_t or r.c2.depends_on_t, f2_margin, ("z1", "z2"))

    def g1_margin(xi, t):
        a = tr.K * (1 + np.abs(z)) - np.abs(tr.g1(xi, t, z))
        b = tr.K * (1 + z**2) - np.abs(tr.g2(0.0, t, z))
        return np.minimum(a, b), tr.K * (1 + z**2), (z,)

    record("g1", _depends(tr.g1, "depends_on_xi"),
           _depends(tr.g1, "depends_on_t") or _depends(tr.g2, "depends_on_t"), g1_margin, ("z",))

    def g2_margin(xi, t):
        lhs = np.abs(tr(xi, t, z1) - tr(xi, t, z2))
        rhs = tr.L * (1 + np.abs(z1) + np.abs(z2)) * np.abs(z1 - z2)
        return rhs - lhs, rhs, (z1, z2)

    g_xi = _depends(tr.g1, "depends_on_xi")
    g_t = _depends(tr.g1, "depends_on_t") or _depends(tr.g2, "depends_on_t")
    record("g2", g_xi, g_t, g2_margin, ("z1", "z2"))

    if model.one_sided_L is None:
        out["one_sided"] = ConditionAudit("one_sided", np.nan, None, True, skipped=True)
    else:
        Lf = model.one_sided_L

        def os_margin(xi, t):
            d = z1 - z2
            lhs = (f(xi, t, z1) - f(xi, t, z2)) * d
            rhs = Lf * (1 + np.abs(z1) ** (m - 1) + np.abs(z2) ** (m - 1)) * d * d
            return rhs - lhs, rhs, (z1, z2)

        record("one_sided", f_xi, f_t, os_margin, ("z1", "z2"))

    dec = r.decomposition
    if dec is None:
        out["decomposition"] = ConditionAudit("decomposition", np.nan, None, True, skipped=True)
    else:
        df1 = dec.f1.dz()

        def dec_margin(xi, t):
            mismatch = -np.abs(dec.f1(xi, t, z) + dec.f2(xi, t, z) - f(xi, t, z))
            c_der = dec.C - df1(xi, t, z)
            c_sign = dec.C * (1 + z**2) - dec.f2(xi, t, z) * z
            c_grow = dec.C * (1 + np.abs(z) ** (2 - 1.0 / m)) - np.abs(dec.f2(xi, t, z))
            margin = np.minimum.reduce([mismatch, c_der, c_sign, c_grow])
            return margin, dec.C * (1 + z**2) + np.abs(f(xi, t, z)), (z,)

        dxi = f_xi or dec.f1.depends_on_xi or dec.f2.depends_on_xi
        dt = f_t or dec.f1.depends_on_t or dec.f2.depends_on_t
        record("decomposition", dxi, dt, dec_margin, ("z",))
    return out


def audit_passed(audit: dict[str, ConditionAudit]) -> bool:
    return all(a.passed for a in audit.values())


# ---------------------------------------------------------------------------
# mollification of the transport term

CHI_SLOPE = 16.0 / 9.0  # sup |chi_n'|, independent of n


def chi(r, n: float):
    """C^1 clamp: identity on ``|r| <= n``, zero for ``|r| >= 2n``.

    On ``n < |r| < 2n`` a cubic Hermite ramp ``n psi((|r| - n)/n)`` with
    ``psi(0) = psi'(0) = 1`` and ``psi(1) = psi'(1) = 0``.
    """
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    s = np.clip((a - n) / n, 0.0, 1.0)
    psi = 3 * s**3 - 5 * s**2 + s + 1
    ramp = np.sign(r) * n * psi
    return np.where(a <= n, r, np.where(a >= 2 * n, 0.0, ramp))


def _bump_stencil(points: int = 8):
    u = -1.0 + (2 * np.arange(points) + 1) / points
    w = np.exp(-1.0 / (1.0 - u * u))
    return u, w / w.sum()


@dataclass(frozen=True)
class _Mollified:
    g: Callable
    n: int
    smooth_xi: bool
    stencil: int = 8

    def __call__(self, xi, t, z):
        u, w = _bump_stencil(self.stencil)
        xi, z = np.asarray(xi, float), np.asarray(z, float)
        acc = 0.0
        xshifts = [(1.0, 0.0)] if not self.smooth_xi else list(zip(w, u / self.n))
        for wz, dz in zip(w, u / self.n):
            for wx, dx in xshifts:
                acc = acc + wz * wx * chi(self.g(xi - dx, t, z - dz), self.n)
        return acc


def mollify_transport(model: DriftModel, n: int, stencil: int = 8) -> TransportSpec:
    """Clamp ``g`` by ``chi_n`` and smooth it with a width-``1/n`` bump in ``(xi, z)``.

    The result satisfies the growth condition with ``2K`` and the Lipschitz
    condition with ``3 C L`` where ``C = sup |chi_n'|``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tr = model.transport
    return TransportSpec(
        g1=_Mollified(tr.g1, n, True, stencil),
        g2=_Mollified(tr.g2, n, False, stencil),
        K=2 * tr.K, L=3 * CHI_SLOPE * tr.L, label=f"{tr.label} mollified n={n}",
    )
