"""Dirichlet sine basis on (0, 1).

Fields are plain numpy arrays.  A spectral field holds the coefficients
``a_k = <x, e_k>`` for ``e_k = sqrt(2) sin(k pi xi)``, ``k = 1..N``, on its
last axis; a grid field holds point values at the interior nodes
``xi_j = j / (n + 1)``.  Leading axes are batch axes, so an ensemble of
``M`` states is an ``(M, N)`` array.

The quadrature rule is the composite trapezoid rule on the uniform grid with
implicit zero boundary values, i.e. every interior node has weight
``1 / (n + 1)``.  With that rule the discrete sine transform is an exact
orthogonal change of basis, which is what makes the round trip exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import fft

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class EigenSystem:
    """Eigenpairs of the Dirichlet Laplacian truncated at ``N`` modes."""

    N: int
    grid_size: int
    lambdas: np.ndarray = field(repr=False)
    grid_points: np.ndarray = field(repr=False)

    @property
    def spectral_gap(self) -> float:
        """``omega = -lambda_1``."""
        return -float(self.lambdas[0])

    @property
    def h(self) -> float:
        """Grid spacing, equal to the quadrature weight of every node."""
        return 1.0 / (self.grid_size + 1)

    @property
    def wavenumbers(self) -> np.ndarray:
        return np.arange(1, self.N + 1, dtype=float) * np.pi

    def basis(self, k: int) -> np.ndarray:
        """Grid values of ``e_k`` (closed form, used by tests and oracles)."""
        return SQRT2 * np.sin(k * np.pi * self.grid_points)

    @property
    def use_fft(self) -> bool:
        """FFT paths only when the transform length ``2(n+1)`` is 5-smooth."""
        m = 2 * (self.grid_size + 1)
        return fft.next_fast_len(m, real=True) == m

    @cached_property
    def _sine_matrix(self) -> np.ndarray:
        # (N, n) with entries e_k(xi_j); read-only once built
        k = np.arange(1, self.N + 1)[:, None]
        mat = SQRT2 * np.sin(np.pi * k * np.arange(1, self.grid_size + 1)[None, :] / (self.grid_size + 1))
        mat.setflags(write=False)
        return mat

    @cached_property
    def _cosine_matrix(self) -> np.ndarray:
        # (n + 2, N): trapezoid weights times -d/dxi e_k at xi_0..xi_{n+1}
        n = self.grid_size
        j = np.arange(n + 2)[:, None]
        k = np.arange(1, self.N + 1)[None, :]
        w = np.full((n + 2, 1), self.h)
        w[0] = w[-1] = 0.5 * self.h
        mat = -SQRT2 * np.pi * k * np.cos(np.pi * j * k / (n + 1)) * w
        mat.setflags(write=False)
        return mat


def build_eigensystem(N: int, grid_size: int | None = None) -> EigenSystem:
    if N < 1:
        raise ValueError(f"N must be positive, got {N}")
    if grid_size is None:
        grid_size = 4 * N
    if grid_size < 2 * N:
        raise ValueError(
            f"grid_size={grid_size} < 2N={2 * N}: nonlinear terms would alias"
        )
    k = np.arange(1, N + 1, dtype=float)
    lambdas = (k * np.pi) ** 2
    lambdas.setflags(write=False)
    xi = np.arange(1, grid_size + 1, dtype=float) / (grid_size + 1)
    xi.setflags(write=False)
    return EigenSystem(N=N, grid_size=grid_size, lambdas=lambdas, grid_points=xi)


def _check_last(arr: np.ndarray, n: int, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.shape[-1:] != (n,):
        raise ValueError(f"{what}: expected last axis of length {n}, got shape {arr.shape}")
    return arr


def to_grid(x: np.ndarray, es: EigenSystem) -> np.ndarray:
    """Evaluate ``sum_k a_k e_k(xi_j)`` on the interior grid (DST-I)."""
    x = _check_last(x, es.N, "to_grid")
    if not es.use_fft:
        return x @ es._sine_matrix
    pad = [(0, 0)] * (x.ndim - 1) + [(0, es.grid_size - es.N)]
    return fft.dst(np.pad(x, pad), type=1, axis=-1) / SQRT2


def to_spectral(v: np.ndarray, es: EigenSystem) -> np.ndarray:
    """Trapezoid projection ``a_k = h sum_j v_j e_k(xi_j)`` for ``k <= N``."""
    v = _check_last(v, es.grid_size, "to_spectral")
    if not es.use_fft:
        return (v @ es._sine_matrix.T) * es.h
    return fft.dst(v, type=1, axis=-1)[..., : es.N] * (es.h / SQRT2)


def cosine_pairing(g: np.ndarray, g_left, g_right, es: EigenSystem) -> np.ndarray:
    """``-int_0^1 g(xi) d/dxi e_k(xi) dxi`` for ``k <= N`` by the trapezoid rule.

    ``g`` holds interior values; ``g_left``/``g_right`` are the values at
    ``xi = 0`` and ``xi = 1`` (scalars or arrays broadcastable to the batch).
    """
    g = _check_last(g, es.grid_size, "cosine_pairing")
    batch = g.shape[:-1]
    left = np.broadcast_to(np.asarray(g_left, dtype=float), batch)[..., None]
    right = np.broadcast_to(np.asarray(g_right, dtype=float), batch)[..., None]
    full = np.concatenate([left, g, right], axis=-1)
    if not es.use_fft:
        return full @ es._cosine_matrix
    # DCT-I gives x_0 + (-1)^k x_{n+1} + 2 sum_j x_j cos(pi k j / (n+1))
    cos_int = fft.dct(full, type=1, axis=-1)[..., 1 : es.N + 1] * (0.5 * es.h)
    return -SQRT2 * es.wavenumbers * cos_int


def derivative_grid(x: np.ndarray, es: EigenSystem) -> np.ndarray:
    """Grid values of ``d/dxi sum_k a_k e_k`` (cosine series), interior nodes only."""
    x = _check_last(x, es.N, "derivative_grid")
    coeffs = x * es.wavenumbers * SQRT2
    n = es.grid_size
    pad = [(0, 0)] * (x.ndim - 1) + [(1, n + 1 - es.N)]
    full = np.pad(coeffs, pad)
    # sum_k c_k cos(k pi xi_j) = (DCT-I(c) - c_0 - (-1)^j c_{n+1}) / 2 with c_0 = c_{n+1} = 0
    return 0.5 * fft.dct(full, type=1, axis=-1)[..., 1 : n + 1]


def norm_triple(x: np.ndarray, es: EigenSystem):
    """Return ``(|x|_H, |x|_V, |x|_{V*})`` along the last axis."""
    x = _check_last(x, es.N, "norm_triple")
    sq = x * x
    return (
        np.sqrt(sq.sum(axis=-1)),
        np.sqrt((es.lambdas * sq).sum(axis=-1)),
        np.sqrt((sq / es.lambdas).sum(axis=-1)),
    )


def inner_grid(u: np.ndarray, v: np.ndarray, es: EigenSystem) -> np.ndarray:
    """Trapezoid ``int_0^1 u v dxi`` for grid fields."""
    return es.h * np.sum(u * v, axis=-1)


def power_integral(v: np.ndarray, p: int, es: EigenSystem) -> np.ndarray:
    """``int_0^1 v^p dxi`` for even ``p`` (no root taken)."""
    if p < 2 or p % 2:
        raise ValueError(f"p must be an even integer >= 2, got {p}")
    v = _check_last(v, es.grid_size, "power_integral")
    v2 = v * v
    acc = v2
    for _ in range(p // 2 - 1):
        acc = acc * v2
    return es.h * np.sum(acc, axis=-1)


def norm_Lp(v: np.ndarray, p: int, es: EigenSystem) -> np.ndarray:
    return power_integral(v, p, es) ** (1.0 / p)


def apply_fractional(x: np.ndarray, delta: float, es: EigenSystem) -> np.ndarray:
    """Apply ``(-A)^delta``: ``a_k -> lambda_k^delta a_k``."""
    x = _check_last(x, es.N, "apply_fractional")
    return x * es.lambdas**delta
