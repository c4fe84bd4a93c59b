"""Spectral calculus on the periodic unit torus [0, 1)^d, d in {1, 2}.

Fourier convention: ``f(x) = sum_n fhat_n exp(2 pi i n.x)`` so that every
derivative, heat and Sobolev operator is a diagonal multiplier. Derivative
operators act on the resolved band ``|n_i| < M/2`` (the Nyquist mode is
dropped); the heat semigroup acts on the full table.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence, Union

import numpy as np

TWO_PI = 2.0 * np.pi


class BandwidthError(ValueError):
    """Raised when a mollification bandwidth cannot be resolved by the grid."""


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid with ``M`` points per axis on the unit torus."""

    d: int
    M: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if self.M < 8 or self.M & (self.M - 1):
            raise ValueError(f"points per axis must be a power of two >= 8, got {self.M}")

    @property
    def h(self) -> float:
        return 1.0 / self.M

    @property
    def shape(self) -> tuple:
        return (self.M,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @cached_property
    def axis(self) -> np.ndarray:
        return np.arange(self.M) * self.h

    @cached_property
    def nodes(self) -> tuple:
        """Node coordinates, one array of shape ``self.shape`` per axis."""
        return tuple(np.meshgrid(*([self.axis] * self.d), indexing="ij"))

    @cached_property
    def wavenumbers(self) -> tuple:
        """Integer wavenumbers broadcastable against the full FFT table."""
        n = np.fft.fftfreq(self.M, d=1.0 / self.M)
        out = []
        for i in range(self.d):
            shape = [1] * self.d
            shape[i] = self.M
            out.append(n.reshape(shape))
        return tuple(out)

    @cached_property
    def band(self) -> np.ndarray:
        """Boolean mask of the resolved band ``|n_i| < M/2``."""
        mask = np.ones(self.shape, dtype=bool)
        for n in self.wavenumbers:
            mask = mask & (np.abs(n) < self.M // 2)
        return mask

    @cached_property
    def norm_sq(self) -> np.ndarray:
        return sum(n.astype(float) ** 2 for n in self.wavenumbers) * np.ones(self.shape)

    def mean(self, values: np.ndarray) -> np.ndarray:
        """Exact grid quadrature of ``values`` over the trailing ``d`` axes."""
        axes = tuple(range(-self.d, 0))
        return values.mean(axis=axes)


class ScalarField:
    """Real function sampled on a :class:`TorusGrid`.

    Values are stored read-only; Fourier coefficients are computed lazily
    and cached.
    """

    __slots__ = ("grid", "values", "_coef")

    def __init__(self, grid: TorusGrid, values):
        values = np.array(values, dtype=float)
        if values.ndim == 0:
            values = np.full(grid.shape, float(values))
        if values.shape != grid.shape:
            raise ValueError(f"values of shape {values.shape} do not fit grid {grid.shape}")
        values.setflags(write=False)
        self.grid = grid
        self.values = values
        self._coef = None

    @classmethod
    def from_function(cls, grid: TorusGrid, func) -> "ScalarField":
        return cls(grid, func(*grid.nodes))

    @property
    def coefficients(self) -> np.ndarray:
        if self._coef is None:
            coef = np.fft.fftn(self.values) / self.values.size
            coef.setflags(write=False)
            self._coef = coef
        return self._coef

    def integral(self) -> float:
        return float(self.values.mean())

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    def __add__(self, other):
        return ScalarField(self.grid, self.values + _values(other))

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - _values(other))

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * _values(other))

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def __repr__(self):
        return f"ScalarField(d={self.grid.d}, M={self.grid.M})"

    def evaluate(self, points: np.ndarray, tol: float = 1e-14) -> np.ndarray:
        """Band-limited (trigonometric) interpolation at arbitrary points.

        ``points`` has shape ``(..., d)`` (or ``(...,)`` when d = 1).
        Coefficients below ``tol`` times the largest one are skipped.
        """
        return evaluate_coefficients(self.grid, self.coefficients, points, tol=tol)


def _values(x):
    return x.values if isinstance(x, ScalarField) else x


def evaluate_coefficients(grid: TorusGrid, coef: np.ndarray, points, tol: float = 1e-14):
    """Evaluate the real trigonometric polynomial with table ``coef`` at points.

    ``coef`` may carry leading axes (a stack of tables); the result then has
    those axes in front of the point axes.
    """
    pts = np.asarray(points, dtype=float)
    coef = np.asarray(coef)
    lead = coef.shape[: coef.ndim - grid.d]
    coef = np.where(grid.band, coef, 0.0)
    if grid.d == 1:
        if pts.ndim and pts.shape[-1:] == (1,):
            pts = pts[..., 0]
        return _evaluate_1d(coef.reshape((-1, grid.M)), pts, tol).reshape(lead + pts.shape)
    flat = pts.reshape(-1, 2)
    tables = coef.reshape((-1,) + grid.shape)
    out = np.zeros((tables.shape[0], flat.shape[0]))
    n1 = np.fft.fftfreq(grid.M, d=1.0 / grid.M).astype(int)
    for i, table in enumerate(tables):
        scale = np.abs(table).max()
        if scale == 0.0:
            continue
        keep = np.abs(table) > tol * scale
        rows = np.flatnonzero(keep.any(axis=1))
        cols = np.flatnonzero(keep.any(axis=0))
        e1 = np.exp(1j * TWO_PI * np.outer(flat[:, 0], n1[rows]))
        e2 = np.exp(1j * TWO_PI * np.outer(flat[:, 1], n1[cols]))
        out[i] = np.einsum("pk,kl,pl->p", e1, table[np.ix_(rows, cols)], e2).real
    return out.reshape(lead + pts.shape[:-1])


def _evaluate_1d(tables: np.ndarray, pts: np.ndarray, tol: float) -> np.ndarray:
    # c_0 + sum_n (a_n cos n th + b_n sin n th) by Clenshaw, real arithmetic only
    M = tables.shape[-1]
    pos = tables[:, : M // 2]
    scale = np.abs(pos).max()
    mean = pos[:, 0].real.reshape((-1,) + (1,) * pts.ndim)
    out = np.broadcast_to(mean, (tables.shape[0],) + pts.shape).copy()
    if scale == 0.0:
        return out
    nmax = _significant_order(np.abs(pos).max(axis=0), tol * scale)
    if nmax == 0:
        return out
    theta = TWO_PI * pts
    c, s = np.cos(theta), np.sin(theta)
    two_c = 2.0 * c
    for i, row in enumerate(pos):
        a = 2.0 * row.real
        b = -2.0 * row.imag
        ya1 = np.zeros(pts.shape)
        ya2 = np.zeros(pts.shape)
        yb1 = np.zeros(pts.shape)
        yb2 = np.zeros(pts.shape)
        for n in range(nmax, 0, -1):
            ya1, ya2 = a[n] + two_c * ya1 - ya2, ya1
            yb1, yb2 = b[n] + two_c * yb1 - yb2, yb1
        # sum a_n T_n(c) = c y1 - y2 (with y1 = a_1 + ...), sum b_n sin = s * U-series
        out[i] += c * ya1 - ya2 + s * yb1
    return out


def _significant_order(abs_coef: np.ndarray, cut: float) -> int:
    idx = np.flatnonzero(abs_coef > cut)
    return int(idx.max()) if idx.size else 0


def to_spectrum(f: ScalarField) -> np.ndarray:
    """Fourier coefficient table of ``f`` (FFT ordering, normalized by M^d)."""
    return f.coefficients.copy()


def from_spectrum(grid: TorusGrid, coef: np.ndarray) -> ScalarField:
    """Inverse of :func:`to_spectrum`; the imaginary round-off is discarded."""
    coef = np.asarray(coef)
    if coef.shape != grid.shape:
        raise ValueError("coefficient table does not match grid")
    return ScalarField(grid, np.fft.ifftn(coef * coef.size).real)


def gradient(f: ScalarField) -> list:
    grid = f.grid
    coef = np.where(grid.band, f.coefficients, 0.0)
    return [from_spectrum(grid, 1j * TWO_PI * n * coef) for n in grid.wavenumbers]


def divergence(components: Sequence[ScalarField]) -> ScalarField:
    grid = components[0].grid
    coef = sum(1j * TWO_PI * n * np.where(grid.band, c.coefficients, 0.0)
               for n, c in zip(grid.wavenumbers, components))
    return from_spectrum(grid, coef)


def laplacian(f: ScalarField) -> ScalarField:
    grid = f.grid
    coef = np.where(grid.band, f.coefficients, 0.0)
    return from_spectrum(grid, -(TWO_PI**2) * grid.norm_sq * coef)


def heat_multiplier(grid: TorusGrid, t: float) -> np.ndarray:
    """Fourier multiplier of ``P_t = exp(t Delta / 2)``."""
    return np.exp(-0.5 * TWO_PI**2 * grid.norm_sq * t)


def heat_propagate(f: ScalarField, t: float) -> ScalarField:
    """Apply the heat semigroup generated by ``Delta / 2`` for a duration ``t``."""
    if t < 0:
        raise ValueError(f"heat semigroup needs t >= 0, got {t}")
    if t == 0:
        return f
    return from_spectrum(f.grid, f.coefficients * heat_multiplier(f.grid, t))


# --------------------------------------------------------------------------
# Sobolev scales
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SobolevIndex:
    """Integer order ``k`` of the H^k inner product sum_{|j|<=k} int D^j f D^j g."""

    k: int

    def __post_init__(self):
        if self.k < 0 or int(self.k) != self.k:
            raise ValueError(f"Sobolev order must be a nonnegative integer, got {self.k}")

    @staticmethod
    def default(d: int) -> "SobolevIndex":
        """Smallest integer order above d/2 + 2."""
        return SobolevIndex(int(math.floor(d / 2 + 2)) + 1)

    def multiplier(self, *wavenumbers) -> np.ndarray:
        """``m_k(n) = sum_{|j| <= k} prod_i (2 pi n_i)^(2 j_i)``, broadcast over ``n``."""
        sq = [(TWO_PI * np.asarray(n, dtype=float)) ** 2 for n in wavenumbers]
        d = len(sq)
        if d == 1:
            # 1 + s + ... + s^k by Horner
            out = np.ones_like(sq[0])
            for _ in range(self.k):
                out = out * sq[0] + 1.0
            return out
        # complete homogeneous sums h_r(a, b) for r = 0..k
        a, b = np.broadcast_arrays(*sq)
        total = np.zeros(a.shape)
        for j1 in range(self.k + 1):
            pa = a**j1
            for j2 in range(self.k + 1 - j1):
                total = total + pa * b**j2
        return total

    def grid_multiplier(self, grid: TorusGrid) -> np.ndarray:
        return self.multiplier(*grid.wavenumbers) * np.ones(grid.shape)

    def tail_bound(self, grid: TorusGrid) -> float:
        """Upper bound on ``sum_{n outside band} 1 / m_k(n)``."""
        L = grid.M // 2
        k = self.k
        c = TWO_PI ** (-2 * k)
        if grid.d == 1:
            # m_k(n) >= (2 pi n)^(2k); sum_{|n| >= L} n^(-2k) <= 2 (L^-2k + L^(1-2k)/(2k-1))
            return 2.0 * c * (L ** (-2 * k) + L ** (1 - 2 * k) / (2 * k - 1))
        # m_k(n) >= (2 pi max|n_i|)^(2k); shell r has 8 r points
        return 8.0 * c * (L ** (1 - 2 * k) + L ** (2 - 2 * k) / (2 * k - 2))


def brute_force_multiplier(n: Sequence[int], k: int) -> float:
    """Literal multi-index enumeration of ``m_k(n)`` (slow reference)."""
    total = 0.0
    d = len(n)
    for j in itertools.product(range(k + 1), repeat=d):
        if sum(j) <= k:
            total += math.prod((TWO_PI * ni) ** (2 * ji) for ni, ji in zip(n, j))
    return total


def h_norm(f: ScalarField, k: SobolevIndex | int) -> float:
    k = _as_index(k)
    m = k.grid_multiplier(f.grid)
    return float(np.sqrt(np.sum(np.abs(f.coefficients) ** 2 * m)))


def h_inner(f: ScalarField, g: ScalarField, k: SobolevIndex | int) -> float:
    k = _as_index(k)
    m = k.grid_multiplier(f.grid)
    return float(np.sum((f.coefficients * np.conj(g.coefficients)).real * m))


# --------------------------------------------------------------------------
# Atomic measures and dual norms
# --------------------------------------------------------------------------

class AtomicMeasure:
    """Finite positive measure ``sum_i w_i delta_{x_i}`` of total mass one."""

    __slots__ = ("positions", "weights")

    def __init__(self, positions, weights):
        pos = np.atleast_1d(np.asarray(positions, dtype=float))
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.shape[0] != w.shape[0]:
            raise ValueError("positions and weights have different lengths")
        if np.any(w < 0):
            raise ValueError("atom weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"atom weights sum to {w.sum()!r}, expected 1")
        pos = np.mod(pos, 1.0)
        pos.setflags(write=False)
        w.setflags(write=False)
        self.positions = pos
        self.weights = w

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def __len__(self):
        return self.weights.shape[0]

    def coefficients(self, grid: TorusGrid) -> np.ndarray:
        """``sum_i w_i exp(-2 pi i n.x_i)`` on the resolved band, zero elsewhere."""
        if self.d != grid.d:
            raise ValueError("atom dimension does not match grid")
        half = grid.M // 2
        if grid.d == 1:
            n = np.arange(half)
            z = np.exp(-1j * TWO_PI * np.outer(self.positions[:, 0], n))
            pos = self.weights @ z
            coef = np.zeros(grid.M, dtype=complex)
            coef[:half] = pos
            coef[grid.M - half + 1:] = np.conj(pos[1:][::-1])
            return coef
        n = np.fft.fftfreq(grid.M, d=1.0 / grid.M)
        e1 = np.exp(-1j * TWO_PI * np.outer(self.positions[:, 0], n))
        e2 = np.exp(-1j * TWO_PI * np.outer(self.positions[:, 1], n))
        coef = np.einsum("p,pk,pl->kl", self.weights, e1, e2)
        return np.where(grid.band, coef, 0.0)


MeasureLike = Union[ScalarField, AtomicMeasure]


class DualNorm(NamedTuple):
    value: float
    tail_bound: float


def _measure_coefficients(q: MeasureLike, grid: TorusGrid) -> np.ndarray:
    if isinstance(q, AtomicMeasure):
        return q.coefficients(grid)
    if q.grid != grid:
        raise ValueError("fields live on different grids")
    return q.coefficients


def _as_index(k) -> SobolevIndex:
    return k if isinstance(k, SobolevIndex) else SobolevIndex(int(k))


def h_dual_norm_report(p: MeasureLike, q: MeasureLike | None = None,
                       k: SobolevIndex | int = 3, grid: TorusGrid | None = None) -> DualNorm:
    """H^{-k} norm of ``p - q`` with an upper bound on the unresolved tail.

    Densities are read as measures ``f(x) dx``. Atomic inputs are transformed
    exactly on the band ``|n_i| < M/2``; the tail bound covers the squared
    norm outside the band for differences of probability measures.
    """
    k = _as_index(k)
    if grid is None:
        grid = next((x.grid for x in (p, q) if isinstance(x, ScalarField)), None)
        if grid is None:
            raise ValueError("a grid is needed when both arguments are atomic")
    coef = _measure_coefficients(p, grid)
    if q is not None:
        coef = coef - _measure_coefficients(q, grid)
    m = k.grid_multiplier(grid)
    value = float(np.sqrt(np.sum(np.abs(coef) ** 2 / m)))
    atomic = any(isinstance(x, AtomicMeasure) for x in (p, q))
    tail = 4.0 * k.tail_bound(grid) if atomic else 0.0
    return DualNorm(value, tail)


def h_dual_norm(p: MeasureLike, q: MeasureLike | None = None,
                k: SobolevIndex | int = 3, grid: TorusGrid | None = None) -> float:
    return h_dual_norm_report(p, q, k, grid).value


def dual_norm_coefficients(coef: np.ndarray, grid: TorusGrid, k: SobolevIndex | int) -> np.ndarray:
    """H^{-k} norms of a stack of coefficient tables (leading axes kept)."""
    m = _as_index(k).grid_multiplier(grid)
    axes = tuple(range(-grid.d, 0))
    return np.sqrt(np.sum(np.abs(coef) ** 2 / m, axis=axes))


# --------------------------------------------------------------------------
# Mollification and the Cole-Hopf oracle
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Mollification:
    density: ScalarField
    hk_error: float
    tail_bound: float
    bandwidth: float


def default_bandwidth(grid: TorusGrid) -> float:
    return 4.0 * grid.h**2


def mollify_atoms(mu: AtomicMeasure, grid: TorusGrid, eps: float | None = None,
                  k: SobolevIndex | int | None = None) -> Mollification:
    """Smooth an atomic measure with the heat kernel at time ``eps``.

    The band-limited kernel may dip slightly below zero; the negative part is
    clipped and the result renormalized. If the clipped mass exceeds 1e-3 the
    bandwidth is rejected.
    """
    if eps is None:
        eps = default_bandwidth(grid)
    if eps <= 0:
        raise ValueError("bandwidth must be positive")
    k = SobolevIndex.default(grid.d) if k is None else _as_index(k)
    coef = mu.coefficients(grid) * heat_multiplier(grid, eps)
    values = np.fft.ifftn(coef * coef.size).real
    negative = -values[values < 0].sum() * grid.cell_volume
    if negative > 1e-3:
        raise BandwidthError(f"bandwidth below grid resolution (negative mass {negative:.3g})")
    values = np.clip(values, 0.0, None)
    values /= values.mean()
    density = ScalarField(grid, values)
    report = h_dual_norm_report(mu, density, k, grid)
    return Mollification(density, report.value, report.tail_bound, eps)


def cole_hopf_hjb(g: ScalarField, t: float, T: float) -> ScalarField:
    """``u_t = -log P_{T-t} exp(-g)``, the solution of
    ``-du/dt - Delta u / 2 + |grad u|^2 / 2 = 0`` with ``u_T = g``."""
    if t > T:
        raise ValueError("t must not exceed the horizon")
    if t == T:
        return g
    shift = g.values.min()
    w = ScalarField(g.grid, np.exp(-(g.values - shift)))
    return ScalarField(g.grid, shift - np.log(heat_propagate(w, T - t).values))
