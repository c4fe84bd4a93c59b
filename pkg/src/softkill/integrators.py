"""Exponential time differencing (ETDRK4) on real FFT tables.

The stiff linear part is diagonal in Fourier space and integrated exactly;
the remaining terms go through the fourth-order Cox-Matthews stages with
phi-functions evaluated by contour averaging (Kassam & Trefethen).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .torus import TWO_PI, TorusGrid


class RealSpectral:
    """Wavenumber tables in ``rfftn`` layout for a :class:`TorusGrid`."""

    def __init__(self, grid: TorusGrid):
        self.grid = grid
        M, d = grid.M, grid.d
        full = np.fft.fftfreq(M, d=1.0 / M)
        half = np.fft.rfftfreq(M, d=1.0 / M)
        axes = [full] * (d - 1) + [half]
        self.shape = tuple(len(a) for a in axes)
        self.n = []
        for i, a in enumerate(axes):
            shp = [1] * d
            shp[i] = len(a)
            self.n.append(a.reshape(shp))
        band = np.ones(self.shape, dtype=bool)
        for n in self.n:
            band = band & (np.abs(n) < M // 2)
        self.band = band
        self.norm_sq = sum(n**2 for n in self.n) * np.ones(self.shape)
        # derivative multipliers on the resolved band
        self.ik = [np.where(band, 1j * TWO_PI * n, 0.0) for n in self.n]
        self.axes = tuple(range(-d, 0))

    @property
    def half_laplacian(self) -> np.ndarray:
        return -0.5 * TWO_PI**2 * self.norm_sq

    def fwd(self, values: np.ndarray) -> np.ndarray:
        if self.grid.d == 1:
            return sfft.rfft(values)
        return sfft.rfftn(values, axes=self.axes)

    def inv(self, coef: np.ndarray) -> np.ndarray:
        if self.grid.d == 1:
            return sfft.irfft(coef, n=self.grid.M)
        return sfft.irfftn(coef, s=self.grid.shape, axes=self.axes)

    def grad(self, coef: np.ndarray) -> list:
        return [self.inv(ik * coef) for ik in self.ik]

    def div(self, components) -> np.ndarray:
        """Fourier table of the divergence of a vector field given on nodes."""
        return sum(ik * self.fwd(c) for ik, c in zip(self.ik, components))


@lru_cache(maxsize=64)
def _etd_coefficients(key: tuple, h: float, points: int = 32):
    L = np.frombuffer(key[0], dtype=float).reshape(key[1])
    hL = h * L
    r = np.exp(1j * np.pi * (np.arange(1, points + 1) - 0.5) / points)
    LR = hL[..., None] + r
    eLR = np.exp(LR)
    Q = h * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=-1))
    f1 = h * np.real(np.mean((-4 - LR + eLR * (4 - 3 * LR + LR**2)) / LR**3, axis=-1))
    f2 = h * np.real(np.mean((2 + LR + eLR * (-2 + LR)) / LR**3, axis=-1))
    f3 = h * np.real(np.mean((-4 - 3 * LR - LR**2 + eLR * (4 - LR)) / LR**3, axis=-1))
    return np.exp(hL), np.exp(hL / 2), Q, f1, f2, f3


class ETDRK4:
    """One-step map for ``dv/ds = L v + N(v, s)`` with diagonal ``L``.

    ``nonlinear(vhat, stage)`` returns the Fourier table of ``N``; ``stage``
    is 0, 1 or 2 for the start, midpoint and end of the step.
    """

    def __init__(self, L: np.ndarray, h: float):
        L = np.ascontiguousarray(L, dtype=float)
        self.h = h
        self.E, self.E2, self.Q, self.f1, self.f2, self.f3 = _etd_coefficients(
            (L.tobytes(), L.shape), float(h))

    def step(self, vhat: np.ndarray, nonlinear) -> np.ndarray:
        Nv = nonlinear(vhat, 0)
        a = self.E2 * vhat + self.Q * Nv
        Na = nonlinear(a, 1)
        b = self.E2 * vhat + self.Q * Na
        Nb = nonlinear(b, 1)
        c = self.E2 * a + self.Q * (2 * Nb - Nv)
        Nc = nonlinear(c, 2)
        return self.E * vhat + Nv * self.f1 + 2 * (Na + Nb) * self.f2 + Nc * self.f3


def midpoints(path: np.ndarray) -> np.ndarray:
    """Fourth-order values halfway between consecutive entries of ``path``.

    ``path`` has the time index first; the result has one entry fewer.
    """
    n = path.shape[0] - 1
    if n < 3:
        return 0.5 * (path[:-1] + path[1:])
    mid = np.empty((n,) + path.shape[1:])
    mid[1:-1] = (-path[:-3] + 9 * path[1:-2] + 9 * path[2:-1] - path[3:]) / 16
    mid[0] = (5 * path[0] + 15 * path[1] - 5 * path[2] + path[3]) / 16
    mid[-1] = (path[-4] - 5 * path[-3] + 15 * path[-2] + 5 * path[-1]) / 16
    return mid
