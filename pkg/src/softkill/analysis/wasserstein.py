"""First Wasserstein distance on the unit circle."""

from __future__ import annotations

import numpy as np

from ..torus import AtomicMeasure, ScalarField


def _as_atoms(mu):
    if isinstance(mu, AtomicMeasure):
        if mu.d != 1:
            raise ValueError("circle distance needs d = 1")
        return mu.positions[:, 0], mu.weights
    if isinstance(mu, ScalarField):
        if mu.grid.d != 1:
            raise ValueError("circle distance needs d = 1")
        w = mu.values * mu.grid.h
        return mu.grid.axis, w / w.sum()
    raise TypeError("expected a ScalarField density or an AtomicMeasure")


def wasserstein1_circle(mu, nu) -> float:
    """``d_1(mu, nu)`` on ``R / Z``.

    With ``D = F_mu - F_nu`` the cost is ``min_s int_0^1 |D(x) - s| dx``,
    attained at a length-weighted median of ``D``. Grid densities are read
    as atoms of mass ``mu_m h`` at the nodes.
    """
    xm, wm = _as_atoms(mu)
    xn, wn = _as_atoms(nu)
    x = np.concatenate([xm, xn])
    w = np.concatenate([wm, -wn])
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    D = np.cumsum(w)
    # D is constant on [x_i, x_{i+1}) and D_last on [x_last, 1) + [0, x_0)
    lengths = np.diff(np.append(x, x[0] + 1.0))
    srt = np.argsort(D, kind="stable")
    cum = np.cumsum(lengths[srt])
    s = D[srt][np.searchsorted(cum, 0.5 * cum[-1])]
    return float(np.sum(lengths * np.abs(D - s)))
