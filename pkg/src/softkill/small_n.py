"""Value function of the N-particle problem for N = 1 and N = 2.

For ``N = 1`` the weight is identically one and the value reduces to the
plain viscous HJB, solved by Cole-Hopf. For ``N = 2`` in one dimension the
weights depend on the clocks only through ``delta = a1 - a2``, so the
five-variable problem ``(t, x1, x2, a1, a2)`` collapses to a grid PDE in
``(t, x1, x2, delta)``:

    -dv/dt - (Delta_1 + Delta_2) v / 2 - (V(x1) - V(x2)) dv/ddelta
        + sum_i n_i |d_i v|^2 / 2 = 0,

with ``n1 = 1 + exp(delta)``, ``n2 = 1 + exp(-delta)``. The x-directions are
spectral with exact diffusion (ETDRK4), delta is first-order upwind with
clamped ends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .integrators import ETDRK4, RealSpectral
from .mean_field import AprioriBoundError, ProblemSpec, SolverError, mfc_picard_solve
from .particles import weight_norm, weights_from_a
from .torus import AtomicMeasure, ScalarField, TorusGrid, cole_hopf_hjb, mollify_atoms


class CFLError(ValueError):
    """The delta-advection step would exceed the upwind stability limit."""


# --------------------------------------------------------------------------
# N = 1
# --------------------------------------------------------------------------

@dataclass
class ValueTable1:
    times: np.ndarray
    values: np.ndarray
    grid: TorusGrid

    def at(self, j: int) -> ScalarField:
        return ScalarField(self.grid, self.values[j])


def solve_v1(spec: ProblemSpec) -> ValueTable1:
    """``v^1(t, x, a) = -log P_{T-t} exp(-g)(x)`` on the time mesh.

    With a single particle the weight ``1/n^1`` is one whatever the clock,
    so neither ``V`` nor ``a`` enters.
    """
    vals = np.stack([cole_hopf_hjb(spec.g, t, spec.T).values for t in spec.times])
    return ValueTable1(spec.times, vals, spec.grid)


def hjb_residual_v1(spec: ProblemSpec, table: ValueTable1, t: float) -> float:
    """Sup of ``-dv/dt - Delta v / 2 + |grad v|^2 / 2`` at node ``t``
    (centered difference in time, spectral in space)."""
    j = spec.node_index(t)
    if not 0 < j < spec.n_steps:
        raise ValueError("residual needs an interior time node")
    sp = RealSpectral(spec.grid)
    vhat = sp.fwd(table.values[j])
    lap = sp.inv(2 * sp.half_laplacian * np.where(sp.band, vhat, 0))
    grads = sp.grad(vhat)
    dvdt = (table.values[j + 1] - table.values[j - 1]) / (2 * spec.dt)
    res = -dvdt - 0.5 * lap + 0.5 * sum(gc * gc for gc in grads)
    return float(np.abs(res).max())


# --------------------------------------------------------------------------
# N = 2, reduced coordinates
# --------------------------------------------------------------------------

@dataclass
class ValueTable2:
    """Slices ``v(t, x1, x2, delta)`` stored with axes ``(delta, x1, x2)``."""

    grid: TorusGrid
    times: np.ndarray
    slices: dict
    delta: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    dt: float
    max_excess: float

    @property
    def delta_max(self) -> float:
        return float(self.delta[-1])

    def slice_at(self, t: float) -> np.ndarray:
        key = self._key(t)
        if key not in self.slices:
            raise KeyError(f"no stored slice at t={t}")
        return self.slices[key]

    def _key(self, t: float) -> int:
        j = (t - self.times[0]) / self.dt
        if abs(j - round(j)) > 1e-6:
            raise ValueError(f"time {t} is not a mesh node")
        return int(round(j))


def default_delta_max(spec: ProblemSpec, delta0: float = 2.0) -> float:
    """Smallest box half-width that characteristics from ``|delta| <= delta0``
    at ``t0`` cannot leave."""
    osc = float(spec.V.values.max() - spec.V.values.min())
    return delta0 + (spec.T - spec.t0) * osc


def _upwind_delta(v: np.ndarray, c: np.ndarray, h: float) -> np.ndarray:
    """``c dv/ddelta`` upwinded for ``dv/dtau = c dv/ddelta`` (delta on axis 0),
    clamped (zero-gradient) at both ends."""
    fwd = np.zeros_like(v)
    fwd[:-1] = (v[1:] - v[:-1]) / h
    bwd = np.zeros_like(v)
    bwd[1:] = (v[1:] - v[:-1]) / h
    return np.where(c > 0, c * fwd, c * bwd)


def _terminal2(g: np.ndarray, delta: np.ndarray) -> np.ndarray:
    p = 1.0 / (1.0 + np.exp(delta))
    return p[:, None, None] * g[None, :, None] + (1 - p)[:, None, None] * g[None, None, :]


def _delta_mesh(delta_max: float, M_delta: int):
    if M_delta < 3 or M_delta % 2 == 0:
        raise ValueError("M_delta must be odd and at least 3 so that delta = 0 is a node")
    delta = np.linspace(-delta_max, delta_max, M_delta)
    return delta, delta[1] - delta[0]


def solve_v2_reduced(spec: ProblemSpec, delta_max: float | None = None, M_delta: int = 65,
                     keep=None) -> ValueTable2:
    """March the reduced N = 2 HJB backward from ``T``.

    ``keep`` lists the mesh times whose slices are stored (default ``t0``,
    the mid-horizon node and ``T``). Raises :class:`CFLError` if
    ``dt max|V(x1) - V(x2)| / h_delta > 1``.
    """
    grid1 = spec.grid
    if grid1.d != 1:
        raise ValueError("the reduced N = 2 solver is one-dimensional")
    if delta_max is None:
        delta_max = default_delta_max(spec)
    delta, hd = _delta_mesh(delta_max, M_delta)
    Vv = spec.V.values
    c = (Vv[:, None] - Vv[None, :])[None]
    cfl = spec.dt * float(np.abs(c).max()) / hd
    if cfl > 1:
        raise CFLError(f"delta-advection CFL number {cfl:.3g} > 1; lower dt or raise M_delta")
    n = spec.n_steps
    if keep is None:
        keep = [spec.t0, spec.times[n // 2], spec.T]
    keep_idx = {spec.node_index(t) for t in keep}

    grid2 = TorusGrid(2, grid1.M)
    sp = RealSpectral(grid2)
    n1 = (1 + np.exp(delta))[:, None, None]
    n2 = (1 + np.exp(-delta))[:, None, None]

    def nonlinear(vh, stage):
        v = sp.inv(vh)
        d1, d2 = sp.grad(vh)
        term = _upwind_delta(v, c, hd) - 0.5 * (n1 * d1 * d1 + n2 * d2 * d2)
        return sp.fwd(term)

    v = _terminal2(spec.g.values, delta)
    gsup = spec.g.sup_norm()
    slices = {}
    if n in keep_idx:
        slices[n] = v.copy()
    stepper = ETDRK4(sp.half_laplacian, spec.dt)
    vh = sp.fwd(v)
    excess = float(np.abs(v).max() - gsup)
    for j in range(n - 1, -1, -1):
        vh = stepper.step(vh, nonlinear)
        v = sp.inv(vh)
        sup = float(np.abs(v).max())
        if not math.isfinite(sup):
            raise SolverError(f"N=2 solve produced non-finite values at t={spec.times[j]:.6g}")
        excess = max(excess, sup - gsup)
        if j in keep_idx:
            slices[j] = v.copy()
    if excess > 1e-6:
        raise AprioriBoundError(f"|v| exceeds |g|_inf by {excess:.3e}")
    return ValueTable2(grid1, spec.times, slices, delta, n1[:, 0, 0], n2[:, 0, 0], spec.dt, excess)


def hjb_residual_v2(spec: ProblemSpec, table: ValueTable2, t: float, interior: float = 0.5) -> float:
    """Sup of the discrete reduced-HJB residual at node ``t`` over
    ``|delta| <= interior * delta_max``.

    Needs the slices at ``t - dt``, ``t`` and ``t + dt``; the time derivative
    is a centered difference, the space operators are those of the solver.
    """
    j = table._key(t)
    try:
        lo, mid, hi = (table.slices[i] for i in (j - 1, j, j + 1))
    except KeyError:
        raise ValueError("store the neighbouring slices (keep=[t-dt, t, t+dt])") from None
    grid2 = TorusGrid(2, table.grid.M)
    sp = RealSpectral(grid2)
    Vv = spec.V.values
    c = (Vv[:, None] - Vv[None, :])[None]
    hd = table.delta[1] - table.delta[0]
    vh = sp.fwd(mid)
    lap = sp.inv(2 * sp.half_laplacian * np.where(sp.band, vh, 0))
    d1, d2 = sp.grad(vh)
    n1 = table.n1[:, None, None]
    n2 = table.n2[:, None, None]
    res = (-(hi - lo) / (2 * table.dt) - 0.5 * lap - _upwind_delta(mid, c, hd)
           + 0.5 * (n1 * d1 * d1 + n2 * d2 * d2))
    inside = np.abs(table.delta) <= interior * table.delta_max + 1e-12
    return float(np.abs(res[inside]).max())


def evaluate_vn(table, t: float, x, a) -> float:
    """``v^N(t, x, a)`` from a value table.

    For a :class:`ValueTable2` the lookup is multilinear in
    ``(x1, x2, delta)`` with ``delta = a1 - a2`` (exact at nodes); for a
    :class:`ValueTable1` it is linear in ``x``.
    """
    x = np.mod(np.atleast_1d(np.asarray(x, dtype=float)).ravel(), 1.0)
    a = np.atleast_1d(np.asarray(a, dtype=float)).ravel()
    if isinstance(table, ValueTable1):
        j = int(round((t - table.times[0]) / (table.times[1] - table.times[0])))
        return float(_periodic_linear(table.values[j], x[0]))
    if x.shape != (2,) or a.shape != (2,):
        raise ValueError("N = 2 needs two positions and two clocks")
    delta = a[0] - a[1]
    if abs(delta) > table.delta_max * (1 + 1e-12):
        raise ValueError(f"delta={delta:.6g} outside the table range +-{table.delta_max:.6g}")
    v = table.slice_at(t)
    M = table.grid.M
    hd = table.delta[1] - table.delta[0]
    s = (delta - table.delta[0]) / hd
    k0 = int(min(max(math.floor(s), 0), len(table.delta) - 2))
    wd = s - k0
    i0, w1 = _cell(x[0], M)
    l0, w2 = _cell(x[1], M)
    total = 0.0
    for dk, fk in ((0, 1 - wd), (1, wd)):
        if fk == 0.0:
            continue
        for di, fi in ((0, 1 - w1), (1, w1)):
            if fi == 0.0:
                continue
            for dl, fl in ((0, 1 - w2), (1, w2)):
                if fl == 0.0:
                    continue
                total += fk * fi * fl * v[k0 + dk, (i0 + di) % M, (l0 + dl) % M]
    return float(total)


def _cell(x: float, M: int):
    s = x * M
    i = int(math.floor(s))
    w = s - i
    if abs(w) < 1e-12:
        w = 0.0
    elif abs(w - 1) < 1e-12:
        i, w = i + 1, 0.0
    return i % M, w


def _periodic_linear(values: np.ndarray, x: float) -> float:
    i, w = _cell(x, values.shape[0])
    if w == 0.0:
        return values[i]
    return (1 - w) * values[i] + w * values[(i + 1) % values.shape[0]]


# --------------------------------------------------------------------------
# N = 2, unreduced coordinates (validation only)
# --------------------------------------------------------------------------

@dataclass
class ValueTable2Full:
    """``v(t0, x1, x2, a1, a2)`` with axes ``(a1, a2, x1, x2)``."""

    grid: TorusGrid
    a: np.ndarray
    values: np.ndarray


def solve_v2_unreduced(spec: ProblemSpec, a_min: float, a_max: float, M_a: int = 16) -> ValueTable2Full:
    """Same problem in the original clock coordinates ``(a1, a2)``.

    Used only to validate the delta-reduction. Clocks move up at speed
    ``V >= 0`` so the upwind differences look toward larger ``a``; the top
    edge is clamped.
    """
    grid1 = spec.grid
    if grid1.d != 1:
        raise ValueError("the N = 2 solver is one-dimensional")
    a = np.linspace(a_min, a_max, M_a)
    ha = a[1] - a[0]
    Vv = spec.V.values
    cfl = spec.dt * float(Vv.max()) / ha
    if cfl > 1:
        raise CFLError(f"clock-advection CFL number {cfl:.3g} > 1")
    grid2 = TorusGrid(2, grid1.M)
    sp = RealSpectral(grid2)
    A1 = a[:, None, None, None]
    A2 = a[None, :, None, None]
    w1 = weights_from_a(np.stack(np.broadcast_arrays(A1, A2), axis=-1))[..., 0]
    n1 = 1.0 / w1
    n2 = 1.0 / (1.0 - w1)
    V1 = Vv[:, None]
    V2 = Vv[None, :]

    def forward_diff(v, axis):
        out = np.zeros_like(v)
        lo = [slice(None)] * v.ndim
        hi = [slice(None)] * v.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        out[tuple(lo)] = (v[tuple(hi)] - v[tuple(lo)]) / ha
        return out

    def nonlinear(vh, stage):
        v = sp.inv(vh)
        d1, d2 = sp.grad(vh)
        term = (V1 * forward_diff(v, 0) + V2 * forward_diff(v, 1)
                - 0.5 * (n1 * d1 * d1 + n2 * d2 * d2))
        return sp.fwd(term)

    g = spec.g.values
    v = w1 * g[:, None] + (1 - w1) * g[None, :]
    stepper = ETDRK4(sp.half_laplacian, spec.dt)
    vh = sp.fwd(v)
    for _ in range(spec.n_steps):
        vh = stepper.step(vh, nonlinear)
    v = sp.inv(vh)
    if not np.all(np.isfinite(v)):
        raise SolverError("unreduced N=2 solve produced non-finite values")
    return ValueTable2Full(grid1, a, v)


def reduction_defect(spec: ProblemSpec, full: ValueTable2Full, reduced: ValueTable2) -> float:
    """Sup-norm gap at ``t0`` between the two solves on clock nodes whose
    characteristics stay inside the unreduced box."""
    reach = (spec.T - spec.t0) * float(spec.V.values.max())
    v_red = reduced.slice_at(spec.t0)
    hd = reduced.delta[1] - reduced.delta[0]
    worst = 0.0
    for i, a1 in enumerate(full.a):
        for l, a2 in enumerate(full.a):
            if max(a1, a2) + reach > full.a[-1] + 1e-12:
                continue
            s = (a1 - a2 - reduced.delta[0]) / hd
            k0 = int(min(max(math.floor(s), 0), len(reduced.delta) - 2))
            w = s - k0
            ref = (1 - w) * v_red[k0] + w * v_red[k0 + 1]
            worst = max(worst, float(np.abs(full.values[i, l] - ref).max()))
    return worst


# --------------------------------------------------------------------------
# Comparison with the limit value
# --------------------------------------------------------------------------

@dataclass
class GapRow:
    t: float
    x: tuple
    a: tuple
    v_n: float
    v_limit: float
    gap: float
    rhs: float
    ratio: float
    mollification_error: float


@dataclass
class GapTable:
    rows: list
    M: int
    dt: float

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r.ratio for r in self.rows])

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max())


def compare_to_limit(spec: ProblemSpec, samples, table=None, eps: float | None = None,
                     **picard) -> GapTable:
    """Gap ``|v^N(t,x,a) - V(t, mu^N_{x,a})|`` against ``sqrt(sum (1/n_i)^2)``.

    ``samples`` is a sequence of ``(t, x, a)`` with ``x`` and ``a`` of length
    ``N`` (1 or 2). The limit value is computed from the heat-mollified
    weighted empirical measure; its H^{-k} distance to the atoms is
    reported with every row.
    """
    samples = list(samples)
    Ns = {len(np.atleast_1d(s[1])) for s in samples}
    if not Ns <= {1, 2}:
        raise ValueError("compare_to_limit handles N = 1 and N = 2 only")
    if table is None:
        if Ns == {1}:
            table = solve_v1(spec)
        elif Ns == {2}:
            table = solve_v2_reduced(spec, keep=sorted({float(s[0]) for s in samples}))
        else:
            raise ValueError("mixing N = 1 and N = 2 needs an explicit table")
    rows = []
    for t, x, a in samples:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        a = np.atleast_1d(np.asarray(a, dtype=float))
        vn = evaluate_vn(table, t, x, a)
        w = weights_from_a(a)
        moll = mollify_atoms(AtomicMeasure(x, w / w.sum()), spec.grid, eps)
        sub = spec if t == spec.t0 else spec.restarted(t)
        sol = mfc_picard_solve(sub, moll.density, **picard)
        if not sol.converged:
            raise SolverError(f"picard did not converge at sample t={t}, x={x}, a={a}")
        rhs = float(weight_norm(a))
        gap = abs(vn - sol.value)
        rows.append(GapRow(float(t), tuple(x), tuple(a), vn, sol.value, gap, rhs, gap / rhs,
                           moll.hk_error))
    return GapTable(rows, spec.grid.M, spec.dt)


def random_samples(spec: ProblemSpec, count: int, seed: int, coarse_M: int,
                   delta_nodes: np.ndarray, delta0: float = 2.0, N: int = 2) -> list:
    """Random ``(t0, x, a)`` samples on coarse-grid nodes.

    Positions are multiples of ``1/coarse_M`` and clock differences are
    nodes of ``delta_nodes`` with ``|delta| <= delta0``, so the samples stay
    table nodes under refinement.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    allowed = delta_nodes[np.abs(delta_nodes) <= delta0 + 1e-12]
    out = []
    for _ in range(count):
        x = rng.integers(0, coarse_M, size=N) / coarse_M
        if N == 1:
            a = np.array([0.0])
        else:
            d = float(rng.choice(allowed))
            base = float(rng.normal())
            a = np.array([base + d, base])
        out.append((spec.t0, x, a))
    return out
