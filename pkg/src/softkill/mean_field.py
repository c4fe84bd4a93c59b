"""Limit control problem: nonlocal Fokker-Planck flow, backward HJB, Picard.

Every solver marches on the uniform mesh ``t_j = t0 + j dt`` with the
diffusion integrated exactly in Fourier space and the transport, killing
and nonlocal terms handled by ETDRK4 stages. Coefficients needed halfway
between mesh nodes come from fourth-order interpolation of the stored path.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .integrators import ETDRK4, RealSpectral, midpoints
from .torus import ScalarField, SobolevIndex, TorusGrid, dual_norm_coefficients

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A PDE solve left its region of validity."""


class NegativeDensityError(SolverError):
    pass


class AprioriBoundError(SolverError):
    pass


@dataclass(frozen=True)
class ProblemSpec:
    """Data of the limit problem: potential, terminal cost, horizon, mesh.

    ``R`` is the radius of the truncated Hamiltonian; ``math.inf`` means the
    plain quadratic Hamiltonian.
    """

    V: ScalarField
    g: ScalarField
    t0: float = 0.0
    T: float = 0.5
    dt: float = 1e-3
    R: float = math.inf

    def __post_init__(self):
        if self.V.grid != self.g.grid:
            raise ValueError("V and g live on different grids")
        if np.any(self.V.values < 0):
            raise ValueError("the killing potential V must be nonnegative")
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if not self.T > self.t0:
            raise ValueError("horizon must satisfy T > t0")
        if not self.R > 0:
            raise ValueError("truncation radius must be positive")
        n = (self.T - self.t0) / self.dt
        if abs(n - round(n)) > 1e-6 * max(1.0, n):
            raise ValueError(f"dt={self.dt} does not divide [t0, T]")

    @property
    def grid(self) -> TorusGrid:
        return self.V.grid

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.t0) / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def node_index(self, t: float) -> int:
        j = (t - self.t0) / self.dt
        if abs(j - round(j)) > 1e-6 or not -1e-9 <= j <= self.n_steps + 1e-9:
            raise ValueError(f"time {t} is not a mesh node")
        return int(round(j))

    def restarted(self, t_start: float) -> "ProblemSpec":
        """Same problem posed on ``[t_start, T]`` (``t_start`` must be a node)."""
        j = self.node_index(t_start)
        return dataclasses.replace(self, t0=float(self.times[j]))

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)


def default_radius(V: ScalarField, g: ScalarField, t0: float, T: float) -> float:
    """Generous over-estimate of the radius above which truncation is inactive."""
    from .torus import gradient

    grad = gradient(g)
    gnorm = g.sup_norm() + float(np.sqrt(sum(c.values**2 for c in grad)).max())
    return 4.0 * (1.0 + gnorm) * math.exp((T - t0) * V.sup_norm())


@dataclass
class MeasurePath:
    """Densities ``mu_t`` on the mesh; ``drift`` is the mass error before the
    per-step renormalization, ``clipped`` the negative mass removed."""

    grid: TorusGrid
    times: np.ndarray
    densities: np.ndarray
    drift: np.ndarray = field(default=None)
    clipped: float = 0.0

    def at(self, j: int) -> ScalarField:
        return ScalarField(self.grid, self.densities[j])

    def masses(self) -> np.ndarray:
        return self.grid.mean(self.densities)

    def pairing(self, f: np.ndarray) -> np.ndarray:
        """``<f_t; mu_t>`` for a static field or a path of fields."""
        return self.grid.mean(f * self.densities)


@dataclass
class AdjointPath:
    grid: TorusGrid
    times: np.ndarray
    values: np.ndarray
    apriori_bound: np.ndarray = field(default=None)
    grad_sup: float = float("nan")

    def at(self, j: int) -> ScalarField:
        return ScalarField(self.grid, self.values[j])


@dataclass
class MFCSolution:
    spec: ProblemSpec
    mu: MeasurePath
    u: AdjointPath
    alpha: np.ndarray
    value: float
    iterations: int
    residual: float
    converged: bool
    history: list
    damping: str = "fixed"

    @property
    def mu0(self) -> ScalarField:
        return self.mu.at(0)


# --------------------------------------------------------------------------
# Hamiltonian
# --------------------------------------------------------------------------

def hamiltonian_hr(p, R: float = math.inf):
    """Truncated Hamiltonian ``sup_{|a| <= R} {-a.p - |a|^2/2}`` and its maximizer.

    ``p`` has the vector components on its last axis.
    """
    p = np.asarray(p, dtype=float)
    norm = np.sqrt(np.sum(p**2, axis=-1))
    if math.isinf(R):
        return 0.5 * norm**2, -p
    inside = norm <= R
    value = np.where(inside, 0.5 * norm**2, R * norm - 0.5 * R**2)
    scale = np.where(inside, 1.0, R / np.where(inside, 1.0, norm))
    return value, -p * scale[..., None]


def _hamiltonian_grid(grads, R):
    sq = sum(gc * gc for gc in grads)
    if math.isinf(R):
        return 0.5 * sq
    norm = np.sqrt(sq)
    return np.where(norm <= R, 0.5 * sq, R * norm - 0.5 * R**2)


def _feedback_grid(grads, R):
    if math.isinf(R):
        return np.stack([-gc for gc in grads])
    norm = np.sqrt(sum(gc * gc for gc in grads))
    scale = np.minimum(1.0, R / np.maximum(norm, 1e-300))
    return np.stack([-gc * scale for gc in grads])


def feedback_from_adjoint(spec: ProblemSpec, u: AdjointPath, R: float | None = None) -> np.ndarray:
    """Optimal feedback ``-grad_p H^R(grad u_t)`` on the mesh, shape ``(n+1, d, *grid)``."""
    R = spec.R if R is None else R
    sp = RealSpectral(spec.grid)
    out = np.empty((u.values.shape[0], spec.grid.d) + spec.grid.shape)
    for j, uj in enumerate(u.values):
        out[j] = _feedback_grid(sp.grad(sp.fwd(uj)), R)
    return out


# --------------------------------------------------------------------------
# Forward Fokker-Planck
# --------------------------------------------------------------------------

def _check_density(grid: TorusGrid, mu0) -> np.ndarray:
    values = np.asarray(mu0.values if isinstance(mu0, ScalarField) else mu0, dtype=float)
    if values.shape != grid.shape:
        raise ValueError("initial density does not match the grid")
    if values.min() < -1e-10:
        raise ValueError("initial density must be nonnegative")
    mass = values.mean()
    if abs(mass - 1.0) > 1e-8:
        raise ValueError(f"initial density has mass {mass!r}, expected 1")
    return np.clip(values, 0.0, None) / np.clip(values, 0.0, None).mean()


def fp_forward_solve(spec: ProblemSpec, alpha, mu0) -> MeasurePath:
    """Solve ``d mu - Delta mu / 2 + div(alpha mu) + (V - <V; mu>) mu = 0``.

    ``alpha`` is ``None`` (no control) or an array ``(n+1, d, *grid)`` of
    node values. Negative values above -1e-6 are clipped; anything deeper
    raises :class:`NegativeDensityError`.
    """
    grid = spec.grid
    n = spec.n_steps
    sp = RealSpectral(grid)
    Vv = spec.V.values
    dens = np.empty((n + 1,) + grid.shape)
    dens[0] = _check_density(grid, mu0)
    drift = np.zeros(n)
    clipped = 0.0
    if alpha is None:
        stage_alpha = None
    else:
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape != (n + 1, grid.d) + grid.shape:
            raise ValueError(f"control has shape {alpha.shape}, expected {(n + 1, grid.d) + grid.shape}")
        a_mid = midpoints(alpha)
    stepper = ETDRK4(sp.half_laplacian, spec.dt)
    chat = sp.fwd(dens[0])
    for j in range(n):
        if alpha is not None:
            stage_alpha = (alpha[j], a_mid[j], alpha[j + 1])

        def nonlinear(ch, s):
            m = sp.inv(ch)
            vm = (Vv * m).mean()
            out = sp.fwd(-(Vv - vm) * m)
            if stage_alpha is not None:
                a = stage_alpha[s]
                out = out - sp.div([a[i] * m for i in range(grid.d)])
            return out

        chat = stepper.step(chat, nonlinear)
        vals = sp.inv(chat)
        mass = vals.mean()
        drift[j] = mass - 1.0
        low = vals.min()
        if low < -1e-6:
            raise NegativeDensityError(
                f"density reached {low:.3e} at t={spec.times[j + 1]:.6g}; refine the grid or time step")
        if low < 0:
            clipped += -vals[vals < 0].sum() * grid.cell_volume
            vals = np.clip(vals, 0.0, None)
        vals = vals / vals.mean()
        dens[j + 1] = vals
        chat = sp.fwd(vals)
    return MeasurePath(grid, spec.times, dens, drift, clipped)


# --------------------------------------------------------------------------
# Backward equations
# --------------------------------------------------------------------------

def _cumulative_from_end(values: np.ndarray, dt: float) -> np.ndarray:
    """``int_{t_j}^{T} f`` by the trapezoidal rule for each node ``j``."""
    seg = 0.5 * dt * (values[:-1] + values[1:])
    out = np.zeros_like(values)
    out[:-1] = np.cumsum(seg[::-1])[::-1]
    return out


def hjb_backward_solve(spec: ProblemSpec, mu: MeasurePath, R: float | None = None) -> AdjointPath:
    """Solve ``-du - Delta u / 2 + H^R(grad u) + (V - <V;mu>) u - V <u;mu> = 0``, ``u_T = g``.

    After the solve the a priori bound
    ``|u_t| <= exp((T - t) max V) |g|_inf`` is checked to 1e-6.
    """
    grid = spec.grid
    R = spec.R if R is None else R
    n = spec.n_steps
    sp = RealSpectral(grid)
    Vv = spec.V.values
    dens = mu.densities
    if dens.shape[0] != n + 1:
        raise ValueError("measure path does not match the time mesh")
    mids = midpoints(dens)
    vm_node = grid.mean(Vv * dens)
    vm_mid = grid.mean(Vv * mids)
    gsup = spec.g.sup_norm()
    ode_bound = np.exp(_cumulative_from_end(vm_node, spec.dt)) * gsup
    crude_bound = np.exp((spec.T - spec.times) * spec.V.sup_norm()) * gsup
    u = np.empty((n + 1,) + grid.shape)
    u[n] = spec.g.values
    uhat = sp.fwd(u[n])
    stepper = ETDRK4(sp.half_laplacian, spec.dt)
    grad_sup = 0.0
    for j in range(n - 1, -1, -1):
        stage_mu = (dens[j + 1], mids[j], dens[j])
        stage_vm = (vm_node[j + 1], vm_mid[j], vm_node[j])

        def nonlinear(ch, s):
            vals = sp.inv(ch)
            grads = sp.grad(ch)
            pair = (vals * stage_mu[s]).mean()
            term = -_hamiltonian_grid(grads, R) - (Vv - stage_vm[s]) * vals + Vv * pair
            return sp.fwd(term)

        uhat = stepper.step(uhat, nonlinear)
        u[j] = sp.inv(uhat)
        sup = np.abs(u[j]).max()
        if not np.isfinite(sup) or sup > 10 * crude_bound[j] + 1e-6:
            raise SolverError(f"HJB solution blew up at t={spec.times[j]:.6g} (|u|={sup:.3e})")
    for j in range(n + 1):
        gr = sp.grad(sp.fwd(u[j]))
        grad_sup = max(grad_sup, float(np.sqrt(sum(c * c for c in gr)).max()))
    sups = np.abs(u).reshape(n + 1, -1).max(axis=1)
    excess = sups - crude_bound
    if excess.max() > 1e-6:
        j = int(excess.argmax())
        raise AprioriBoundError(
            f"|u| = {sups[j]:.8g} exceeds exp((T-t) max V)|g| = {crude_bound[j]:.8g} at t={spec.times[j]:.6g}")
    return AdjointPath(grid, spec.times, u, ode_bound, grad_sup)


def linearized_backward_solve(spec: ProblemSpec, mu: MeasurePath, alpha, phi, t1: float) -> np.ndarray:
    """Solve the linear backward equation
    ``-dphi - Delta phi / 2 - alpha.grad phi + (V - <V;mu>) phi - V <phi;mu> = 0``
    from ``phi_{t1} = phi`` down to ``t0``. Returns node values ``(j1+1, *grid)``.
    """
    grid = spec.grid
    j1 = spec.node_index(t1)
    sp = RealSpectral(grid)
    Vv = spec.V.values
    dens = mu.densities
    mids = midpoints(dens)
    vm_node = grid.mean(Vv * dens)
    vm_mid = grid.mean(Vv * mids)
    if alpha is None:
        alpha = np.zeros((spec.n_steps + 1, grid.d) + grid.shape)
    alpha = np.asarray(alpha, dtype=float)
    a_mid = midpoints(alpha)
    phi0 = phi.values if isinstance(phi, ScalarField) else np.asarray(phi, dtype=float)
    out = np.empty((j1 + 1,) + grid.shape)
    out[j1] = phi0
    ch = sp.fwd(phi0)
    stepper = ETDRK4(sp.half_laplacian, spec.dt)
    for j in range(j1 - 1, -1, -1):
        st_mu = (dens[j + 1], mids[j], dens[j])
        st_vm = (vm_node[j + 1], vm_mid[j], vm_node[j])
        st_a = (alpha[j + 1], a_mid[j], alpha[j])

        def nonlinear(c, s):
            vals = sp.inv(c)
            grads = sp.grad(c)
            a = st_a[s]
            adv = sum(a[i] * grads[i] for i in range(grid.d))
            term = adv - (Vv - st_vm[s]) * vals + Vv * (vals * st_mu[s]).mean()
            return sp.fwd(term)

        ch = stepper.step(ch, nonlinear)
        out[j] = sp.inv(ch)
        if not np.all(np.isfinite(out[j])):
            raise SolverError("linearized backward solve produced non-finite values")
    return out


# --------------------------------------------------------------------------
# Cost, Picard iteration, diagnostics
# --------------------------------------------------------------------------

def running_cost_density(mu: MeasurePath, alpha: np.ndarray) -> np.ndarray:
    """``int |alpha_t|^2 / 2 d mu_t`` at each node."""
    kinetic = 0.5 * np.sum(alpha**2, axis=1)
    return mu.grid.mean(kinetic * mu.densities)


def time_integral(values: np.ndarray, dt: float) -> float:
    """Composite Simpson rule on a uniform mesh (trapezoid for a single step)."""
    if values.shape[0] < 3:
        return float(np.trapezoid(values, dx=dt))
    return float(simpson(values, dx=dt))


def cost_functional(mu: MeasurePath, alpha, g: ScalarField) -> float:
    """Objective ``int int |alpha|^2 / 2 dmu dt + int g dmu_T``: Simpson in time,
    exact grid quadrature in space."""
    dt = float(mu.times[1] - mu.times[0])
    if alpha is None:
        running = 0.0
    else:
        running = time_integral(running_cost_density(mu, np.asarray(alpha)), dt)
    return running + float(np.mean(g.values * mu.densities[-1]))


def _dual_sup(grid: TorusGrid, diff: np.ndarray, k: SobolevIndex) -> float:
    axes = tuple(range(-grid.d, 0))
    coef = np.fft.fftn(diff, axes=axes) / grid.M**grid.d
    return float(dual_norm_coefficients(coef, grid, k).max())


def mfc_picard_solve(spec: ProblemSpec, mu0, tol: float = 1e-7, max_iter: int = 500,
                     theta: float = 0.5, k: SobolevIndex | int | None = None,
                     initial: MeasurePath | None = None) -> MFCSolution:
    """Damped fixed-point iteration for the coupled optimality system.

    Each sweep solves the HJB against the current flow, forms the feedback,
    solves the Fokker-Planck equation and blends
    ``mu <- (1 - theta) mu + theta mu_new``. If the residual grows after the
    third sweep ``theta`` is halved (never below ``1/(m+1)``).

    The returned flow is the Fokker-Planck solution for the returned
    feedback, so ``value`` equals their cost exactly. A solve that misses
    ``tol`` after ``max_iter`` sweeps comes back with ``converged=False``.
    """
    grid = spec.grid
    k = SobolevIndex.default(grid.d) if k is None else (k if isinstance(k, SobolevIndex) else SobolevIndex(k))
    mu = initial if initial is not None else fp_forward_solve(spec, None, mu0)
    u_prev = None
    history = []
    damping = "fixed"
    best = None
    for m in range(1, max_iter + 1):
        u = hjb_backward_solve(spec, mu)
        alpha = feedback_from_adjoint(spec, u)
        mu_new = fp_forward_solve(spec, alpha, mu0)
        du = 0.0 if u_prev is None else float(np.abs(u.values - u_prev.values).max())
        dmu = theta * _dual_sup(grid, mu_new.densities - mu.densities, k)
        res = du + dmu if u_prev is not None else math.inf
        history.append(res)
        if best is None or res <= best[0]:
            best = (res, u, alpha, mu_new, m)
        if res < tol:
            break
        if m > 3 and len(history) > 1 and res > history[-2]:
            new_theta = max(theta / 2, 1.0 / (m + 1))
            if new_theta < theta:
                damping = "adaptive"
                logger.debug("picard residual grew (%.3e); damping %.3g -> %.3g", res, theta, new_theta)
                theta = new_theta
        blended = (1 - theta) * mu.densities + theta * mu_new.densities
        mu = MeasurePath(grid, spec.times, blended, mu_new.drift, mu_new.clipped)
        u_prev = u
    res, u, alpha, mu_out, m_best = best
    converged = res < tol
    if not converged:
        logger.warning("picard stopped after %d sweeps with residual %.3e", len(history), res)
    value = cost_functional(mu_out, alpha, spec.g)
    return MFCSolution(spec, mu_out, u, alpha, value, len(history), res, converged, history, damping)


def value_function(spec: ProblemSpec, mu0, **picard) -> float:
    sol = mfc_picard_solve(spec, mu0, **picard)
    if not sol.converged:
        raise SolverError(f"picard did not converge (residual {sol.residual:.3e})")
    return sol.value


def duality_value_identity(sol: MFCSolution) -> float:
    """``|value - (<u_t0; mu_0> - int <V;mu_t><u_t;mu_t> dt)|``."""
    mu, u, spec = sol.mu, sol.u, sol.spec
    vm = mu.pairing(spec.V.values)
    um = mu.pairing(u.values)
    rhs = float(um[0] - time_integral(vm * um, spec.dt))
    return abs(sol.value - rhs)


@dataclass(frozen=True)
class DPPResult:
    defect: float
    relative: float
    value: float
    running: float
    restarted_value: float


def dpp_check(spec: ProblemSpec, mu0, t1: float, solution: MFCSolution | None = None,
              **picard) -> DPPResult:
    """Compare the value with running cost up to ``t1`` plus the value restarted at ``t1``."""
    sol = solution if solution is not None else mfc_picard_solve(spec, mu0, **picard)
    if not sol.converged:
        raise SolverError(f"picard did not converge (residual {sol.residual:.3e})")
    j1 = spec.node_index(t1)
    if j1 == 0:
        return DPPResult(0.0, 0.0, sol.value, 0.0, sol.value)
    run = running_cost_density(sol.mu, sol.alpha)
    running = time_integral(run[: j1 + 1], spec.dt)
    if j1 == spec.n_steps:
        rest = float(np.mean(spec.g.values * sol.mu.densities[-1]))
    else:
        restart = mfc_picard_solve(spec.restarted(t1), sol.mu.densities[j1], **picard)
        if not restart.converged:
            raise SolverError(f"restarted picard did not converge (residual {restart.residual:.3e})")
        rest = restart.value
    defect = abs(sol.value - (running + rest))
    return DPPResult(defect, defect / max(abs(sol.value), 1e-300), sol.value, running, rest)


def radius_stability(spec: ProblemSpec, mu: MeasurePath, u: AdjointPath | None = None) -> float:
    """Sup-norm change of the HJB solution when ``R`` is raised from
    ``2 sup |grad u|`` to infinity."""
    if u is None:
        u = hjb_backward_solve(spec, mu, R=math.inf)
    R = 2.0 * u.grad_sup
    uR = hjb_backward_solve(spec, mu, R=R)
    return float(np.abs(uR.values - u.values).max())
