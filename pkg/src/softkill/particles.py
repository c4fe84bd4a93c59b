"""N-particle system with exponential (soft-killing) weights.

Particle ``i`` carries a position ``x_i`` on the torus and a killing clock
``a_i``; its weight is ``1/n_i[a] = exp(-a_i) / sum_j exp(-a_j)``. Weights are
never stored, only recomputed from the clocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .mean_field import ProblemSpec, fp_forward_solve
from .torus import AtomicMeasure, ScalarField, SobolevIndex, TorusGrid, evaluate_coefficients, h_dual_norm


class WeightBoundError(RuntimeError):
    """A particle weight grew faster than the potential allows."""


def weights_from_a(a) -> np.ndarray:
    """``1/n_i[a]`` along the last axis, computed with log-sum-exp."""
    a = np.asarray(a, dtype=float)
    # shift by the smallest clock so the largest exponent is exactly 0
    e = np.exp(-(a - a.min(axis=-1, keepdims=True)))
    return e / e.sum(axis=-1, keepdims=True)


def n_from_a(a) -> np.ndarray:
    """``n_i[a] = exp(a_i) sum_j exp(-a_j)``."""
    a = np.asarray(a, dtype=float)
    return np.exp(a + logsumexp(-a, axis=-1, keepdims=True))


def weight_norm(a) -> np.ndarray:
    """``sqrt(sum_i (1/n_i[a])^2)``, the right-hand side of the rate bound."""
    w = weights_from_a(a)
    return np.sqrt(np.sum(w**2, axis=-1))


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    clocks: np.ndarray
    time: float = 0.0
    rng: np.random.Generator = field(default=None, repr=False, compare=False)
    stream: tuple = ()

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        clocks = np.asarray(self.clocks, dtype=float)
        if clocks.shape != (pos.shape[0],):
            raise ValueError("need one clock per particle")
        object.__setattr__(self, "positions", np.mod(pos, 1.0))
        object.__setattr__(self, "clocks", clocks)

    @classmethod
    def create(cls, positions, clocks=None, seed: int = 0, stream: tuple = (), time: float = 0.0):
        pos = np.atleast_1d(np.asarray(positions, dtype=float))
        n = pos.shape[0]
        clocks = np.zeros(n) if clocks is None else clocks
        rng = np.random.default_rng(np.random.SeedSequence([seed, *stream]))
        return cls(pos, clocks, time, rng, (seed, *stream))

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return weights_from_a(self.clocks)


def empirical_measure(ensemble: ParticleEnsemble) -> AtomicMeasure:
    w = ensemble.weights
    # log-sum-exp output can be off by an ulp or two; AtomicMeasure wants 1e-12
    return AtomicMeasure(ensemble.positions, w / w.sum())


def _eval_potential(V, x):
    if isinstance(V, ScalarField):
        return V.evaluate(x)
    if callable(V):
        return np.asarray(V(x), dtype=float)
    return np.full(np.shape(x)[:-1] if np.ndim(x) > 1 else np.shape(x), float(V))


def hamiltonian_n(x, a, p, q, V) -> float:
    """``-sum_i V(x_i) q_i + sum_i n_i[a] |p_i|^2 / 2``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    p = np.asarray(p, dtype=float).reshape(x.shape)
    q = np.asarray(q, dtype=float)
    vals = _eval_potential(V, x)
    return float(-np.sum(vals * q) + 0.5 * np.sum(n_from_a(a) * np.sum(p**2, axis=-1)))


# --------------------------------------------------------------------------
# Feedback laws
# --------------------------------------------------------------------------

class ZeroFeedback:
    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def grid_path(self, spec: ProblemSpec):
        return None


@dataclass(frozen=True)
class ConstantFeedback:
    value: tuple

    def __call__(self, t, x):
        return np.broadcast_to(np.asarray(self.value, dtype=float), x.shape).copy()

    def grid_path(self, spec: ProblemSpec):
        grid = spec.grid
        vec = np.asarray(self.value, dtype=float).reshape((1, grid.d) + (1,) * grid.d)
        return np.broadcast_to(vec, (spec.n_steps + 1, grid.d) + grid.shape).copy()


class FieldFeedback:
    """Vector field known on grid nodes at a list of times.

    Evaluation is linear in time between stored times and band-limited in
    space. A single stored time means a time-independent field.
    """

    def __init__(self, grid: TorusGrid, times, values):
        values = np.asarray(values, dtype=float)
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if values.shape != (times.size, grid.d) + grid.shape:
            raise ValueError("feedback values do not match times and grid")
        self.grid = grid
        self.times = times
        self.values = values
        axes = tuple(range(-grid.d, 0))
        self.coefficients = np.fft.fftn(values, axes=axes) / grid.M**grid.d

    @classmethod
    def from_solution(cls, sol) -> "FieldFeedback":
        return cls(sol.spec.grid, sol.spec.times, sol.alpha)

    @classmethod
    def static(cls, components) -> "FieldFeedback":
        grid = components[0].grid
        vals = np.stack([c.values for c in components])[None]
        return cls(grid, [0.0], vals)

    def coefficients_at(self, t):
        if self.times.size == 1:
            return self.coefficients[0]
        j = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2))
        lam = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        lam = min(max(lam, 0.0), 1.0)
        return (1 - lam) * self.coefficients[j] + lam * self.coefficients[j + 1]

    def __call__(self, t, x):
        pts = x if self.grid.d == 2 else x[..., 0]
        return np.moveaxis(evaluate_coefficients(self.grid, self.coefficients_at(t), pts), 0, -1)

    def grid_path(self, spec: ProblemSpec) -> np.ndarray:
        if spec.grid != self.grid:
            raise ValueError("feedback grid differs from problem grid")
        if self.times.size == 1:
            return np.broadcast_to(self.values, (spec.n_steps + 1,) + self.values.shape[1:]).copy()
        out = np.empty((spec.n_steps + 1, self.grid.d) + self.grid.shape)
        for j, t in enumerate(spec.times):
            i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2))
            lam = min(max((t - self.times[i]) / (self.times[i + 1] - self.times[i]), 0.0), 1.0)
            out[j] = (1 - lam) * self.values[i] + lam * self.values[i + 1]
        return out


# --------------------------------------------------------------------------
# Dynamics
# --------------------------------------------------------------------------

def euler_maruyama_step(ensemble: ParticleEnsemble, feedback, dt: float, V) -> ParticleEnsemble:
    """One step of ``dX = alpha dt + dB``, ``dA = V(X) dt`` (V at the pre-move position)."""
    if dt <= 0:
        raise ValueError("time step must be positive")
    x = ensemble.positions
    alpha = feedback(ensemble.time, x)
    noise = ensemble.rng.standard_normal(x.shape)
    clocks = ensemble.clocks + _eval_potential(V, x) * dt
    new_x = np.mod(x + alpha * dt + math.sqrt(dt) * noise, 1.0)
    return replace(ensemble, positions=new_x, clocks=clocks, time=ensemble.time + dt)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    replications: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("simulation time step must be positive")
        if self.replications < 1:
            raise ValueError("need at least one replication")


@dataclass(frozen=True)
class InitialLaw:
    """Draw ``N`` positions iid from a density, all clocks equal to ``a0``."""

    density: ScalarField
    N: int
    a0: np.ndarray | None = None

    def clocks(self) -> np.ndarray:
        return np.zeros(self.N) if self.a0 is None else np.asarray(self.a0, dtype=float)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return sample_density(self.density, self.N, rng)


def sample_density(density: ScalarField, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampling from the trigonometric interpolant of a grid density."""
    grid = density.grid
    vals = density.values
    if np.allclose(vals, vals.flat[0], rtol=0, atol=1e-14):
        return rng.random((n, grid.d))
    top = 1.05 * vals.max()
    out = np.empty((0, grid.d))
    while out.shape[0] < n:
        m = max(2 * (n - out.shape[0]), 64)
        prop = rng.random((m, grid.d))
        f = density.evaluate(prop if grid.d == 2 else prop[:, 0])
        keep = rng.random(m) * top < f
        out = np.concatenate([out, prop[keep]])
    return out[:n]


@dataclass
class CostEstimate:
    mean: float
    se: float
    replications: int
    samples: np.ndarray = field(repr=False, default=None)


def replication_rng(seed: int, rep: int, tag: int = 0) -> np.random.Generator:
    """Independent stream for one replication, derived from the base seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, tag, rep]))


def _drift_and_potential(spec: ProblemSpec, feedback, t: float, x: np.ndarray):
    """Feedback and ``V`` at the particles; one pass when both are grid fields."""
    grid = spec.grid
    pts = x if grid.d == 2 else x[:, 0]
    if isinstance(feedback, FieldFeedback) and feedback.grid == grid:
        tables = np.concatenate([feedback.coefficients_at(t), spec.V.coefficients[None]])
        vals = evaluate_coefficients(grid, tables, pts)
        return np.moveaxis(vals[:-1], 0, -1), vals[-1]
    return feedback(t, x), spec.V.evaluate(pts)


def _simulate_batch(spec: ProblemSpec, x0: np.ndarray, a0: np.ndarray, feedback, dt: float,
                    rngs, record_cost: bool = True):
    """March ``R`` independent ensembles together; ``x0`` is ``(R, N, d)``."""
    n_steps = int(round((spec.T - spec.t0) / dt))
    if abs(n_steps * dt - (spec.T - spec.t0)) > 1e-9:
        raise ValueError("simulation step does not divide the horizon")
    R, N, d = x0.shape
    x = x0.copy()
    a = np.broadcast_to(a0, (R, N)).astype(float).copy()
    w0 = weights_from_a(a)
    vmax = float(spec.V.values.max())
    running = np.zeros(R)
    t = spec.t0
    flat = (R * N, d)
    for step in range(n_steps):
        w = weights_from_a(a)
        # weights can grow at most by exp(elapsed * max V)
        if np.any(w > w0 * math.exp((t - spec.t0) * vmax) * (1 + 1e-10) + 1e-300):
            raise WeightBoundError(f"weight bound violated at t={t:.6g}")
        alpha, vx = _drift_and_potential(spec, feedback, t, x.reshape(flat))
        alpha = alpha.reshape(R, N, d)
        vx = vx.reshape(R, N)
        if record_cost:
            running += dt * np.sum(w * 0.5 * np.sum(alpha**2, axis=-1), axis=-1)
        noise = np.stack([rng.standard_normal((N, d)) for rng in rngs])
        a += vx * dt
        x = np.mod(x + alpha * dt + math.sqrt(dt) * noise, 1.0)
        t = spec.t0 + (step + 1) * dt
    return x, a, running


def simulate_cost_jn(spec: ProblemSpec, initial, feedback, config: SimConfig) -> CostEstimate:
    """Monte Carlo estimate of ``J^N`` under a feedback law.

    ``initial`` is a :class:`ParticleEnsemble` (fixed start for every
    replication) or an :class:`InitialLaw` (fresh iid positions for each).
    """
    rngs = [replication_rng(config.seed, r) for r in range(config.replications)]
    if isinstance(initial, ParticleEnsemble):
        x0 = np.broadcast_to(initial.positions, (config.replications,) + initial.positions.shape).copy()
        a0 = initial.clocks
    else:
        x0 = np.stack([initial.sample(rng) for rng in rngs])
        a0 = initial.clocks()
    x, a, running = _simulate_batch(spec, x0, a0, feedback, config.dt, rngs)
    R, N, d = x.shape
    w = weights_from_a(a)
    gx = spec.g.evaluate(x.reshape(R * N, d) if d == 2 else x.reshape(-1)).reshape(R, N)
    samples = running + np.sum(w * gx, axis=-1)
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(R)) if R > 1 else float("nan")
    return CostEstimate(mean, se, R, samples)


def weighted_endpoint(spec: ProblemSpec, feedback, mu0: ScalarField, N: int, seed: int,
                      dt: float = 1e-3, a0=None) -> AtomicMeasure:
    """Self-normalized weighted empirical measure of ``N`` particles at ``T``."""
    rng = replication_rng(seed, 0, tag=1)
    x0 = sample_density(mu0, N, rng)[None]
    a0 = np.zeros(N) if a0 is None else np.asarray(a0, dtype=float)
    x, a, _ = _simulate_batch(spec, x0, a0, feedback, dt, [rng], record_cost=False)
    w = weights_from_a(a[0])
    return AtomicMeasure(x[0], w / w.sum())


def representation_check(spec: ProblemSpec, feedback, mu0: ScalarField, N: int, seed: int,
                         dt: float = 1e-3, k: SobolevIndex | int | None = None,
                         pde_density: ScalarField | None = None) -> float:
    """H^{-k} distance at ``T`` between the weighted particle cloud and the
    Fokker-Planck density driven by the same feedback."""
    k = SobolevIndex.default(spec.grid.d) if k is None else k
    if pde_density is None:
        path = fp_forward_solve(spec, feedback.grid_path(spec), mu0)
        pde_density = path.at(spec.n_steps)
    cloud = weighted_endpoint(spec, feedback, mu0, N, seed, dt)
    return h_dual_norm(cloud, pde_density, k)
