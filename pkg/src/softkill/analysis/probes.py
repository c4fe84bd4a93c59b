"""Empirical regularity constants of the limit value.

None of the constants has a known size; each probe reports a maximum
ratio together with the resolution at which it was measured, and the
acceptance checks only ask for finiteness and stability under refinement.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..mean_field import (SolverError, dpp_check, duality_value_identity,
                          fp_forward_solve, mfc_picard_solve)
from ..torus import ScalarField, SobolevIndex, TorusGrid, cole_hopf_hjb, dual_norm_coefficients, h_dual_norm
from .config import ExperimentConfig
from .wasserstein import wasserstein1_circle


@dataclass
class ProbeReport:
    lipschitz: float
    semiconcavity: float
    semiconcavity_min: float
    fp_stability: float
    time_lipschitz: float
    holder: float
    dpp_defect: float
    duality_defect: float
    M: int
    dt: float
    k: int
    scale: float
    pairs: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def random_perturbation(grid: TorusGrid, rng: np.random.Generator, modes: int = 8) -> np.ndarray:
    """Zero-mean field from the lowest ``modes`` Fourier modes with Gaussian
    coefficients, scaled to unit sup norm."""
    out = np.zeros(grid.shape)
    for axis in grid.nodes:
        c = rng.standard_normal((modes, 2))
        for n in range(1, modes + 1):
            out = out + c[n - 1, 0] * np.cos(2 * np.pi * n * axis) + c[n - 1, 1] * np.sin(2 * np.pi * n * axis)
    return out / np.abs(out).max()


def perturbed_density(base: ScalarField, eta: np.ndarray, scale: float) -> ScalarField:
    vals = np.clip(base.values + scale * eta, 0.0, None)
    return ScalarField(base.grid, vals / vals.mean())


def _solve(spec, mu, opts):
    sol = mfc_picard_solve(spec, mu, **opts)
    if not sol.converged:
        raise SolverError(f"picard did not converge (residual {sol.residual:.3e})")
    return sol


def measure_ratios(cfg: ExperimentConfig, scale: float | None = None, pairs: int | None = None,
                   dt: float | None = None) -> dict:
    """Lipschitz, semi-concavity and FP-stability ratios over random pairs.

    Pair ``i`` is ``mu0 + scale eta_1``, ``mu0 + scale eta_2`` with
    perturbations drawn from a stream that depends only on ``(seed, i)``, so
    the same directions are used at every ``scale``.
    """
    spec = cfg.problem(dt)
    grid = spec.grid
    k = SobolevIndex.default(grid.d) if cfg.k is None else SobolevIndex(cfg.k)
    scale = cfg.probe_scale if scale is None else scale
    pairs = cfg.probe_pairs if pairs is None else pairs
    base = cfg.initial_density()
    opts = cfg.picard_options()
    lip, semi, stab = [], [], []
    axes = tuple(range(-grid.d, 0))
    for i in range(pairs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4, i]))
        e1 = random_perturbation(grid, rng, cfg.probe_modes)
        e2 = random_perturbation(grid, rng, cfg.probe_modes)
        m1 = perturbed_density(base, e1, scale)
        m2 = perturbed_density(base, e2, scale)
        mh = ScalarField(grid, 0.5 * (m1.values + m2.values))
        s1, s2, sh = (_solve(spec, m, opts) for m in (m1, m2, mh))
        dist = h_dual_norm(m1, m2, k)
        if dist == 0:
            lip.append(0.0)
            semi.append(0.0)
            stab.append(0.0)
            continue
        lip.append(abs(s2.value - s1.value) / dist)
        defect = 0.5 * s1.value + 0.5 * s2.value - sh.value
        semi.append(defect / (0.125 * dist**2))
        # both flows under the first pair member's optimal feedback
        f1 = s1.mu.densities
        f2 = fp_forward_solve(spec, s1.alpha, m2).densities
        coef = np.fft.fftn(f1 - f2, axes=axes) / grid.M**grid.d
        stab.append(float(dual_norm_coefficients(coef, grid, k).max()) / dist)
    return {"lipschitz": np.array(lip), "semiconcavity": np.array(semi),
            "fp_stability": np.array(stab), "k": k.k, "scale": scale}


def value_time_ladder(cfg: ExperimentConfig, mu: ScalarField | None = None, dt: float | None = None,
                      rungs: int = 5) -> tuple:
    """``V(t, mu)`` at ``rungs`` equally spaced start times in ``[t0, T)``."""
    spec = cfg.problem(dt)
    mu = cfg.initial_density() if mu is None else mu
    n = spec.n_steps
    idx = sorted({int(round(j)) for j in np.linspace(0, n - n // rungs, rungs)})
    times = spec.times[idx]
    values = []
    for t in times:
        sub = spec if t == spec.t0 else spec.restarted(float(t))
        values.append(_solve(sub, mu, cfg.picard_options()).value)
    return times, np.array(values)


def cole_hopf_value(cfg: ExperimentConfig, t: float, mu: ScalarField) -> float:
    """With ``V = 0`` the value is linear in the measure: ``<u_t; mu>`` with the
    Cole-Hopf solution ``u``."""
    return float(np.mean(cole_hopf_hjb(cfg.field("g"), t, cfg.T).values * mu.values))


def holder_ratio(path_times: np.ndarray, densities: np.ndarray, grid: TorusGrid, ladder: int) -> float:
    """``max d_1(mu_s, mu_t) / sqrt(|t - s|)`` over a fixed ladder of times."""
    targets = np.linspace(path_times[0], path_times[-1], ladder)
    idx = [int(np.argmin(np.abs(path_times - t))) for t in targets]
    best = 0.0
    for i, j in itertools.combinations(idx, 2):
        dist = wasserstein1_circle(ScalarField(grid, densities[i]), ScalarField(grid, densities[j]))
        best = max(best, dist / math.sqrt(abs(path_times[j] - path_times[i])))
    return best


def time_regularity_probe(cfg: ExperimentConfig, dt: float | None = None) -> dict:
    """Time-Lipschitz ratio of ``V(., mu0)`` and the Hoelder-1/2 ratio of the
    optimal flow in ``d_1``."""
    spec = cfg.problem(dt)
    times, values = value_time_ladder(cfg, dt=dt)
    diffs = [abs(values[j] - values[i]) / (times[j] - times[i])
             for i, j in itertools.combinations(range(len(times)), 2)]
    out = {"times": times, "values": values, "time_lipschitz": float(max(diffs)), "dt": spec.dt}
    if cfg.d == 1:
        sol = _solve(spec, cfg.initial_density(), cfg.picard_options())
        out["holder"] = holder_ratio(spec.times, sol.mu.densities, spec.grid, cfg.time_ladder)
    else:
        out["holder"] = float("nan")
    return out


def regularity_probe(cfg: ExperimentConfig) -> ProbeReport:
    """Run the measure-side and time-side probes plus the DPP and duality checks."""
    ratios = measure_ratios(cfg)
    timing = time_regularity_probe(cfg)
    spec = cfg.problem()
    mu0 = cfg.initial_density()
    sol = _solve(spec, mu0, cfg.picard_options())
    t_mid = spec.times[spec.n_steps // 2]
    dpp = dpp_check(spec, mu0, float(t_mid), solution=sol, **cfg.picard_options())
    duality = duality_value_identity(sol) / max(abs(sol.value), 1e-300)
    return ProbeReport(
        lipschitz=float(ratios["lipschitz"].max()),
        semiconcavity=float(ratios["semiconcavity"].max()),
        semiconcavity_min=float(ratios["semiconcavity"].min()),
        fp_stability=float(ratios["fp_stability"].max()),
        time_lipschitz=timing["time_lipschitz"],
        holder=float(timing["holder"]),
        dpp_defect=dpp.relative,
        duality_defect=float(duality),
        M=cfg.M, dt=spec.dt, k=ratios["k"], scale=ratios["scale"], pairs=len(ratios["lipschitz"]),
        extra={"value": sol.value, "time_ladder": [float(t) for t in timing["times"]],
               "value_ladder": [float(v) for v in timing["values"]]},
    )
