"""Convergence of the particle cost toward the limit value as N grows."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..mean_field import MFCSolution, SolverError, mfc_picard_solve
from ..particles import (FieldFeedback, InitialLaw, SimConfig, WeightBoundError, sample_density,
                         replication_rng, simulate_cost_jn, weight_norm)
from ..small_n import compare_to_limit, solve_v2_reduced
from .config import ExperimentConfig

logger = logging.getLogger(__name__)

Z95 = 1.959963984540054


@dataclass
class StudyRow:
    N: int
    J: float
    se: float
    value: float
    gap: float
    signed_gap: float
    rms_gap: float
    rms_se: float
    rhs: float
    replications: int
    source: str = "simulation"
    mollification_error: float = 0.0
    failed: bool = False
    message: str = ""


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float
    points: int
    C: float

    @property
    def excludes_zero(self) -> bool:
        return self.ci_high < 0 or self.ci_low > 0


@dataclass
class ConvergenceReport:
    rows: list
    fit: SlopeFit | None
    value: float
    config: dict = field(default_factory=dict)
    picard_iterations: int = 0
    picard_residual: float = float("nan")

    def simulation_rows(self) -> list:
        return [r for r in self.rows if r.source == "simulation" and not r.failed]

    def envelope_ok(self) -> bool:
        """Every simulated row satisfies ``gap <= 3 SE + C / sqrt(N)`` for the
        signed and for the root-mean-square gap."""
        if self.fit is None:
            return False
        for r in self.simulation_rows():
            bound = self.fit.C / math.sqrt(r.N)
            if r.gap > 3 * r.se + bound or r.rms_gap > 3 * r.rms_se + bound:
                return False
        return True


def fit_loglog(N, gap, se) -> SlopeFit:
    """Weighted least squares of ``log gap`` on ``log N``.

    Each point is weighted by the inverse delta-method variance
    ``(se / gap)^2`` of its logarithm; the 95% interval uses the normal
    approximation. ``C`` is the constant of the best ``C N^{-1/2}`` fit.
    """
    N = np.asarray(N, dtype=float)
    gap = np.asarray(gap, dtype=float)
    se = np.asarray(se, dtype=float)
    if N.size < 4:
        raise ValueError("a slope fit needs at least 4 values of N")
    x = np.log(N)
    y = np.log(gap)
    sig = np.where(se > 0, se / gap, 1.0)
    w = 1.0 / sig**2
    W = w.sum()
    xb = np.sum(w * x) / W
    yb = np.sum(w * y) / W
    sxx = np.sum(w * (x - xb) ** 2)
    slope = float(np.sum(w * (x - xb) * (y - yb)) / sxx)
    intercept = float(yb - slope * xb)
    resid = y - (intercept + slope * x)
    # scale by the reduced chi-square when the scatter exceeds the error bars
    chi2 = float(np.sum(w * resid**2) / (N.size - 2))
    stderr = float(math.sqrt(max(chi2, 1.0) / sxx))
    C = float(np.exp(np.mean(y + 0.5 * x)))
    return SlopeFit(slope, intercept, stderr, slope - Z95 * stderr, slope + Z95 * stderr,
                    int(N.size), C)


def _exact_row(cfg: ExperimentConfig, solution: MFCSolution) -> StudyRow:
    spec = cfg.problem()
    rng = replication_rng(cfg.seed, 0, tag=3)
    mu0 = cfg.initial_density()
    samples = []
    a = cfg.clocks(2)
    for _ in range(cfg.study_exact_samples):
        x = sample_density(mu0, 2, rng)[:, 0]
        # snap to grid nodes so the table lookup is exact
        x = np.round(x * cfg.M) / cfg.M % 1.0
        samples.append((spec.t0, x, a))
    table = solve_v2_reduced(spec, M_delta=cfg.M_delta, keep=[spec.t0],
                             delta_max=cfg.delta0 + (spec.T - spec.t0) * float(np.ptp(spec.V.values)))
    gt = compare_to_limit(spec, samples, table=table, eps=cfg.eps, **cfg.picard_options())
    gaps = np.array([r.v_n for r in gt.rows]) - solution.value
    return StudyRow(N=2, J=float(np.mean([r.v_n for r in gt.rows])), se=float("nan"),
                    value=solution.value, gap=float(abs(gaps.mean())), signed_gap=float(gaps.mean()),
                    rms_gap=float(np.sqrt(np.mean(gaps**2))), rms_se=float("nan"),
                    rhs=float(weight_norm(a)), replications=len(samples), source="exact",
                    mollification_error=float(max(r.mollification_error for r in gt.rows)))


def run_convergence_study(cfg: ExperimentConfig, include_exact: bool = True,
                          solution: MFCSolution | None = None) -> ConvergenceReport:
    """Estimate ``J^N`` under the mean-field feedback for every ``N`` in the sweep.

    Each replication draws fresh iid positions from ``mu0`` with clocks
    ``a0``. Per ``N`` the report carries the Monte Carlo mean and SE, the gap
    to the limit value and the root-mean-square gap
    ``sqrt(mean_r (J_r - V)^2)``. The slope is fitted to the latter: the
    mean gap is dominated by Monte Carlo noise once the ``O(1/N)``
    self-normalization bias is below the SE, while the per-replication gap
    carries the ``N^{-1/2}`` fluctuation of the empirical measure.
    """
    spec = cfg.problem()
    mu0 = cfg.initial_density()
    if solution is None:
        solution = mfc_picard_solve(spec, mu0, **cfg.picard_options())
    if not solution.converged:
        raise SolverError(f"picard did not converge (residual {solution.residual:.3e})")
    value = solution.value
    feedback = FieldFeedback.from_solution(solution)
    rows = []
    for N in cfg.N_list:
        a0 = cfg.clocks(N)
        sim = SimConfig(dt=cfg.dt_sim, replications=cfg.replications, seed=cfg.seed + N)
        try:
            est = simulate_cost_jn(spec, InitialLaw(mu0, N, a0), feedback, sim)
        except WeightBoundError as exc:
            rows.append(StudyRow(N, math.nan, math.nan, value, math.nan, math.nan, math.nan,
                                 math.nan, float(weight_norm(a0)), cfg.replications,
                                 failed=True, message=str(exc)))
            continue
        err = est.samples - value
        ms = float(np.mean(err**2))
        rms = math.sqrt(ms)
        # delta method for sqrt(mean(err^2))
        rms_se = float(np.std(err**2, ddof=1) / math.sqrt(est.replications) / (2 * rms)) if rms > 0 else 0.0
        rows.append(StudyRow(N=N, J=est.mean, se=est.se, value=value, gap=abs(est.mean - value),
                             signed_gap=est.mean - value, rms_gap=rms, rms_se=rms_se,
                             rhs=float(weight_norm(a0)), replications=est.replications))
        logger.info("N=%d J=%.8g se=%.3g rms gap=%.3g", N, est.mean, est.se, rms)
    if include_exact and cfg.study_exact_samples > 0 and cfg.d == 1:
        try:
            rows.append(_exact_row(cfg, solution))
        except (SolverError, ValueError) as exc:
            rows.append(StudyRow(2, math.nan, math.nan, value, math.nan, math.nan, math.nan, math.nan,
                                 math.nan, 0, source="exact", failed=True, message=str(exc)))
    good = [r for r in rows if r.source == "simulation" and not r.failed and r.rms_gap > 0]
    fit = None
    if len(good) >= 4:
        fit = fit_loglog([r.N for r in good], [r.rms_gap for r in good], [r.rms_se for r in good])
    return ConvergenceReport(rows, fit, value, cfg.model_dump(mode="json"), solution.iterations,
                             solution.residual)


def row_dicts(report: ConvergenceReport) -> list:
    return [asdict(r) for r in report.rows]
