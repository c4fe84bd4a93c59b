import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softkill.mean_field import ProblemSpec, fp_forward_solve
from softkill.particles import (ConstantFeedback, FieldFeedback, InitialLaw, ParticleEnsemble, SimConfig,
                                ZeroFeedback, empirical_measure, euler_maruyama_step, hamiltonian_n,
                                representation_check, sample_density, simulate_cost_jn, weight_norm,
                                weighted_endpoint, weights_from_a)
from softkill.torus import ScalarField, TorusGrid, h_dual_norm

TWO_PI = 2 * np.pi


# --------------------------------------------------------------------------
# weights
# --------------------------------------------------------------------------

def test_weight_examples():
    assert np.allclose(weights_from_a([np.log(3.0), 0.0]), [0.25, 0.75], atol=1e-15)
    assert np.array_equal(weights_from_a([0.0, 0.0]), [0.5, 0.5])
    assert np.allclose(weights_from_a(np.zeros(7)), 1 / 7, atol=1e-16)
    assert weights_from_a([123.4]) == pytest.approx([1.0])


def test_weights_overflow_safe():
    w = weights_from_a([700.0, -700.0, 0.0])
    assert np.all(np.isfinite(w))
    assert w[1] == pytest.approx(1.0)
    assert abs(w.sum() - 1) < 1e-12


@given(st.lists(st.floats(-700, 700), min_size=1, max_size=30), st.floats(-50, 50))
@settings(max_examples=200, deadline=None)
def test_weights_sum_and_shift(a, c):
    a = np.array(a)
    w = weights_from_a(a)
    assert abs(w.sum() - 1) < 1e-12
    assert np.all(w >= 0)
    assert np.abs(weights_from_a(a + c) - w).max() < 1e-12


def test_shift_by_exact_constant_is_bitwise():
    a = np.array([0.25, -1.5, 3.0, 0.0])
    assert np.array_equal(weights_from_a(a + 2.0), weights_from_a(a))


def test_weight_norm_uniform():
    assert weight_norm(np.zeros(16)) == pytest.approx(0.25)


def test_empirical_measure():
    ens = ParticleEnsemble.create([0.3], [5.0])
    m = empirical_measure(ens)
    assert m.weights.tolist() == [1.0]
    ens = ParticleEnsemble.create([0.1, 0.7, 1.2], [0.0, 0.0, 0.0])
    m = empirical_measure(ens)
    assert np.allclose(m.weights, 1 / 3)
    assert np.allclose(m.positions[:, 0], [0.1, 0.7, 0.2])
    shifted = empirical_measure(ParticleEnsemble.create([0.1, 0.7, 1.2], [4.0, 4.0, 4.0]))
    assert np.array_equal(shifted.weights, m.weights)


def test_ensemble_rejects_clock_mismatch():
    with pytest.raises(ValueError):
        ParticleEnsemble.create([0.1, 0.2], [0.0])


def test_hamiltonian_n_examples():
    assert hamiltonian_n([0.2, 0.4], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0], 3.0) == 0.0
    assert hamiltonian_n([0.5], [0.7], [2.0], [1.0], 3.0) == pytest.approx(-1.0)
    args = ([0.1, 0.6], [0.3, -0.4], [1.0, -2.0], [0.5, 0.2], lambda x: 1 + np.cos(TWO_PI * x[..., 0]))
    h = hamiltonian_n(*args)
    shifted = hamiltonian_n(args[0], np.array(args[1]) + 3.0, *args[2:])
    assert h == pytest.approx(shifted, rel=1e-13)


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------

def test_em_brownian_moments():
    dt = 1e-4
    ens = ParticleEnsemble.create(np.full(1000, 0.5), seed=11)
    incs = []
    for _ in range(100):
        new = euler_maruyama_step(ens, ZeroFeedback(), dt, 0.0)
        step = (new.positions - ens.positions + 0.5) % 1.0 - 0.5
        incs.append(step[:, 0])
        assert np.array_equal(new.clocks, ens.clocks)
        ens = new
    z = np.concatenate(incs)
    n = z.size
    assert n == 100_000
    assert abs(z.mean()) / math.sqrt(dt / n) < 4
    assert abs(z.var() - dt) / (dt * math.sqrt(2.0 / n)) < 4


def test_constant_potential_freezes_weights():
    ens = ParticleEnsemble.create([0.1, 0.4, 0.9], [0.0, 0.5, -1.0], seed=2)
    w0 = ens.weights
    for _ in range(20):
        ens = euler_maruyama_step(ens, ZeroFeedback(), 1e-2, 1.75)
    assert np.allclose(ens.clocks - [0.0, 0.5, -1.0], 0.35, atol=1e-13)
    assert np.abs(ens.weights - w0).max() < 1e-13


def test_clock_uses_pre_move_position():
    V = lambda x: np.where(x[..., 0] < 0.5, 1.0, 0.0)  # noqa: E731
    ens = ParticleEnsemble.create([0.25, 0.75], seed=0)
    new = euler_maruyama_step(ens, ConstantFeedback((0.0,)), 0.1, V)
    assert np.allclose(new.clocks, [0.1, 0.0])


def test_em_determinism():
    def run(seed):
        ens = ParticleEnsemble.create(np.linspace(0, 1, 50, endpoint=False), seed=seed)
        for _ in range(30):
            ens = euler_maruyama_step(ens, ConstantFeedback((0.3,)), 1e-2, lambda x: np.sin(TWO_PI * x[..., 0]))
        return ens

    a, b, c = run(4), run(4), run(5)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.clocks, b.clocks)
    assert not np.array_equal(a.positions, c.positions)


def test_em_rejects_bad_step():
    with pytest.raises(ValueError):
        euler_maruyama_step(ParticleEnsemble.create([0.5]), ZeroFeedback(), 0.0, 0.0)


def test_field_feedback_interpolation(grid64):
    x = grid64.nodes[0]
    f0 = np.sin(TWO_PI * x)[None]
    f1 = np.cos(TWO_PI * x)[None]
    fb = FieldFeedback(grid64, [0.0, 1.0], np.stack([f0, f1]))
    pts = np.array([[0.13], [0.71]])
    got = fb(0.25, pts)[:, 0]
    ref = 0.75 * np.sin(TWO_PI * pts[:, 0]) + 0.25 * np.cos(TWO_PI * pts[:, 0])
    assert np.abs(got - ref).max() < 1e-12
    static = FieldFeedback.static([ScalarField(grid64, f0[0])])
    assert np.abs(static(3.0, pts)[:, 0] - np.sin(TWO_PI * pts[:, 0])).max() < 1e-12


def test_sample_density_matches_moments(grid64):
    dens = ScalarField(grid64, 1 + 0.5 * np.cos(TWO_PI * grid64.nodes[0]))
    pts = sample_density(dens, 200_000, np.random.default_rng(0))[:, 0]
    # E cos(2 pi X) = 0.25 under this density
    est = np.cos(TWO_PI * pts).mean()
    assert abs(est - 0.25) < 4 * math.sqrt(0.5 / pts.size)


# --------------------------------------------------------------------------
# cost estimator
# --------------------------------------------------------------------------

def _spec(grid, V, g, T=0.5, dt=5e-3):
    return ProblemSpec(V, g, T=T, dt=dt)


def test_jn_constant_terminal_is_exact(grid64):
    V = ScalarField.from_function(grid64, lambda x: 1 + np.cos(TWO_PI * x))
    spec = _spec(grid64, V, ScalarField(grid64, 0.8))
    law = InitialLaw(ScalarField(grid64, 1.0), 10, np.linspace(-1, 1, 10))
    est = simulate_cost_jn(spec, law, ZeroFeedback(), SimConfig(dt=1e-2, replications=8, seed=1))
    assert np.allclose(est.samples, 0.8, atol=1e-12)
    assert est.se < 1e-12
    zero = _spec(grid64, V, ScalarField(grid64, 0.0))
    assert simulate_cost_jn(zero, law, ZeroFeedback(), SimConfig(dt=1e-2, replications=4)).mean == 0.0


def test_jn_constant_feedback_running_cost(grid64):
    spec = _spec(grid64, ScalarField(grid64, 1.0), ScalarField(grid64, 0.0))
    ens = ParticleEnsemble.create([0.1, 0.5, 0.8])
    est = simulate_cost_jn(spec, ens, ConstantFeedback((0.6,)), SimConfig(dt=1e-2, replications=3))
    assert np.allclose(est.samples, 0.5 * 0.36 * 0.5, atol=1e-13)


def test_jn_standard_error_definition(grid64, generic_spec):
    law = InitialLaw(ScalarField(grid64, 1.0), 8)
    est = simulate_cost_jn(generic_spec, law, ZeroFeedback(), SimConfig(dt=1e-2, replications=16, seed=3))
    assert est.se == pytest.approx(est.samples.std(ddof=1) / 4.0)
    again = simulate_cost_jn(generic_spec, law, ZeroFeedback(), SimConfig(dt=1e-2, replications=16, seed=3))
    assert np.array_equal(est.samples, again.samples)


def test_jn_zero_feedback_single_particle(grid64):
    # N = 1 under zero feedback: J = E g(X_T) = P_T g(x0) exactly in law
    g = ScalarField.from_function(grid64, lambda x: np.cos(TWO_PI * x))
    spec = _spec(grid64, ScalarField.from_function(grid64, lambda x: 1 + np.sin(TWO_PI * x)), g)
    est = simulate_cost_jn(spec, ParticleEnsemble.create([0.0]), ZeroFeedback(),
                           SimConfig(dt=1e-2, replications=4000, seed=7))
    ref = math.exp(-0.5 * TWO_PI**2 * 0.5)
    assert abs(est.mean - ref) < 4 * est.se


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(replications=0)


def test_weight_bound_along_paths(generic_spec, grid64):
    mu = ScalarField(grid64, 1.0)
    a0 = np.linspace(-2, 2, 64)
    cloud = weighted_endpoint(generic_spec, ZeroFeedback(), mu, 64, seed=0, dt=1e-2, a0=a0)
    w0 = weights_from_a(a0)
    assert np.all(cloud.weights <= w0 * math.exp(0.5 * 2.0) * (1 + 1e-10))


# --------------------------------------------------------------------------
# probabilistic representation
# --------------------------------------------------------------------------

def test_representation_brownian_uniform():
    grid = TorusGrid(1, 64)
    spec = _spec(grid, ScalarField(grid, 0.0), ScalarField(grid, 0.0), T=0.1, dt=1e-2)
    mu = ScalarField(grid, 1.0)
    d = [np.mean([representation_check(spec, ZeroFeedback(), mu, N, s, dt=1e-2) for s in range(4)])
         for N in (100, 1600)]
    # a sixteen-fold increase in N should cut the distance roughly by four
    assert 2.0 < d[0] / d[1] < 8.0


def test_representation_seed_dispersion(generic_spec, grid64):
    fb = FieldFeedback.static([ScalarField.from_function(grid64, lambda x: 0.5 * np.sin(TWO_PI * x))])
    mu = ScalarField(grid64, 1 + 0.5 * np.cos(TWO_PI * grid64.nodes[0]))
    pde = fp_forward_solve(generic_spec, fb.grid_path(generic_spec), mu).at(generic_spec.n_steps)
    d1, d2 = (representation_check(generic_spec, fb, mu, 10_000, s, dt=5e-3, pde_density=pde) for s in (1, 2))
    assert max(d1, d2) / min(d1, d2) < 3.0
    assert max(d1, d2) < 2e-2


def test_weighted_endpoint_matches_pde_moments(generic_spec, grid64):
    # a cheap independent check of the self-normalized estimator
    mu = ScalarField(grid64, 1.0)
    pde = fp_forward_solve(generic_spec, None, mu).at(generic_spec.n_steps)
    cloud = weighted_endpoint(generic_spec, ZeroFeedback(), mu, 40_000, seed=9, dt=5e-3)
    est = np.sum(cloud.weights * np.cos(TWO_PI * cloud.positions[:, 0]))
    ref = np.mean(pde.values * np.cos(TWO_PI * grid64.nodes[0]))
    assert abs(est - ref) < 0.02
    assert h_dual_norm(cloud, pde, 3) < 2e-2
