import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softkill.torus import (AtomicMeasure, BandwidthError, ScalarField, SobolevIndex, TorusGrid,
                            brute_force_multiplier, cole_hopf_hjb, divergence, from_spectrum, gradient,
                            h_dual_norm, h_dual_norm_report, h_inner, h_norm, heat_propagate, laplacian,
                            mollify_atoms, to_spectrum)

TWO_PI = 2 * np.pi


def random_field(grid, seed, smooth=True):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(grid.shape)
    f = ScalarField(grid, v)
    if smooth:
        # drop the Nyquist mode so band-limited identities are exact
        return from_spectrum(grid, np.where(grid.band, f.coefficients, 0.0))
    return f


# --------------------------------------------------------------------------
# grid and spectra
# --------------------------------------------------------------------------

@pytest.mark.parametrize("M", [4, 12, 100])
def test_grid_rejects_bad_sizes(M):
    with pytest.raises(ValueError):
        TorusGrid(1, M)


def test_grid_rejects_dimension_three():
    with pytest.raises(ValueError):
        TorusGrid(3, 16)


def test_nodes_cover_torus_once():
    g = TorusGrid(2, 8)
    x, y = g.nodes
    pts = set(zip(x.ravel().tolist(), y.ravel().tolist()))
    assert len(pts) == 64
    assert x.min() == 0 and x.max() == pytest.approx(7 / 8)


def test_constant_spectrum():
    g = TorusGrid(1, 16)
    c = to_spectrum(ScalarField(g, 1.0))
    assert c[0] == pytest.approx(1.0)
    assert np.abs(c[1:]).max() < 1e-15


def test_cosine_spectrum():
    g = TorusGrid(1, 32)
    c = to_spectrum(ScalarField.from_function(g, lambda x: np.cos(TWO_PI * x)))
    assert c[1] == pytest.approx(0.5)
    assert c[-1] == pytest.approx(0.5)
    rest = np.delete(c, [1, 31])
    assert np.abs(rest).max() < 1e-15


@pytest.mark.parametrize("d,M", [(1, 64), (2, 16)])
def test_spectrum_round_trip(d, M):
    g = TorusGrid(d, M)
    f = random_field(g, 1, smooth=False)
    back = from_spectrum(g, to_spectrum(f))
    assert np.abs(back.values - f.values).max() <= 1e-12 * np.abs(f.values).max()


def test_hermitian_symmetry_of_real_field():
    g = TorusGrid(1, 32)
    c = to_spectrum(random_field(g, 2, smooth=False))
    n = np.arange(1, 16)
    assert np.allclose(c[n], np.conj(c[-n]), atol=1e-15)


def test_parseval():
    g = TorusGrid(2, 16)
    f, h = random_field(g, 3, False), random_field(g, 4, False)
    direct = np.mean(f.values * h.values)
    spectral = np.sum(f.coefficients * np.conj(h.coefficients)).real
    assert abs(direct - spectral) <= 1e-12 * abs(direct) + 1e-15


def test_gradient_of_constant_vanishes():
    g = TorusGrid(2, 16)
    for comp in gradient(ScalarField(g, 3.0)):
        assert np.abs(comp.values).max() < 1e-14


def test_laplacian_eigenfunction():
    g = TorusGrid(1, 32)
    f = ScalarField.from_function(g, lambda x: np.cos(TWO_PI * x))
    assert np.allclose(laplacian(f).values, -(TWO_PI**2) * f.values, atol=1e-10)


@pytest.mark.parametrize("d,M", [(1, 64), (2, 32)])
def test_divergence_of_gradient_is_laplacian(d, M):
    g = TorusGrid(d, M)
    f = random_field(g, 5)
    lhs = divergence(gradient(f)).values
    rhs = laplacian(f).values
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_evaluate_matches_nodes_and_direct_sum():
    g = TorusGrid(1, 32)
    f = random_field(g, 6)
    assert np.allclose(f.evaluate(g.axis), f.values, atol=1e-12)
    x = np.random.default_rng(0).random(20)
    n = np.fft.fftfreq(32, 1 / 32)
    direct = (np.exp(2j * np.pi * np.outer(x, n)) @ f.coefficients).real
    assert np.allclose(f.evaluate(x), direct, atol=1e-12)


def test_evaluate_two_dimensional():
    g = TorusGrid(2, 16)
    f = random_field(g, 7)
    x, y = g.nodes
    pts = np.stack([x.ravel(), y.ravel()], axis=-1)
    assert np.allclose(f.evaluate(pts), f.values.ravel(), atol=1e-12)


# --------------------------------------------------------------------------
# heat semigroup and Cole-Hopf
# --------------------------------------------------------------------------

def test_heat_identity_and_constant():
    g = TorusGrid(1, 32)
    f = random_field(g, 8)
    assert heat_propagate(f, 0.0) is f
    c = heat_propagate(ScalarField(g, 2.5), 0.3)
    assert np.allclose(c.values, 2.5, atol=1e-14)


def test_heat_mode_decay():
    g = TorusGrid(1, 32)
    f = ScalarField.from_function(g, lambda x: np.cos(TWO_PI * x))
    out = heat_propagate(f, 0.1)
    expected = math.exp(-0.1 * TWO_PI**2 / 2) * f.values
    assert np.abs(out.values - expected).max() < 1e-14


def test_heat_rejects_negative_time():
    with pytest.raises(ValueError):
        heat_propagate(ScalarField(TorusGrid(1, 8), 1.0), -0.1)


@settings(max_examples=25, deadline=None)
@given(s=st.floats(0.0, 0.2), t=st.floats(0.0, 0.2), seed=st.integers(0, 1000))
def test_heat_semigroup_property(s, t, seed):
    g = TorusGrid(1, 32)
    f = random_field(g, seed)
    a = heat_propagate(heat_propagate(f, s), t).values
    b = heat_propagate(f, s + t).values
    assert np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(f.values).max())


@settings(max_examples=25, deadline=None)
@given(t=st.floats(1e-4, 1.0), seed=st.integers(0, 1000))
def test_heat_mass_and_maximum_principle(t, seed):
    g = TorusGrid(1, 64)
    rng = np.random.default_rng(seed)
    f = ScalarField(g, rng.random(64))
    out = heat_propagate(f, t)
    assert out.integral() == pytest.approx(f.integral(), abs=1e-12)
    # t >= 1e-4 ~ h^2 / 2.5: the sampled kernel is nonnegative
    assert out.values.min() >= f.values.min() - 1e-10
    assert out.values.max() <= f.values.max() + 1e-10


def test_heat_maximum_principle_smooth_data():
    g = TorusGrid(1, 64)
    f = random_field(g, 9)
    f = heat_propagate(f, 0.01)
    out = heat_propagate(f, 0.05)
    assert out.values.min() >= f.values.min() - 1e-10
    assert out.values.max() <= f.values.max() + 1e-10


def test_cole_hopf_terminal_and_constant():
    g = TorusGrid(1, 32)
    gc = ScalarField(g, 0.7)
    assert np.allclose(cole_hopf_hjb(gc, 0.1, 0.5).values, 0.7, atol=1e-14)
    f = ScalarField.from_function(g, lambda x: np.cos(TWO_PI * x))
    assert cole_hopf_hjb(f, 0.5, 0.5) is f


def test_cole_hopf_against_heat_kernel_quadrature():
    # independent oracle: periodized Gaussian kernel on a fine quadrature grid
    g = TorusGrid(1, 128)
    f = ScalarField.from_function(g, lambda x: np.cos(TWO_PI * x))
    tau = 0.25
    u = cole_hopf_hjb(f, 0.25, 0.5).values
    y = (np.arange(4096) + 0.5) / 4096
    ex = np.exp(-np.cos(TWO_PI * y))
    ref = np.empty(128)
    for i, x in enumerate(g.axis):
        d = x - y
        kern = sum(np.exp(-((d + m) ** 2) / (2 * tau)) for m in range(-6, 7)) / math.sqrt(2 * math.pi * tau)
        ref[i] = -math.log(np.mean(kern * ex))
    assert np.abs(u - ref).max() < 1e-10


def test_cole_hopf_residual_mid_horizon():
    g = TorusGrid(1, 64)
    f = ScalarField.from_function(g, lambda x: np.cos(TWO_PI * x))
    T, t, h = 0.5, 0.25, 1e-4
    up, u0, um = (cole_hopf_hjb(f, s, T) for s in (t + h, t, t - h))
    dudt = (up.values - um.values) / (2 * h)
    grad = gradient(u0)[0].values
    res = -dudt - 0.5 * laplacian(u0).values + 0.5 * grad**2
    assert np.abs(res).max() < 1e-4


# --------------------------------------------------------------------------
# Sobolev scales
# --------------------------------------------------------------------------

def test_default_sobolev_orders():
    assert SobolevIndex.default(1).k == 3
    assert SobolevIndex.default(2).k == 4


def test_multiplier_basic_properties():
    k = SobolevIndex(3)
    assert k.multiplier(0) == 1.0
    n = np.arange(0, 20)
    m = k.multiplier(n)
    assert np.all(m >= 1) and np.all(np.diff(m) > 0)


@pytest.mark.parametrize("k", [0, 1, 2, 3, 4])
def test_multiplier_matches_enumeration(k):
    idx = SobolevIndex(k)
    for n1 in range(-8, 9):
        assert idx.multiplier(n1) == pytest.approx(brute_force_multiplier((n1,), k), rel=1e-13)
        for n2 in range(-8, 9, 3):
            assert idx.multiplier(n1, n2) == pytest.approx(brute_force_multiplier((n1, n2), k), rel=1e-13)


def test_tail_bound_dominates_tail():
    for d, M in [(1, 16), (1, 64), (2, 16)]:
        g = TorusGrid(d, M)
        k = SobolevIndex.default(d)
        L = M // 2
        if d == 1:
            n = np.concatenate([np.arange(L, 20000), -np.arange(L, 20000)])
            tail = np.sum(1 / k.multiplier(n))
        else:
            r = np.arange(-400, 401)
            a, b = np.meshgrid(r, r, indexing="ij")
            out = (np.abs(a) >= L) | (np.abs(b) >= L)
            tail = np.sum(1 / k.multiplier(a[out], b[out]))
        assert tail <= k.tail_bound(g)


def test_single_mode_dual_norm():
    g = TorusGrid(1, 32)
    k = SobolevIndex(3)
    f = ScalarField.from_function(g, lambda x: 0.3 * np.cos(TWO_PI * 2 * x))
    expected = 0.15 * math.sqrt(2 / k.multiplier(2))
    assert h_dual_norm(f, None, k) == pytest.approx(expected, rel=1e-12)


def test_dual_norm_zero_and_symmetric():
    g = TorusGrid(1, 32)
    mu = AtomicMeasure([0.1, 0.4], [0.3, 0.7])
    nu = AtomicMeasure([0.2], [1.0])
    assert h_dual_norm(mu, mu, 3, grid=g) == 0.0
    assert h_dual_norm(mu, nu, 3, grid=g) == pytest.approx(h_dual_norm(nu, mu, 3, grid=g), rel=1e-14)
    assert h_dual_norm(mu, nu, 3, grid=g) > 0


def test_antipodal_atoms_against_large_cutoff():
    # reference: direct Fourier sum over |n| < 5000
    k = SobolevIndex(3)
    n = np.arange(1, 5000)
    coef_sq = np.abs(1 - np.exp(-1j * np.pi * n)) ** 2
    ref = math.sqrt(2 * np.sum(coef_sq / k.multiplier(n)))
    g = TorusGrid(1, 128)
    rep = h_dual_norm_report(AtomicMeasure([0.0], [1.0]), AtomicMeasure([0.5], [1.0]), k, grid=g)
    assert rep.tail_bound < 1e-8
    # the tail bound controls the squared norm
    assert 0 <= ref**2 - rep.value**2 <= rep.tail_bound


def test_atom_coefficients_two_dimensional():
    g = TorusGrid(2, 8)
    mu = AtomicMeasure([[0.1, 0.7], [0.5, 0.25]], [0.25, 0.75])
    c = mu.coefficients(g)
    n = np.fft.fftfreq(8, 1 / 8)
    ref = sum(w * np.exp(-2j * np.pi * (n[:, None] * p[0] + n[None, :] * p[1]))
              for p, w in zip(mu.positions, mu.weights))
    assert np.allclose(c, np.where(g.band, ref, 0), atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_duality_pairing_bound(seed):
    g = TorusGrid(1, 32)
    rng = np.random.default_rng(seed)
    phi = random_field(g, seed)
    k = SobolevIndex(3)
    x = rng.random(3)
    w = rng.random(3)
    w /= w.sum()
    mu, nu = AtomicMeasure(x, w), AtomicMeasure(rng.random(2), [0.5, 0.5])
    pairing = np.sum(w * phi.evaluate(x)) - 0.5 * np.sum(phi.evaluate(nu.positions))
    assert abs(pairing) <= h_norm(phi, k) * h_dual_norm(mu, nu, k, grid=g) * (1 + 1e-10)


def test_h_inner_is_norm_squared():
    g = TorusGrid(2, 16)
    f = random_field(g, 11)
    assert h_inner(f, f, 2) == pytest.approx(h_norm(f, 2) ** 2, rel=1e-12)


def test_atomic_measure_validation():
    with pytest.raises(ValueError):
        AtomicMeasure([0.1, 0.2], [0.5, 0.4])
    with pytest.raises(ValueError):
        AtomicMeasure([0.1, 0.2], [1.5, -0.5])
    mu = AtomicMeasure([1.25], [1.0])
    assert mu.positions[0, 0] == pytest.approx(0.25)


# --------------------------------------------------------------------------
# mollification
# --------------------------------------------------------------------------

def test_mollified_density_is_probability():
    g = TorusGrid(1, 64)
    out = mollify_atoms(AtomicMeasure([0.3, 0.8], [0.4, 0.6]), g)
    assert out.density.values.min() >= 0
    assert out.density.integral() == pytest.approx(1.0, abs=1e-10)


def test_mollification_large_bandwidth_is_uniform():
    g = TorusGrid(1, 64)
    out = mollify_atoms(AtomicMeasure([0.3], [1.0]), g, eps=5.0)
    assert np.abs(out.density.values - 1).max() < 1e-10


def test_mollification_error_decreases_with_bandwidth():
    g = TorusGrid(1, 128)
    mu = AtomicMeasure([0.0], [1.0])
    errs = [mollify_atoms(mu, g, eps=e).hk_error for e in (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_mollification_symmetry():
    g = TorusGrid(1, 64)
    d = mollify_atoms(AtomicMeasure([0.0, 0.5], [0.5, 0.5]), g).density.values
    assert np.allclose(d, np.roll(d, 32), atol=1e-12)


def test_mollification_matches_heat_on_band():
    g = TorusGrid(1, 64)
    mu = AtomicMeasure([0.37], [1.0])
    eps = 1e-2
    out = mollify_atoms(mu, g, eps=eps)
    ref = heat_propagate(from_spectrum(g, mu.coefficients(g)), eps)
    assert np.allclose(out.density.values, ref.values / ref.values.mean(), atol=1e-10)


def test_mollification_rejects_tiny_bandwidth():
    g = TorusGrid(1, 16)
    with pytest.raises(BandwidthError, match="bandwidth below grid resolution"):
        mollify_atoms(AtomicMeasure([0.03], [1.0]), g, eps=1e-7)
