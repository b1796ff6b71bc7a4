import numpy as np
import pytest
from scipy import integrate, linalg, special
from scipy.interpolate import CubicSpline

from biostab.config import Params
from biostab.radiative_base import (
    RadiativeBaseState,
    collocation_system,
    radiative_residual,
    solve_isotropic_base,
    solve_radiative_base,
    tau_grid,
)

TABLE_PAIRS = [(w, A) for w in (0.1, 0.42, 0.47) for A in (0.0, 0.4, 0.8)]


@pytest.mark.parametrize("kappa", [0.5, 1.0])
@pytest.mark.parametrize("A", [0.0, 0.8])
def test_pure_absorption(kappa, A):
    p = Params(albedo=0.0, extinction=kappa, aniso=A)
    s = solve_radiative_base(p)
    assert np.max(np.abs(s.G - np.exp(-s.tau))) < 1e-12
    assert np.max(np.abs(s.q - np.exp(-s.tau))) < 1e-12


def test_residual_of_exact_closed_form():
    p = Params(albedo=0.0)
    tau = tau_grid(p)
    exact = RadiativeBaseState(tau, np.exp(-tau), np.exp(-tau), 0.0, 0)
    assert radiative_residual(exact, p) < 1e-12


def test_residual_detects_perturbation():
    p = Params()
    s = solve_radiative_base(p)
    assert radiative_residual(s, p) < 1e-8
    G = s.G.copy()
    G[50] += 0.01
    bumped = RadiativeBaseState(s.tau, G, s.q, 0.0, 0)
    # the kernel row sums are below 1, so the node keeps most of the bump
    assert radiative_residual(bumped, p) >= 0.001


def test_residual_grid_mismatch():
    s = solve_radiative_base(Params())
    with pytest.raises(ValueError):
        radiative_residual(s, Params(n_tau=101))


@pytest.mark.parametrize("kappa", [0.5, 1.0])
@pytest.mark.parametrize("omega, A", TABLE_PAIRS)
def test_direct_and_picard_agree(kappa, omega, A):
    p = Params(albedo=omega, aniso=A, extinction=kappa)
    d = solve_radiative_base(p)
    it = solve_radiative_base(p, method="picard")
    assert np.max(np.abs(d.G - it.G)) < 1e-8 and np.max(np.abs(d.q - it.q)) < 1e-8
    assert d.residual < 1e-8 and it.residual < 1e-8


def test_matches_dense_solve_of_same_system():
    p = Params(albedo=0.42, extinction=0.5, aniso=0.0)
    K, b = collocation_system(p)
    x, *_ = linalg.lstsq(np.eye(K.shape[0]) - K, b)
    s = solve_radiative_base(p)
    assert np.max(np.abs(np.concatenate([s.G, s.q]) - x)) < 1e-10


@pytest.mark.parametrize("omega", [0.1, 0.47, 0.6])
def test_isotropic_variant_agrees(omega):
    p = Params(albedo=omega, aniso=0.0, extinction=1.0)
    a, b = solve_radiative_base(p), solve_isotropic_base(p)
    assert np.max(np.abs(a.G - b.G)) < 1e-10 and np.max(np.abs(a.q - b.q)) < 1e-10


def test_continuous_equations_with_adaptive_quadrature():
    # interpolate the discrete solution and evaluate the integral operators
    # with adaptive quadrature, independent of the collocation weights
    p = Params(albedo=0.47, aniso=0.8, extinction=0.5)
    s = solve_radiative_base(p)
    G, q = CubicSpline(s.tau, s.G), CubicSpline(s.tau, s.q)
    w, A, kappa = p.albedo, p.aniso, p.extinction
    for t0 in [0.0, 0.13, 0.25, 0.41, 0.5]:
        def rhs(kernel):
            pieces = [(0.0, t0), (t0, kappa)]
            return sum(integrate.quad(kernel, a, b, limit=200, epsabs=1e-12)[0]
                       for a, b in pieces if b > a)
        def g_kernel(t):
            d = abs(t0 - t)
            e1 = special.exp1(d) if d > 0 else 0.0
            return G(t) * e1 + A * np.sign(t0 - t) * q(t) * special.expn(2, d)

        def q_kernel(t):
            d = abs(t0 - t)
            return A * q(t) * special.expn(3, d) + np.sign(t0 - t) * G(t) * special.expn(2, d)

        g_int, q_int = rhs(g_kernel), rhs(q_kernel)
        assert abs(G(t0) - np.exp(-t0) - 0.5 * w * g_int) < 1e-6
        assert abs(q(t0) - np.exp(-t0) - 0.5 * w * q_int) < 1e-6


def test_forward_scattering_shifts_light_downward():
    base = Params(albedo=0.47, extinction=0.5)
    iso = solve_radiative_base(base.with_(aniso=0.0))
    fwd = solve_radiative_base(base.with_(aniso=0.8))
    assert fwd.G[-1] > iso.G[-1]  # bottom of the suspension, tau = kappa
    assert fwd.G[0] < iso.G[0]  # top


def test_grid_doubling():
    p = Params(albedo=0.42, aniso=0.4)
    coarse = solve_radiative_base(p)
    fine = solve_radiative_base(p.with_(n_tau=401))
    assert np.max(np.abs(fine.G[::2] - coarse.G)) < 1e-6


def test_positive_fields():
    for omega, A in TABLE_PAIRS:
        s = solve_radiative_base(Params(albedo=omega, aniso=A))
        assert np.all(s.G > 0) and np.all(s.q > 0)
