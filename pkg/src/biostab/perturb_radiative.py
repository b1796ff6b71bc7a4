"""Perturbed light field and the coefficients coupling it to the concentration mode.

For a normal mode exp(sigma t + i k x) the diffuse perturbation Psi along a
direction (xi, eta, nu) obeys

    nu dPsi/dz + (i k xi + kappa n_s) Psi = src(z, nu)
    src = w kappa/(4 pi) [n_s G + G_s N + A nu (n_s S - q_s N)] - kappa L_s^d(z, nu) N

with Psi = 0 entering through the face the ray comes from. G = G^c + G^d and
S are the perturbed total intensity and vertical flux, so the source depends
on Psi itself through its angular moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base_state import BaseState
from .config import Params
from .fd import diff_matrix
from .special import AngularQuadrature

FOUR_PI = 4.0 * np.pi
_SERIES_CUT = 1.0

# Lagrange basis on u = 1, 2/3, 1/3, 0 (u = distance back from the cell end / h),
# as monomial coefficients: L_q(u) = sum_p _LAG_U[q, p] u^p.
_U_NODES = np.array([1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0])
_LAG_U = np.linalg.inv(np.vander(_U_NODES, 4, increasing=True)).T
_S_NODES = 1.0 - _U_NODES


class DiffuseSolveError(RuntimeError):
    pass


def exp_moments(x, p_max=3):
    """I_p(x) = int_0^1 exp(-x u) u^p du for p = 0..p_max, stacked on the last axis."""
    x = np.asarray(x, dtype=complex)
    out = np.empty(x.shape + (p_max + 1,), dtype=complex)
    small = np.abs(x) < _SERIES_CUT
    xs = x[small]
    term = np.ones_like(xs)
    acc = [np.zeros_like(xs) for _ in range(p_max + 1)]
    for k in range(30):
        for p in range(p_max + 1):
            acc[p] = acc[p] + term / (p + k + 1)
        term = term * (-xs) / (k + 1)
    for p in range(p_max + 1):
        out[..., p][small] = acc[p]
    xl = x[~small]
    ex = np.exp(-xl)
    prev = (1.0 - ex) / xl
    out[..., 0][~small] = prev
    for p in range(1, p_max + 1):
        prev = (p * prev - ex) / xl
        out[..., p][~small] = prev
    return out


def _source_stencils(n):
    lo = np.clip(np.arange(n - 1) - 1, 0, n - 4)
    idx = lo[:, None] + np.arange(4)[None, :]
    # Lagrange weights of the stencil nodes evaluated at the in-cell points
    offsets = idx - np.arange(n - 1)[:, None]  # node position relative to cell start, in h
    lag = np.empty((n - 1, 4, 4))  # (cell, point q, stencil node m)
    for c in range(n - 1):
        xs = offsets[c].astype(float)
        for m in range(4):
            others = np.delete(xs, m)
            lag[c, :, m] = np.prod(
                (_S_NODES[:, None] - others[None, :]) / (xs[m] - others[None, :]), axis=1
            )
    return idx, lag


class Transport:
    """Cell-by-cell exponential integrator for a set of ray directions.

    Over a cell the optical depth is exact (from tau at the nodes) and the
    attenuation inside the cell follows a cubic Hermite model of the optical
    path; the source is interpolated by cubics through four grid nodes. The
    scheme is fourth order and stays bounded for grazing rays.
    """

    def __init__(self, base: BaseState, kappa, nu, ikxi):
        nu = np.asarray(nu, dtype=float)
        ikxi = np.broadcast_to(np.asarray(ikxi, dtype=complex), nu.shape)
        self.nz = base.z.size
        self.nu = nu
        self.up = nu > 0
        h = base.h
        n_up = kappa * base.n
        n_dn = n_up[::-1]
        tau = base.tau
        d_up = tau[:-1] - tau[1:]
        d_dn = (tau[::-1][1:] - tau[::-1][:-1])
        self.idx, lag = _source_stencils(self.nz)
        mu = np.abs(nu)[:, None]
        kn = np.where(self.up[:, None], n_up[None, :], n_dn[None, :])
        delta = np.where(self.up[:, None], d_up[None, :], d_dn[None, :])
        x = (ikxi[:, None] * h + delta) / mu
        self.E = np.exp(-x)
        s = _S_NODES
        hermite = (
            delta[..., None] * (3 * s**2 - 2 * s**3)
            + h * kn[:, :-1, None] * (s**3 - 2 * s**2 + s)
            + h * kn[:, 1:, None] * (s**3 - s**2)
        )
        r = (delta[..., None] * s - hermite) / mu[..., None]
        mom = exp_moments(x)  # (dir, cell, p)
        mu_q = h * np.einsum("qp,dcp->dcq", _LAG_U, mom)
        self.W = np.einsum("dcq,cqm->dcm", mu_q * np.exp(-r), lag) / mu[..., None]

    def _to_march(self, arr):
        # arr (dir, nz) in z order -> march order per direction
        return np.where(self.up[:, None], arr, arr[:, ::-1])

    def sweep(self, source):
        """Psi for per-direction sources given at the z nodes, shape (dir, nz)."""
        s = self._to_march(np.asarray(source, dtype=complex))
        psi = np.zeros_like(s)
        rows = np.arange(s.shape[0])[:, None]
        for j in range(self.nz - 1):
            psi[:, j + 1] = self.E[:, j] * psi[:, j] + np.sum(
                self.W[:, j, :] * s[rows, self.idx[j]], axis=1
            )
        return self._to_march(psi)

    def kernels(self, coeffs, scaled_coeffs=None, column_scale=None):
        """Aggregate transport matrices over the directions.

        With T_d the matrix taking nodal source to nodal intensity along
        direction d, returns K[f] = sum_d coeffs[f, d] T_d and, when given,
        F[g] = sum_d scaled_coeffs[g, d] T_d diag(column_scale[d]).
        """
        coeffs = np.atleast_2d(coeffs)
        nz = self.nz
        K = np.zeros((coeffs.shape[0], nz, nz), dtype=complex)
        F = None
        if scaled_coeffs is not None:
            scaled_coeffs = np.atleast_2d(scaled_coeffs)
            scale = self._to_march(np.asarray(column_scale, dtype=float))
            F = np.zeros((scaled_coeffs.shape[0], nz, nz), dtype=complex)
        for upward in (True, False):
            group = self.up if upward else ~self.up
            if not group.any():
                continue
            E, W, C = self.E[group], self.W[group], coeffs[:, group]
            Kg = np.zeros_like(K)
            if F is not None:
                CS = scaled_coeffs[:, group, None] * scale[group][None]
                Fg = np.zeros_like(F)
            R = np.zeros((E.shape[0], nz), dtype=complex)
            for j in range(nz - 1):
                R *= E[:, j, None]
                R[:, self.idx[j]] += W[:, j, :]
                Kg[:, j + 1] = C @ R
                if F is not None:
                    Fg[:, j + 1] = np.einsum("gdk,dk->gk", CS, R)
            # rows and columns were in march order
            K += Kg if upward else Kg[:, ::-1, ::-1]
            if F is not None:
                F += Fg if upward else Fg[:, ::-1, ::-1]
        return K if F is None else (K, F)


def base_diffuse_intensity(base: BaseState, params: Params, nu):
    """Steady diffuse radiance L_s^d(z, nu) for each polar cosine in ``nu``.

    Obtained by marching the steady transfer equation with the scattering
    source built from G_s and q_s; shape (len(nu), nz).
    """
    nu = np.asarray(nu, dtype=float)
    kappa = params.extinction
    t = Transport(base, kappa, nu, 0.0)
    pref = params.albedo * kappa * base.n / FOUR_PI
    src = pref[None, :] * (base.G[None, :] - params.aniso * nu[:, None] * base.q[None, :])
    return t.sweep(src).real


@dataclass
class PerturbedRadiation:
    k: float
    G_coll: np.ndarray
    G_diff: np.ndarray
    S: np.ndarray  # vertical flux, collimated part included
    P: np.ndarray  # x-flux
    Q: np.ndarray  # y-flux
    psi: np.ndarray  # per direction, shape (n_dir, nz)
    iterations: int

    @property
    def G(self):
        return self.G_coll + self.G_diff


def _source_coefficients(base: BaseState, params: Params):
    c = params.albedo * params.extinction / FOUR_PI
    A = params.aniso
    return (
        c * base.n,  # multiplies G
        c * A * base.n,  # multiplies nu S
        c * base.G,  # multiplies N
        -c * A * base.q,  # multiplies nu N
    )


def solve_perturbed_diffuse(
    base: BaseState,
    params: Params,
    quad: AngularQuadrature,
    k,
    N,
    theta,
    tol=1e-10,
    max_iter=2000,
) -> PerturbedRadiation:
    """Diffuse response to a concentration perturbation N = D theta.

    Marches every quadrature direction and iterates on the angular moments
    until successive iterates of G^d and S^d differ by less than ``tol``
    (relative to their size).
    """
    N = np.asarray(N, dtype=complex)
    theta = np.asarray(theta, dtype=complex)
    kappa = params.extinction
    t = Transport(base, kappa, quad.nu, 1j * k * quad.xi)
    mus = np.unique(quad.nu)
    Ld = base_diffuse_intensity(base, params, mus)[np.searchsorted(mus, quad.nu)]
    a, b, c, e = _source_coefficients(base, params)
    Gc = kappa * base.G_coll * theta
    nu = quad.nu[:, None]
    fixed = (c + nu * e) * N - kappa * Ld * N
    Gd = np.zeros_like(Gc)
    Sd = np.zeros_like(Gc)
    for it in range(1, max_iter + 1):
        src = a * (Gc + Gd) + nu * b * (Sd - Gc) + fixed
        psi = t.sweep(src)
        Gd_new = quad.moment(psi)
        Sd_new = quad.moment(quad.nu[:, None] * psi)
        change = max(np.max(np.abs(Gd_new - Gd)), np.max(np.abs(Sd_new - Sd)))
        scale = max(1.0, np.max(np.abs(Gd_new)), np.max(np.abs(Sd_new)))
        Gd, Sd = Gd_new, Sd_new
        if change < tol * scale:
            break
    else:
        raise DiffuseSolveError(
            f"diffuse iteration stalled after {max_iter} sweeps (last change {change:.3e})"
        )
    return PerturbedRadiation(
        k=float(k),
        G_coll=Gc,
        G_diff=Gd,
        S=Sd - Gc,
        P=quad.moment(quad.xi[:, None] * psi),
        Q=quad.moment(quad.eta[:, None] * psi),
        psi=psi,
        iterations=it,
    )


def _folded_directions(quad: AngularQuadrature):
    """Distinct (nu, xi > 0) pairs with merged weights.

    Rays at azimuth phi and -phi see the same problem, and the ray with xi
    reversed gives the complex conjugate, so with an even azimuth count only a
    quarter of the azimuths need marching.
    """
    keep = quad.xi > 0
    key = np.round(np.stack([quad.nu[keep], quad.xi[keep]], axis=1), 12)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    w = np.bincount(inv.ravel(), weights=quad.weights[keep])
    return uniq[:, 0], uniq[:, 1], w


def perturbed_collimated(base: BaseState, theta):
    """Perturbed collimated intensity kappa G_s^c theta, where theta = int_1^z N."""
    kappa = float(base.tau[0])
    return kappa * base.G_coll * np.asarray(theta)


@dataclass
class RadiativeResponse:
    """Linear maps theta -> perturbed light moments, as nz x nz matrices (N = D1 theta)."""

    k: float
    G_coll: np.ndarray
    G_diff: np.ndarray
    S: np.ndarray
    P: np.ndarray


def radiative_response(base: BaseState, params: Params, quad: AngularQuadrature, k):
    """Solve the angular-moment equations for all unit-theta columns at once.

    The moments G^d and S^d close on themselves through the aggregated
    transport matrices, so one dense 2 nz solve replaces source iteration.
    """
    nz = base.z.size
    kappa = params.extinction
    D1 = diff_matrix(base.z, 1)
    folded = quad.n_phi % 2 == 0
    if folded:
        nu, xi, w = _folded_directions(quad)
    else:
        nu, xi, w = quad.nu, quad.xi, quad.weights
    t = Transport(base, kappa, nu, 1j * k * xi)
    mus = np.unique(nu)
    Ld = base_diffuse_intensity(base, params, mus)[np.searchsorted(mus, nu)]
    K, F = t.kernels(
        [w, w * nu, w * nu**2, w * xi, w * xi * nu],
        [w, w * nu, w * xi],
        Ld,
    )
    if folded:
        K = np.concatenate([2 * K[:3].real, 2j * K[3:].imag])
        F = np.stack([2 * F[0].real, 2 * F[1].real, 2j * F[2].imag])
    K1, Kn, Knn, Kx, Kxn = K
    F1, Fn, Fx = F
    a, b, c, e = _source_coefficients(base, params)
    C = kappa * np.diag(base.G_coll)

    def n_part(Kg, Ks, Fm):
        return (Kg * c + Ks * e - kappa * Fm) @ D1

    I = np.eye(nz)
    lhs = np.block([[I - K1 * a, -Kn * b], [-Kn * a, I - Knn * b]])
    rhs = np.vstack([
        (K1 * a) @ C - (Kn * b) @ C + n_part(K1, Kn, F1),
        (Kn * a) @ C - (Knn * b) @ C + n_part(Kn, Knn, Fn),
    ])
    sol = np.linalg.solve(lhs, rhs)
    Gd, Sd = sol[:nz], sol[nz:]
    P = (Kx * a) @ (C + Gd) + (Kxn * b) @ (Sd - C) + n_part(Kx, Kxn, Fx)
    return RadiativeResponse(k=float(k), G_coll=C, G_diff=Gd, S=Sd - C, P=P)


def radiative_response_by_columns(base: BaseState, params: Params, quad: AngularQuadrature, k):
    """Same maps, one source-iteration solve per grid basis function. Slow; for checking."""
    nz = base.z.size
    D1 = diff_matrix(base.z, 1)
    cols = []
    for j in range(nz):
        theta = np.zeros(nz, dtype=complex)
        theta[j] = 1.0
        cols.append(solve_perturbed_diffuse(base, params, quad, k, D1 @ theta, theta))
    stack = lambda name: np.stack([getattr(c, name) for c in cols], axis=1)
    return RadiativeResponse(
        k=float(k),
        G_coll=stack("G_coll"),
        G_diff=stack("G_diff"),
        S=stack("S"),
        P=stack("P"),
    )


@dataclass
class StabilityCoefficients:
    """Local profiles of the linear concentration equation

    D3 theta - lambda3 D2 theta - (sigma + k^2 + lambda2) D theta
        - lambda1 theta - Lambda0[theta] = Dn_s W
    """

    lambda1: np.ndarray
    lambda2: np.ndarray
    lambda3: np.ndarray


@dataclass
class RadiativeOperator:
    """Nonlocal light feedback at one wavenumber.

    ``L`` realises Lambda0 on grid samples of theta; ``G`` maps theta to the
    perturbed total intensity, which the zero-flux boundary rows need.
    """

    k: float
    L: np.ndarray
    G: np.ndarray
    response: RadiativeResponse


def lambda_profiles(base: BaseState, params: Params):
    """(lambda1, lambda2, lambda3) on the z-grid, derivatives by fourth-order FD."""
    Vc = params.swim_speed
    kappa = params.extinction
    D1 = diff_matrix(base.z, 1)
    lam3 = Vc * base.M
    lam2 = 2 * kappa * Vc * base.n * base.G_coll * base.dMdG + Vc * base.dMdG * (D1 @ base.G_diff)
    lam1 = kappa * Vc * (D1 @ (base.n * base.G_coll * base.dMdG))
    return lam1, lam2, lam3


def stability_coefficients(base: BaseState, params: Params) -> StabilityCoefficients:
    return StabilityCoefficients(*lambda_profiles(base, params))


def radiative_operator(
    base: BaseState, params: Params, quad: AngularQuadrature, k, by_columns=False
) -> RadiativeOperator:
    build = radiative_response_by_columns if by_columns else radiative_response
    resp = build(base, params, quad, k)
    Vc = params.swim_speed
    D1 = diff_matrix(base.z, 1)
    slope = Vc * base.n * base.dMdG
    L = D1 @ (slope[:, None] * resp.G_diff) - 1j * k * (Vc * base.n * base.M / base.q)[:, None] * resp.P
    G = resp.G_coll + resp.G_diff
    # with the azimuthal fold both maps are real up to rounding
    L, G = _real_if_negligible(L), _real_if_negligible(G)
    return RadiativeOperator(k=float(k), L=L, G=G, response=resp)


def _real_if_negligible(M, rtol=1e-12):
    if np.max(np.abs(M.imag), initial=0.0) <= rtol * max(1.0, np.max(np.abs(M), initial=0.0)):
        return M.real
    return M


def radiative_response_matrix(base: BaseState, params: Params, quad: AngularQuadrature, k):
    """Dense matrix of Lambda0 acting on theta samples."""
    return radiative_operator(base, params, quad, k).L
