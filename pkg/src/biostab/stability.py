"""Linear stability pencil for (W, Z, theta) and its leading eigenvalue.

Unknowns on the z-grid are stacked as x = [W, Z, theta] (Z dropped when the
layer does not rotate) and the normal-mode equations

    (sigma/S_c + k^2 - D^2)(D^2 - k^2) W + sqrt(T_a) D Z = R k^2 D theta
    (sigma/S_c + k^2 - D^2) Z = sqrt(T_a) D W
    D^3 theta - lambda3 D^2 theta - (sigma + k^2 + lambda2) D theta
        - lambda1 theta - Lambda0[theta] = Dn_s W

become A x = sigma B x, with boundary conditions overwriting the rows next
to each wall.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .base_state import BaseState
from .config import Params
from .fd import cumulative_to_top, diff_matrix
from .perturb_radiative import RadiativeOperator, StabilityCoefficients

SIGMA_CAP = 1e8
NEUTRAL_TOL = 1e-7
OSCILLATORY_TOL = 1e-5
R_SCAN = (1.0, 1e7)


class EigenSolveError(RuntimeError):
    pass


class NoNeutralPoint(EigenSolveError):
    pass


@dataclass
class Pencil:
    A: np.ndarray
    B: np.ndarray
    nz: int
    rotating: bool
    bc_rows: np.ndarray

    def blocks(self, x):
        """Split a state vector into (W, Z, theta); Z is zeros when not rotating."""
        n = self.nz
        W = x[:n]
        if self.rotating:
            return W, x[n : 2 * n], x[2 * n :]
        return W, np.zeros_like(W), x[n:]


def _operators(z):
    return [diff_matrix(z, order) for order in (1, 2, 3, 4)]


def _split(base, coeffs, operator, params, k, rotating, form="integrated"):
    """Return (A0, C, B, bc_rows) with A = A0 + R C.

    ``form="integrated"`` (default) integrates the concentration equation
    once from the top, where the cell flux vanishes:

        F[theta] - (sigma + k^2) theta - int_1^z H[theta] = int_1^z Dn_s W

    with F the cell-flux operator and H the horizontal-swimming part of
    Lambda0. The bottom row then states the exact mass balance, so the
    total-mass mode stays neutral at k = 0 on any grid. ``"expanded"`` is
    the third-order equation with the lambda profiles and Lambda0 as they
    stand; it needs the FD derivative of the log-singular G_s^d and loses
    mass conservation near steep cell layers.
    """
    if form not in ("integrated", "expanded"):
        raise ValueError(f"unknown form {form!r}")
    z = base.z
    n = z.size
    D1, D2, D3, D4 = _operators(z)
    I = np.eye(n)
    k2 = k * k
    Sc = params.schmidt
    rt = np.sqrt(params.taylor)
    nb = 3 if rotating else 2
    iw, iz, it = 0, 1, (2 if rotating else 1)
    dtype = np.result_type(operator.L, operator.G, float)
    A0 = np.zeros((nb * n, nb * n), dtype=dtype)
    C = np.zeros((nb * n, nb * n))
    B = np.zeros((nb * n, nb * n))

    def blk(i, j):
        return slice(i * n, (i + 1) * n), slice(j * n, (j + 1) * n)

    A0[blk(iw, iw)] = -(D4 - 2 * k2 * D2 + k2 * k2 * I)
    B[blk(iw, iw)] = -(D2 - k2 * I) / Sc
    C[blk(iw, it)] = -k2 * D1
    if rotating:
        A0[blk(iw, iz)] = rt * D1
        A0[blk(iz, iz)] = k2 * I - D2
        A0[blk(iz, iw)] = -rt * D1
        B[blk(iz, iz)] = -I / Sc
    lam1, lam2, lam3 = coeffs.lambda1, coeffs.lambda2, coeffs.lambda3
    slope = params.swim_speed * base.n * base.dMdG
    # cell flux DN - V_c (M_s N + n_s M' G) acting on theta
    flux = D2 - lam3[:, None] * D1 - slope[:, None] * operator.G
    if form == "integrated":
        horizontal = operator.L - D1 @ (slope[:, None] * (operator.G - kappa_G_coll(base)))
        J = -cumulative_to_top(z)  # int_1^z
        A0[blk(it, it)] = flux - k2 * I - J @ horizontal
        A0[blk(it, iw)] = -J * base.Dn[None, :]
        B[blk(it, it)] = I
    else:
        A0[blk(it, it)] = (
            D3 - lam3[:, None] * D2 - (k2 + lam2)[:, None] * D1 - np.diag(lam1) - operator.L
        )
        A0[blk(it, iw)] = -np.diag(base.Dn)
        B[blk(it, it)] = D1
    rows = []

    def put(row, block, values):
        A0[row, :] = 0.0
        C[row, :] = 0.0
        B[row, :] = 0.0
        A0[row, block * n : (block + 1) * n] = values
        rows.append(row)

    wb = iw * n
    put(wb + 0, iw, I[0])  # W(0) = 0
    put(wb + 1, iw, D1[0])  # DW(0) = 0
    put(wb + n - 2, iw, D2[-1])  # D2W(1) = 0
    put(wb + n - 1, iw, I[-1])  # W(1) = 0
    if rotating:
        zb = iz * n
        put(zb + 0, iz, I[0])  # Z(0) = 0
        put(zb + n - 1, iz, D1[-1])  # DZ(1) = 0
    tb = it * n
    if form == "integrated":
        # bottom row: the integrated equation with the (zero) wall flux left out
        A0[tb, tb : tb + n] += -flux[0]
    else:
        put(tb + 0, it, flux[0])  # zero cell flux at the bottom
        put(tb + n - 2, it, flux[-1])  # and at the top
    put(tb + n - 1, it, I[-1])  # theta(1) = 0
    return A0, C, B, np.array(sorted(rows))


def kappa_G_coll(base):
    return np.diag(float(base.tau[0]) * base.G_coll)


def assemble_system(
    base: BaseState,
    coeffs: StabilityCoefficients,
    operator: RadiativeOperator,
    params: Params,
    k,
    R,
    rotating=None,
    form="integrated",
) -> Pencil:
    """Pencil (A, B) at wavenumber ``k`` and Rayleigh number ``R``.

    ``rotating`` defaults to T_a > 0; pass True to keep the Z block at T_a = 0.
    """
    if rotating is None:
        rotating = params.taylor > 0
    _check_grid(base, coeffs, operator, k)
    A0, C, B, rows = _split(base, coeffs, operator, params, k, rotating, form)
    singular = np.nonzero(~B.any(axis=1))[0]
    if not np.array_equal(singular, rows):
        raise EigenSolveError("B has empty rows outside the boundary rows")
    return Pencil(A0 + R * C, B, base.z.size, rotating, rows)


def _check_grid(base, coeffs, operator, k):
    n = base.z.size
    if coeffs.lambda1.shape != (n,) or operator.L.shape != (n, n):
        raise ValueError("coefficients and base state live on different grids")
    if not np.isclose(operator.k, k):
        raise ValueError(f"radiative operator built for k = {operator.k}, asked for k = {k}")


def finite_eigenvalues(A, B, vectors=False):
    """Generalized eigenvalues of (A, B) by QZ, infinite and |sigma| > 1e8 removed.

    Rows are equilibrated first; this leaves the spectrum unchanged but the
    fourth-derivative rows otherwise cap the absolute accuracy near 1e-6.
    """
    scale = 1.0 / np.maximum(np.abs(A).max(axis=1), np.abs(B).max(axis=1))
    A = A * scale[:, None]
    B = B * scale[:, None]
    try:
        if vectors:
            (alpha, beta), V = linalg.eig(A, B, right=True, homogeneous_eigvals=True)
        else:
            alpha, beta = linalg.eigvals(A, B, homogeneous_eigvals=True)
            V = None
    except linalg.LinAlgError as exc:
        raise EigenSolveError(f"QZ failed: {exc}") from exc
    ok = np.abs(beta) * SIGMA_CAP > np.abs(alpha)
    sigma = alpha[ok] / beta[ok]
    if sigma.size == 0:
        raise EigenSolveError("every eigenvalue was filtered as spurious")
    return (sigma, V[:, ok]) if vectors else sigma


def _leading(sigma):
    # largest real part; of a conjugate pair report Im >= 0
    top = np.max(sigma.real)
    close = np.nonzero(sigma.real >= top - 1e-12 * max(1.0, abs(top)))[0]
    return close[np.argmax(sigma[close].imag)]


@dataclass
class EigenSolution:
    sigma: complex
    z: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    theta: np.ndarray
    k: float
    R: float
    taylor: float

    @property
    def N(self):
        return diff_matrix(self.z, 1) @ self.theta

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z", "W_re", "W_im", "Z_re", "Z_im", "theta_re", "theta_im"])
            for i, zi in enumerate(self.z):
                w.writerow([repr(float(v)) for v in (
                    zi, self.W[i].real, self.W[i].imag, self.Z[i].real, self.Z[i].imag,
                    self.theta[i].real, self.theta[i].imag,
                )])


def growth_rate(
    base: BaseState,
    coeffs: StabilityCoefficients,
    operator: RadiativeOperator,
    params: Params,
    k,
    R,
    vectors=True,
    rotating=None,
) -> EigenSolution:
    """Leading eigenpair (largest Re sigma) of the pencil at (k, R)."""
    pencil = assemble_system(base, coeffs, operator, params, k, R, rotating)
    if not vectors:
        sigma = finite_eigenvalues(pencil.A, pencil.B)
        s = sigma[_leading(sigma)]
        nan = np.full(pencil.nz, np.nan)
        return EigenSolution(complex(s), base.z, nan, nan, nan, float(k), float(R), params.taylor)
    sigma, V = finite_eigenvalues(pencil.A, pencil.B, vectors=True)
    i = _leading(sigma)
    W, Z, theta = pencil.blocks(V[:, i].astype(complex))
    j = np.argmax(np.abs(W))
    scale = W[j] if abs(W[j]) > 0 else 1.0
    return EigenSolution(
        complex(sigma[i]),
        base.z,
        W / scale,
        Z / scale,
        theta / scale,
        float(k),
        float(R),
        params.taylor,
    )


@dataclass
class NeutralPoint:
    k: float
    R: float
    sigma: complex
    branch: str  # "stationary" or "oscillatory"
    solution: EigenSolution

    @property
    def im_sigma(self):
        return self.sigma.imag


class NeutralSolver:
    """Root finding on R for Re sigma_max(R) = 0 at a fixed wavenumber.

    Stationary neutral modes have sigma = 0, so they are exactly the real
    eigenvalues R of A0 x = -R C x; one QZ on that pencil proposes R, and a
    sigma-solve confirms that no other mode is already unstable there.
    Oscillatory onsets are found by bracketing and false position on the
    leading growth rate.
    """

    def __init__(self, base, coeffs, operator, params, k, rotating=None):
        if rotating is None:
            rotating = params.taylor > 0
        _check_grid(base, coeffs, operator, k)
        self.base, self.coeffs, self.operator = base, coeffs, operator
        self.params, self.k, self.rotating = params, float(k), rotating
        self.A0, self.C, self.B, rows = _split(base, coeffs, operator, params, k, rotating)
        self.evaluations = 0
        self._seen = {}
        self._reduce(rows)

    def _reduce(self, rows):
        # Boundary rows do not depend on R: restrict to their null space once,
        # after which B is invertible and each R needs one standard eigensolve.
        keep = np.setdiff1d(np.arange(self.B.shape[0]), rows)
        basis = linalg.null_space(self.A0[rows])
        self._lu = linalg.lu_factor(self.B[keep] @ basis)
        self._A0r = self.A0[keep] @ basis
        self._Cr = self.C[keep] @ basis

    def leading(self, R):
        R = float(R)
        if R not in self._seen:
            self.evaluations += 1
            sigma = linalg.eigvals(linalg.lu_solve(self._lu, self._A0r + R * self._Cr))
            sigma = sigma[np.abs(sigma) < SIGMA_CAP]
            self._seen[R] = sigma[_leading(sigma)]
        return self._seen[R]

    def stationary_candidates(self):
        """Positive real R in the scan range where a mode has sigma = 0, ascending."""
        # C only couples theta into the W rows, so with mu = -1/R the nonzero
        # spectrum is that of the theta-by-W block of A0^-1 times that coupling.
        n = self.base.z.size
        w, t = slice(0, n), slice(self.A0.shape[0] - n, None)
        try:
            lu = linalg.lu_factor(self.A0)
        except (linalg.LinAlgError, ValueError):
            return np.array([])
        unit = np.zeros((self.A0.shape[0], n), dtype=self.A0.dtype)
        unit[w] = self.C[w, t]
        mu = linalg.eigvals(linalg.lu_solve(lu, unit)[t])
        mu = mu[np.abs(mu) * R_SCAN[1] * 10 > 1]
        R = -1.0 / mu
        real = np.abs(R.imag) <= 1e-6 * np.abs(R)
        R = np.sort(R.real[real])
        return R[(R >= R_SCAN[0]) & (R <= R_SCAN[1])]

    def _refine(self, lo, hi, g_lo=None, g_hi=None):
        """Illinois (bisection-safeguarded false position) on a sign-change bracket."""
        g_lo = self.leading(lo).real if g_lo is None else g_lo
        g_hi = self.leading(hi).real if g_hi is None else g_hi
        if g_lo * g_hi > 0:
            raise EigenSolveError(f"[{lo:.6g}, {hi:.6g}] does not bracket a neutral point")
        side = 0
        for _ in range(200):
            R = (lo * g_hi - hi * g_lo) / (g_hi - g_lo)
            if not lo < R < hi:
                R = 0.5 * (lo + hi)
            g = self.leading(R).real
            if abs(g) <= 0.1 * NEUTRAL_TOL or hi - lo <= 1e-13 * hi:
                return R
            if g * g_hi > 0:
                hi, g_hi = R, g
                if side == 1:
                    g_lo *= 0.5
                side = 1
            else:
                lo, g_lo = R, g
                if side == -1:
                    g_hi *= 0.5
                side = -1
        raise EigenSolveError("neutral-point iteration did not converge")

    def _polish(self, R, growth):
        """Secant steps from a near-root R, falling back to bracketing."""
        if abs(growth) <= 0.1 * NEUTRAL_TOL:
            return R
        R0, g0 = R, growth
        R1 = R * (1 - 1e-5) if growth > 0 else R * (1 + 1e-5)
        g1 = self.leading(R1).real
        for _ in range(6):
            if g0 * g1 <= 0:
                return self._refine(min(R0, R1), max(R0, R1), *((g0, g1) if R0 < R1 else (g1, g0)))
            if g1 == g0:
                break
            R2 = R1 - g1 * (R1 - R0) / (g1 - g0)
            if not 0.5 * R1 < R2 < 2 * R1:
                break
            g2 = self.leading(R2).real
            if abs(g2) <= 0.1 * NEUTRAL_TOL:
                return R2
            R0, g0, R1, g1 = R1, g1, R2, g2
        step = 1e-4
        for _ in range(40):
            other = R * (1 - step) if growth > 0 else R * (1 + step)
            g = self.leading(other).real
            if g * growth <= 0:
                lo, hi = sorted((R, other))
                return self._refine(lo, hi)
            step *= 2
        raise EigenSolveError(f"could not bracket the neutral point near R = {R:.6g}")

    def _scan(self, start=None):
        g = lambda R: self.leading(R).real
        lo_lim, hi_lim = R_SCAN
        if start is None:
            grid = np.geomspace(lo_lim, hi_lim, 29)
            vals = [g(grid[0])]
            if vals[0] > 0:
                raise NoNeutralPoint(f"unstable already at R = {lo_lim} for k = {self.k}")
            for i in range(1, grid.size):
                vals.append(g(grid[i]))
                if vals[-1] > 0:
                    return grid[i - 1], grid[i]
            raise NoNeutralPoint(f"no neutral point at k = {self.k} for R in [{lo_lim:g}, {hi_lim:g}]")
        # walk down from an unstable start until stable
        hi = start
        lo = start / 1.25
        while g(lo) > 0:
            hi, lo = lo, lo / 1.25
            if lo < lo_lim:
                raise NoNeutralPoint(f"unstable already at R = {lo_lim} for k = {self.k}")
        return lo, hi

    def solve(self, bracket=None, mode=1, vectors=True) -> NeutralPoint:
        if bracket is not None:
            R = self._refine(*bracket)
        else:
            cands = self.stationary_candidates()
            R = None
            if cands.size >= mode:
                Rs = cands[mode - 1]
                s = self.leading(Rs)
                if mode > 1:
                    R = Rs
                elif s.real <= NEUTRAL_TOL:
                    R = self._polish(Rs, s.real)
                else:
                    # another mode is unstable below the first stationary crossing
                    R = self._refine(*self._scan(start=Rs))
            if R is None:
                R = self._refine(*self._scan())
        if vectors:
            sol = growth_rate(
                self.base, self.coeffs, self.operator, self.params, self.k, R,
                rotating=self.rotating,
            )
        else:
            sol = EigenSolution(
                complex(self.leading(R)), self.base.z, None, None, None, self.k, float(R),
                self.params.taylor,
            )
        if abs(sol.sigma.real) > NEUTRAL_TOL and mode == 1:
            raise EigenSolveError(
                f"neutral root at k = {self.k} left Re sigma = {sol.sigma.real:.3e}"
            )
        branch = "oscillatory" if abs(sol.sigma.imag) > OSCILLATORY_TOL else "stationary"
        return NeutralPoint(self.k, float(R), sol.sigma, branch, sol)


def neutral_rayleigh(
    base: BaseState,
    coeffs: StabilityCoefficients,
    operator: RadiativeOperator,
    params: Params,
    k,
    R_bracket=None,
    mode=1,
    vectors=True,
) -> NeutralPoint:
    """Rayleigh number at which the leading mode at wavenumber ``k`` is neutral.

    ``mode`` > 1 returns the n-th stationary crossing instead of the first.
    """
    return NeutralSolver(base, coeffs, operator, params, k).solve(R_bracket, mode, vectors)
