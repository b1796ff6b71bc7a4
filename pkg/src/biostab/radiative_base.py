"""Steady total intensity and flux of the slab from the coupled Fredholm equations.

With tau the optical depth from the top, the unknowns satisfy

    G(tau) = L_t e^-tau + w/2 int_0^kappa [G(t) E1|tau-t| + A sgn(tau-t) q(t) E2|tau-t|] dt
    q(tau) = L_t e^-tau + w/2 int_0^kappa [A q(t) E3|tau-t| + sgn(tau-t) G(t) E2|tau-t|] dt

Each kernel is integrated by subtracting the unknown's value at the
collocation node, so the node value multiplies the closed-form row integral
of the kernel and only a continuous remainder goes through Simpson's rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .config import Params, validate
from .special import (
    e1_row_integral,
    e3_row_integral,
    expint,
    sgn_e2_row_integral,
    simpson_weights,
)


class RadiativeSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class RadiativeBaseState:
    tau: np.ndarray
    G: np.ndarray
    q: np.ndarray
    residual: float
    iterations: int

    @property
    def kappa(self):
        return float(self.tau[-1])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "G_s", "q_s"])
            for row in zip(self.tau, self.G, self.q):
                w.writerow([repr(float(v)) for v in row])


def tau_grid(params: Params):
    return np.linspace(0.0, params.extinction, params.n_tau)


def _subtracted_kernel(kernel, weights, row_integral):
    """Nystrom matrix of int k(tau_i, t) f(t) dt with f(tau_i) subtracted.

    Row i reads  sum_j w_j k_ij (f_j - f_i) + f_i * row_integral_i,  where the
    diagonal kernel entry is never used.
    """
    K = kernel * weights[None, :]
    np.fill_diagonal(K, 0.0)
    diag = row_integral - K.sum(axis=1)
    K[np.diag_indices_from(K)] = diag
    return K


def collocation_system(params: Params):
    """Return (K, b) of the discrete system x = b + K x with x = [G; q]."""
    tau = tau_grid(params)
    kappa = params.extinction
    n = tau.size
    h = tau[1] - tau[0]
    w = simpson_weights(n, h)
    diff = tau[:, None] - tau[None, :]
    dist = np.abs(diff)
    sgn = np.sign(diff)
    off = ~np.eye(n, dtype=bool)
    e1 = np.zeros_like(dist)
    e1[off] = expint(1, dist[off])
    e2 = expint(2, dist)
    e3 = expint(3, dist)

    half_w = 0.5 * params.albedo
    A = params.aniso
    k_e1 = _subtracted_kernel(e1, w, e1_row_integral(tau, kappa))
    k_se2 = _subtracted_kernel(sgn * e2, w, sgn_e2_row_integral(tau, kappa))
    k_e3 = _subtracted_kernel(e3, w, e3_row_integral(tau, kappa))

    K = np.zeros((2 * n, 2 * n))
    K[:n, :n] = half_w * k_e1
    K[:n, n:] = half_w * A * k_se2
    K[n:, n:] = half_w * A * k_e3
    K[n:, :n] = half_w * k_se2
    src = params.source_intensity * np.exp(-tau)
    return K, np.concatenate([src, src])


def radiative_residual(state: RadiativeBaseState, params: Params) -> float:
    """Max absolute defect of the discrete Fredholm equations at the state."""
    if state.tau.size != params.n_tau or not np.isclose(state.tau[-1], params.extinction):
        raise ValueError(
            f"grid mismatch: state has {state.tau.size} nodes on [0, {state.tau[-1]}], "
            f"params want {params.n_tau} on [0, {params.extinction}]"
        )
    K, b = collocation_system(params)
    x = np.concatenate([state.G, state.q])
    return float(np.max(np.abs(x - K @ x - b)))


def solve_radiative_base(params: Params, method="direct", tol=1e-14, max_iter=20000):
    """Solve for G_s, q_s on the uniform tau-grid.

    ``method="direct"`` factorises the dense 2n x 2n system; ``"picard"``
    iterates x <- b + K x, which contracts for albedo < 1.
    """
    validate(params)
    K, b = collocation_system(params)
    n = params.n_tau
    if method == "direct":
        x = np.linalg.solve(np.eye(2 * n) - K, b)
        iterations = 1
    elif method == "picard":
        x = b.copy()
        for iterations in range(1, max_iter + 1):
            x_new = b + K @ x
            change = np.max(np.abs(x_new - x))
            x = x_new
            if change < tol:
                break
        else:
            res = float(np.max(np.abs(x - K @ x - b)))
            raise RadiativeSolveError(
                f"Picard iteration did not converge in {max_iter} sweeps (residual {res:.3e})"
            )
    else:
        raise ValueError(f"unknown method {method!r}")
    residual = float(np.max(np.abs(x - K @ x - b)))
    return RadiativeBaseState(tau_grid(params), x[:n], x[n:], residual, iterations)


def solve_isotropic_base(params: Params) -> RadiativeBaseState:
    """Separate solver for A = 0, where G decouples from q.

    Assembled row by row; q then follows from G by a single quadrature.
    """
    tau = tau_grid(params)
    kappa = params.extinction
    n = tau.size
    w = simpson_weights(n, tau[1] - tau[0])
    c = 0.5 * params.albedo
    src = params.source_intensity * np.exp(-tau)
    M = np.eye(n)
    q_rows = np.zeros((n, n))
    for i in range(n):
        others = np.arange(n) != i
        d = np.abs(tau[i] - tau[others])
        s = np.sign(tau[i] - tau[others])
        k1 = w[others] * expint(1, d)
        k2 = w[others] * s * expint(2, d)
        M[i, others] -= c * k1
        M[i, i] -= c * (2.0 - expint(2, tau[i]) - expint(2, kappa - tau[i]) - k1.sum())
        q_rows[i, others] = c * k2
        q_rows[i, i] = c * (expint(3, kappa - tau[i]) - expint(3, tau[i]) - k2.sum())
    G = np.linalg.solve(M, src)
    q = src + q_rows @ G
    state = RadiativeBaseState(tau, G, q, 0.0, 1)
    p0 = params.with_(aniso=0.0)
    return RadiativeBaseState(tau, G, q, radiative_residual(state, p0), 1)
