"""Exponential integrals, slab kernel row integrals and angular quadrature."""

from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.5772156649015329

# E_n(x): power series below this point, continued fraction at or above it.
SERIES_SWITCH = 1.0

_MAX_TERMS = 200
_EPS = 1e-17


def _digamma_int(n):
    # psi(n) for a positive integer n
    return -EULER_GAMMA + sum(1.0 / k for k in range(1, n))


def _expint_series(n, x):
    nm1 = n - 1
    if nm1 == 0:
        ans = -np.log(x) - EULER_GAMMA
    else:
        ans = np.full_like(x, 1.0 / nm1)
    fact = np.ones_like(x)
    for i in range(1, _MAX_TERMS):
        fact = fact * (-x / i)
        if i != nm1:
            delta = -fact / (i - nm1)
        else:
            delta = fact * (-np.log(x) + _digamma_int(n))
        ans = ans + delta
        if np.all(np.abs(delta) <= np.abs(ans) * _EPS):
            break
    return ans


def _expint_cf(n, x):
    # modified Lentz evaluation of the continued fraction
    nm1 = n - 1
    b = x + n
    c = np.full_like(x, 1.0 / 1e-300)
    d = 1.0 / b
    h = d.copy()
    for i in range(1, _MAX_TERMS):
        a = -i * (nm1 + i)
        b = b + 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h = h * delta
        if np.all(np.abs(delta - 1.0) <= _EPS):
            break
    return h * np.exp(-x)


def expint(n, x):
    """Exponential integral E_n(x) = int_1^inf exp(-x t) t^-n dt.

    Accepts scalars or arrays. E_1 has a logarithmic singularity at 0, so
    ``n == 1`` with ``x == 0`` raises ``ValueError``.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"order must be an integer >= 1, got {n}")
    n = int(n)
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0):
        raise ValueError("expint is defined for x >= 0")
    if n == 1 and np.any(x == 0):
        raise ValueError("E_1(0) is infinite (logarithmic singularity)")
    out = np.empty_like(x)
    zero = x == 0
    out[zero] = 1.0 / (n - 1) if n > 1 else np.inf
    small = (~zero) & (x < SERIES_SWITCH)
    large = x >= SERIES_SWITCH
    if small.any():
        out[small] = _expint_series(n, x[small])
    if large.any():
        out[large] = _expint_cf(n, x[large])
    return out[0] if scalar else out


def e1_row_integral(tau, kappa):
    """Closed form of int_0^kappa E_1(|tau - t|) dt = 2 - E_2(tau) - E_2(kappa - tau)."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0) or np.any(tau > kappa * (1 + 1e-14)):
        raise ValueError("tau must lie in [0, kappa]")
    rest = np.clip(kappa - tau, 0.0, None)
    return 2.0 - expint(2, tau) - expint(2, rest)


def sgn_e2_row_integral(tau, kappa):
    """int_0^kappa sgn(tau - t) E_2(|tau - t|) dt = E_3(kappa - tau) - E_3(tau)."""
    tau = np.asarray(tau, dtype=float)
    return expint(3, np.clip(kappa - tau, 0.0, None)) - expint(3, tau)


def e3_row_integral(tau, kappa):
    """int_0^kappa E_3(|tau - t|) dt = 2/3 - E_4(tau) - E_4(kappa - tau)."""
    tau = np.asarray(tau, dtype=float)
    return 2.0 / 3.0 - expint(4, tau) - expint(4, np.clip(kappa - tau, 0.0, None))


def simpson_weights(n, h):
    """Composite Simpson weights for ``n`` (odd) equally spaced nodes."""
    if n < 3 or n % 2 == 0:
        raise ValueError("Simpson's rule needs an odd number of nodes >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


@dataclass(frozen=True)
class AngularQuadrature:
    """Product rule over the unit sphere.

    Polar cosines use Gauss-Legendre on each hemisphere; azimuth uses the
    trapezoid rule on ``phi_j = 2 pi (j + 1/2) / n_phi``. The flattened
    direction arrays run over (mu, phi) with mu the fast-varying polar index
    reversed for the lower hemisphere, so ``nu[:n_dir // 2] > 0``.
    """

    mu: np.ndarray  # polar cosines, both hemispheres, shape (2 n_mu,)
    mu_weights: np.ndarray
    phi: np.ndarray
    phi_weights: np.ndarray
    xi: np.ndarray  # flattened direction cosines
    eta: np.ndarray
    nu: np.ndarray
    weights: np.ndarray  # solid-angle weights

    @classmethod
    def build(cls, n_mu=32, n_phi=24):
        x, w = np.polynomial.legendre.leggauss(n_mu)
        up = 0.5 * (x + 1.0)
        wu = 0.5 * w
        mu = np.concatenate([up, -up])
        mu_w = np.concatenate([wu, wu])
        phi = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
        phi_w = np.full(n_phi, 2.0 * np.pi / n_phi)
        MU, PHI = np.meshgrid(mu, phi, indexing="ij")
        WM, WP = np.meshgrid(mu_w, phi_w, indexing="ij")
        sin_t = np.sqrt(1.0 - MU**2)
        return cls(
            mu=mu,
            mu_weights=mu_w,
            phi=phi,
            phi_weights=phi_w,
            xi=(sin_t * np.cos(PHI)).ravel(),
            eta=(sin_t * np.sin(PHI)).ravel(),
            nu=MU.ravel(),
            weights=(WM * WP).ravel(),
        )

    @property
    def n_mu(self):
        return self.mu.size // 2

    @property
    def n_phi(self):
        return self.phi.size

    def moment(self, values):
        """Solid-angle integral of per-direction values (direction axis first)."""
        return np.tensordot(self.weights, values, axes=(0, 0))
