"""Finite-difference stencils on the shared uniform z-grid."""

import numpy as np


def fornberg_weights(x0, x, m):
    """Weights for derivatives 0..m at ``x0`` using nodes ``x`` (Fornberg 1988)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    c = np.zeros((n, m + 1))
    c1 = 1.0
    c4 = x[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


def diff_matrix(z, order, accuracy=4):
    """Dense matrix of the ``order``-th derivative, ``accuracy``-order stencils.

    Interior rows use centred stencils; rows near the ends use the narrowest
    shifted stencil that keeps the same formal order.
    """
    z = np.asarray(z, dtype=float)
    n = z.size
    centred = order + accuracy - 1 if order % 2 == 0 else order + accuracy
    one_sided = order + accuracy
    if one_sided > n:
        raise ValueError(f"need at least {one_sided} nodes, got {n}")
    half = centred // 2
    D = np.zeros((n, n))
    for i in range(n):
        if half <= i < n - half:
            lo, width = i - half, centred
        else:
            width = one_sided
            lo = min(max(i - width // 2, 0), n - width)
        idx = np.arange(lo, lo + width)
        D[i, idx] = fornberg_weights(z[i], z[idx], order)
    return D


def derivative(f, z, order=1):
    """Fourth-order finite-difference derivative of samples ``f`` on ``z``."""
    return diff_matrix(z, order) @ np.asarray(f)


def cumulative_to_top(z):
    """Matrix Q with (Q f)_i = int_{z_i}^{z_end} f, exact for cubics.

    Each cell integrates the cubic through the four nearest nodes.
    """
    z = np.asarray(z, dtype=float)
    n = z.size
    if n < 4:
        raise ValueError(f"need at least 4 nodes, got {n}")
    cell = np.zeros((n - 1, n))
    for j in range(n - 1):
        lo = min(max(j - 1, 0), n - 4)
        idx = np.arange(lo, lo + 4)
        a, b = z[j], z[j + 1]
        x = (z[idx] - a) / (b - a)  # local coordinate, cell is [0, 1]
        for pos, m in enumerate(idx):
            others = np.delete(x, pos)
            anti = np.polyint(np.poly1d(others, r=True) / np.prod(x[pos] - others))
            cell[j, m] = (b - a) * (anti(1.0) - anti(0.0))
    Q = np.zeros((n, n))
    for i in range(n - 2, -1, -1):
        Q[i] = Q[i + 1] + cell[i]
    return Q
