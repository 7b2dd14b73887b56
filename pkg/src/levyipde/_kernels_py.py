"""Numpy reference implementation of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Polynomials are sums of monomials in standardized coordinates
``(x - center) / scale`` with integer exponent rows ``exps``.
"""

from __future__ import annotations

import numpy as np

# rows of displaced points handled per chunk; bounds the (rows * Q * nb) temporaries
_CHUNK_POINTS = 1 << 18


def _monomials(pts, exps, center, scale):
    xi = (pts - center) / scale
    max_deg = int(exps.max()) if exps.size else 0
    pows = np.ones(xi.shape + (max_deg + 1,))
    for a in range(1, max_deg + 1):
        pows[..., a] = pows[..., a - 1] * xi
    out = np.ones(xi.shape[:-1] + (exps.shape[0],))
    for dim in range(exps.shape[1]):
        out *= pows[..., dim, :][..., exps[:, dim]]
    return out


def poly_eval(pts, exps, coefs, center, scale):
    """Evaluate a multi-output polynomial at ``pts`` of shape (n, kx) -> (n, m)."""
    pts = np.asarray(pts, dtype=float)
    n = pts.shape[0]
    out = np.empty((n, coefs.shape[1]))
    step = max(1, _CHUNK_POINTS // max(1, exps.shape[0]))
    for lo in range(0, n, step):
        out[lo:lo + step] = _monomials(pts[lo:lo + step], exps, center, scale) @ coefs
    return out


def increment_values(x, disp, exps, coefs, center, scale):
    """p(x + d_q) - p(x) for every node q: (n, kx), (n, Q, kx) -> (n, Q, m)."""
    x = np.asarray(x, dtype=float)
    n, q = disp.shape[0], disp.shape[1]
    m = coefs.shape[1]
    out = np.empty((n, q, m))
    step = max(1, _CHUNK_POINTS // max(1, q * exps.shape[0]))
    for lo in range(0, n, step):
        xs = x[lo:lo + step]
        base = _monomials(xs, exps, center, scale) @ coefs
        moved = _monomials(xs[:, None, :] + disp[lo:lo + step], exps, center, scale) @ coefs
        out[lo:lo + step] = moved - base[:, None, :]
    return out


def increment_integral(x, disp, weights, exps, coefs, center, scale):
    """sum_q w[n, q] * (p(x_n + d_nq) - p(x_n)): -> (n, m)."""
    x = np.asarray(x, dtype=float)
    n, q = disp.shape[0], disp.shape[1]
    out = np.empty((n, coefs.shape[1]))
    step = max(1, _CHUNK_POINTS // max(1, q * exps.shape[0]))
    for lo in range(0, n, step):
        inc = increment_values(x[lo:lo + step], disp[lo:lo + step], exps, coefs, center, scale)
        out[lo:lo + step] = np.einsum("nq,nqm->nm", weights[lo:lo + step], inc)
    return out
