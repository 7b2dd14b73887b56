"""Hot-kernel dispatch.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``LEVYIPDE_PURE_PYTHON`` is set to a non-empty value,
the numpy implementation is used. Both expose ``poly_eval``,
``increment_values`` and ``increment_integral``.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("LEVYIPDE_PURE_PYTHON"):
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this installation")
        return _compiled
    if backend == "python":
        return _kernels_py
    raise ValueError(f"unknown kernel backend {backend!r}")


def _prep(exps, coefs, center, scale):
    return (
        np.ascontiguousarray(exps, dtype=np.int64),
        np.ascontiguousarray(coefs, dtype=float).reshape(len(exps), -1),
        np.ascontiguousarray(center, dtype=float),
        np.ascontiguousarray(scale, dtype=float),
    )


def poly_eval(pts, exps, coefs, center, scale, backend=None):
    exps, coefs, center, scale = _prep(exps, coefs, center, scale)
    pts = np.asarray(pts, dtype=float)
    return _impl(backend).poly_eval(pts, exps, coefs, center, scale)


def increment_values(x, disp, exps, coefs, center, scale, backend=None):
    exps, coefs, center, scale = _prep(exps, coefs, center, scale)
    x = np.asarray(x, dtype=float)
    disp = np.broadcast_to(np.asarray(disp, dtype=float), (x.shape[0],) + np.shape(disp)[-2:])
    return _impl(backend).increment_values(x, disp, exps, coefs, center, scale)


def increment_integral(x, disp, weights, exps, coefs, center, scale, backend=None):
    exps, coefs, center, scale = _prep(exps, coefs, center, scale)
    x = np.asarray(x, dtype=float)
    disp = np.asarray(disp, dtype=float)
    n = x.shape[0]
    disp = np.broadcast_to(disp, (n,) + disp.shape[-2:])
    weights = np.broadcast_to(np.asarray(weights, dtype=float), (n, disp.shape[1]))
    return _impl(backend).increment_integral(x, disp, weights, exps, coefs, center, scale)
