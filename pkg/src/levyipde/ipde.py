"""Nonlocal operators, the generator, and the viscosity residual of a solved mesh.

Operators act on a *field*: any object with ``evaluate(t, x) -> (values (n, m), flags (n,))``
and attribute ``m``. ``MeshSolution`` is a field; ``FunctionField`` wraps a
plain function for closed-form checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import levy
from .coefficients import ModelCoefficients
from .diagnostics import DiagnosticsReport
from .errors import ConfigurationError


@dataclass
class FunctionField:
    """Wrap ``fn(t, x (n, kx)) -> (n, m)`` as a field."""

    fn: object
    m: int = 1

    def evaluate(self, t, x, interpolation=None):
        x = np.asarray(x, dtype=float)
        vals = np.asarray(self.fn(t, x), dtype=float).reshape(x.shape[0], self.m)
        return vals, np.zeros(x.shape[0], dtype=bool)


def _values(field_, t, x, interpolation):
    return field_.evaluate(t, x, interpolation)[0]


def _batch(x, kx):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, kx), x.ndim <= 1


def _gradient(field_, i, t, x, h, interpolation):
    n, kx = x.shape
    grad = np.empty((n, kx))
    for c in range(kx):
        e = np.zeros(kx)
        e[c] = h
        grad[:, c] = (_values(field_, t, x + e, interpolation)[:, i] - _values(field_, t, x - e, interpolation)[:, i]) / (2 * h)
    return grad


def _hessian(field_, i, t, x, h, interpolation):
    n, kx = x.shape
    H = np.empty((n, kx, kx))
    u0 = _values(field_, t, x, interpolation)[:, i]
    for a in range(kx):
        ea = np.zeros(kx)
        ea[a] = h
        H[:, a, a] = (_values(field_, t, x + ea, interpolation)[:, i] - 2 * u0
                      + _values(field_, t, x - ea, interpolation)[:, i]) / h ** 2
        for b in range(a + 1, kx):
            eb = np.zeros(kx)
            eb[b] = h
            v = (_values(field_, t, x + ea + eb, interpolation)[:, i] - _values(field_, t, x + ea - eb, interpolation)[:, i]
                 - _values(field_, t, x - ea + eb, interpolation)[:, i] + _values(field_, t, x - ea - eb, interpolation)[:, i])
            H[:, a, b] = H[:, b, a] = v / (4 * h * h)
    return H


def _jump_integral(field_, coeffs, measure, i, t, x, k, weight, correction, rtol, interpolation):
    """quad over lambda_k of weight(e) [u(x + beta) - u(x) - correction(beta)] for a batch of x."""
    base = _values(field_, t, x, interpolation)[:, i]

    def integrand(e):
        q = e.shape[0]
        xs = np.broadcast_to(x[None, :, :], (q,) + x.shape)
        beta = np.asarray(coeffs.beta(t, xs, e[:, None, :]), dtype=float)
        beta = np.broadcast_to(beta, xs.shape)
        moved = _values(field_, t, (xs + beta).reshape(-1, x.shape[1]), interpolation)[:, i].reshape(q, -1)
        val = moved - base[None, :]
        if correction is not None:
            val = val - correction(beta)
        if weight is not None:
            val = val * np.broadcast_to(np.asarray(weight(xs, e[:, None, :]), dtype=float), val.shape)
        return val

    # rounding in u(x + beta) - u(x) is a few ulps of |u|
    atol = 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(base))) if base.size else 1.0)
    return np.asarray(levy.quad_integrate(measure, k, integrand, rtol=rtol, atol=atol), dtype=float)


def operator_B(solution, i, t, x, k, coeffs: ModelCoefficients | None = None, measure=None,
               rtol: float = 1e-8, interpolation=None):
    """Integral of gamma_i(t,x,e) [u_i(t, x + beta(t,x,e)) - u_i(t,x)] against lambda_k."""
    coeffs = coeffs or getattr(solution, "coeffs", None)
    measure = measure or getattr(solution, "measure", None)
    if coeffs is None or measure is None:
        raise ConfigurationError("operator_B needs the model coefficients and the jump measure")
    xb, single = _batch(x, coeffs.dims.state)
    out = _jump_integral(solution, coeffs, measure, i, t, xb, k,
                         lambda xs, e: coeffs.gamma[i](t, xs, e), None, rtol, interpolation)
    return float(out[0]) if single else out


def operator_K(solution, i, t, x, k, fd_step, coeffs: ModelCoefficients | None = None, measure=None,
               rtol: float = 1e-8, interpolation=None):
    """Integral of u_i(t, x+beta) - u_i(t,x) - beta . D_x u_i(t,x) against lambda_k.

    The gradient is a central difference with step ``fd_step``.
    """
    if not fd_step > 0:
        raise ConfigurationError("fd_step must be positive")
    coeffs = coeffs or getattr(solution, "coeffs", None)
    measure = measure or getattr(solution, "measure", None)
    if coeffs is None or measure is None:
        raise ConfigurationError("operator_K needs the model coefficients and the jump measure")
    xb, single = _batch(x, coeffs.dims.state)
    grad = _gradient(solution, i, t, xb, fd_step, interpolation)
    out = _jump_integral(solution, coeffs, measure, i, t, xb, k, None,
                         lambda beta: np.einsum("qnk,nk->qn", beta, grad), rtol, interpolation)
    return float(out[0]) if single else out


@dataclass
class ResidualReport:
    """Viscosity residuals at probe points with the numerical parameters used."""

    probes: list  # (t, x) pairs
    residuals: np.ndarray  # (P, m)
    fd_t: float
    fd_x: float
    quad_rtol: float
    classification: list
    small_jump_second_moment: float = float("nan")
    extra: dict = field(default_factory=dict)

    def rows(self):
        for (t, x), res, cls in zip(self.probes, self.residuals, self.classification):
            for i, r in enumerate(res):
                row = {"t": t}
                row.update({f"x{c}": float(v) for c, v in enumerate(np.atleast_1d(x))})
                row.update({"equation": i, "residual": float(r), "classification": cls,
                            "fd_t": self.fd_t, "fd_x": self.fd_x, "quad_rtol": self.quad_rtol})
                yield row

    def max_abs(self, which=("interior", "near-terminal")) -> np.ndarray:
        keep = np.array([c in which for c in self.classification])
        if not keep.any():
            return np.full(self.residuals.shape[1], np.nan)
        return np.abs(self.residuals[keep]).max(axis=0)

    def summary(self) -> str:
        a = np.abs(self.residuals)
        parts = [f"eq{i}: max {a[:, i].max():.3e} median {np.median(a[:, i]):.3e}" for i in range(a.shape[1])]
        return "viscosity residual " + "; ".join(parts)


def default_fd_steps(solution):
    lay = solution.layers[0]
    width = float(np.max(lay.hi - lay.lo))
    return solution.grid.dt, (width if width > 0 else 1.0) / 200.0


def viscosity_residual(solution, coeffs: ModelCoefficients, measure, k, t, x, fd_steps=None,
                       rtol: float = 1e-8) -> np.ndarray:
    """R_i(t,x) = -d_t u - b.Du - 1/2 Tr(sigma sigma^T D^2 u) - K_i u - h_i(t, x, u, sigma^T Du_i, B_i u).

    The linearly time-interpolated mesh plays the role of the test function.
    Time derivatives are central, one-sided at either end of the grid.
    """
    fd_t, fd_x = fd_steps or default_fd_steps(solution)
    kx, m = coeffs.dims.state, coeffs.dims.equations
    xb = np.asarray(x, dtype=float).reshape(1, kx)
    g = solution.grid
    lin = "linear"
    if t + fd_t <= g.T + 1e-12 and t - fd_t >= g.t0 - 1e-12:
        dt_u = (_values(solution, min(t + fd_t, g.T), xb, lin) - _values(solution, max(t - fd_t, g.t0), xb, lin)) / (2 * fd_t)
    elif t + fd_t > g.T + 1e-12:
        dt_u = (_values(solution, t, xb, lin) - _values(solution, t - fd_t, xb, lin)) / fd_t
    else:
        dt_u = (_values(solution, t + fd_t, xb, lin) - _values(solution, t, xb, lin)) / fd_t
    u = _values(solution, t, xb, lin)[0]
    b = np.asarray(coeffs.b(t, xb), dtype=float)[0]
    sig = np.asarray(coeffs.sigma(t, xb), dtype=float)[0]
    out = np.empty(m)
    for i in range(m):
        grad = _gradient(solution, i, t, xb, fd_x, lin)[0]
        hess = _hessian(solution, i, t, xb, fd_x, lin)[0]
        K = _jump_integral(solution, coeffs, measure, i, t, xb, k, None,
                           lambda beta: np.einsum("qnk,k->qn", beta, grad), rtol, lin)[0]
        B = _jump_integral(solution, coeffs, measure, i, t, xb, k,
                           lambda xs, e: coeffs.gamma[i](t, xs, e), None, rtol, lin)[0]
        h = float(np.asarray(coeffs.h[i](t, xb[0], u, sig.T @ grad, np.float64(B))))
        out[i] = -dt_u[0, i] - b @ grad - 0.5 * np.trace(sig @ sig.T @ hess) - K - h
    return out


def default_probes(solution, n_x=5, fractions=(0.25, 0.5, 0.75)):
    """Grid-node times inside the horizon and states in the central half of each layer's data range."""
    g = solution.grid
    probes = []
    for f in fractions:
        j = int(round(f * g.n_steps))
        t = float(g.nodes[j])
        lay = solution.layers[j]
        lo = lay.lo + 0.25 * (lay.hi - lay.lo)
        hi = lay.hi - 0.25 * (lay.hi - lay.lo)
        for s in np.linspace(0.0, 1.0, n_x):
            probes.append((t, lo + s * (hi - lo)))
    return probes


def classify_probe(solution, t, x, fd_t, fd_x):
    g = solution.grid
    x = np.atleast_1d(np.asarray(x, dtype=float))
    j = min(max(int(round((t - g.t0) / g.dt)), 0), g.n_steps)
    if np.any(solution.extrapolated(j, (x + fd_x)[None, :])) or np.any(solution.extrapolated(j, (x - fd_x)[None, :])):
        return "extrapolated"
    if t + fd_t > g.T + 1e-12:
        return "near-terminal"
    return "interior"


def viscosity_check(solution, coeffs, measure, k=None, probes=None, fd_steps=None, rtol=1e-8) -> ResidualReport:
    """Residuals at every probe with classification."""
    k = solution.k if k is None else k
    fd_t, fd_x = fd_steps or default_fd_steps(solution)
    probes = probes or default_probes(solution)
    res, cls = [], []
    for t, x in probes:
        res.append(viscosity_residual(solution, coeffs, measure, k, t, x, (fd_t, fd_x), rtol))
        cls.append(classify_probe(solution, t, x, fd_t, fd_x))
    return ResidualReport(probes=[(float(t), np.atleast_1d(np.asarray(x, dtype=float))) for t, x in probes],
                          residuals=np.array(res), fd_t=fd_t, fd_x=fd_x, quad_rtol=rtol, classification=cls,
                          small_jump_second_moment=levy.small_jump_second_moment(measure, k))


def terminal_consistency(solution, coeffs: ModelCoefficients, probe_xs, tolerance: float = 1e-6) -> DiagnosticsReport:
    """max over probes of |u_i(T, x) - g_i(x)| per equation."""
    xs = np.asarray(probe_xs, dtype=float).reshape(-1, coeffs.dims.state)
    u = _values(solution, solution.grid.T, xs, None)
    err = np.abs(u - coeffs.terminal(xs))
    rep = DiagnosticsReport("terminal-consistency")
    for i in range(err.shape[1]):
        j = int(np.argmax(err[:, i]))
        rep.values[f"max_error[{i}]"] = float(err[j, i])
        ok = err[j, i] <= tolerance
        rep.add(f"terminal[{i}]", ok, float(err[j, i]), None if ok else {"x": xs[j].tolist()},
                f"max |u(T,x) - g(x)| = {err[j, i]:.3e}")
    return rep
