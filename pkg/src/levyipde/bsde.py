"""Least-squares Monte Carlo for the truncated Markovian BSDE system.

Backward dynamic programming over the forward grid. At every step the
continuation value and the Brownian coefficient are regressed on a basis of
the current state, the nonlocal argument is obtained by integrating the
increments of the next layer against the truncated jump measure, and the
explicit update ``u_j = c + dt * h(t_j, x, c, z, Gamma)`` gives the new layer.

Two control variates are subtracted from the regression targets by default.
Both have zero conditional mean, so they change variance and not the
estimate: the compensated jump martingale of the next layer, and the
Brownian term ``z . dB`` once ``z`` has been estimated.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels_py, kernels, levy, streams
from .coefficients import ModelCoefficients
from .diagnostics import DiagnosticsReport
from .errors import ConfigurationError, SolverError
from .sde import PathEnsemble, TimeGrid, _Compensator, simulate_forward

ARTIFACT_VERSION = 1


# -- basis --------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionBasis:
    """Regression features for the conditional expectations.

    ``polynomial``: all monomials of total degree <= ``degree`` in
    standardized coordinates, ordered lexicographically by multi-index.
    ``piecewise-local``: tensor-product hat functions on ``cells`` equal cells
    spanning the layer's data range (constant extrapolation outside).
    ``box`` fixes the design box used when a layer's states are degenerate
    (all paths at one point); by default it is derived from the terminal spread.
    """

    kind: str = "polynomial"
    degree: int = 3
    cells: int = 8
    box: tuple | None = None
    ridge: float = 1e-12
    cond_threshold: float = 1e8
    cond_cap: float = 1e14

    def __post_init__(self):
        if self.kind not in ("polynomial", "piecewise-local"):
            raise ConfigurationError(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 0:
            raise ConfigurationError("basis degree must be >= 0")
        if self.kind == "piecewise-local" and self.cells < 1:
            raise ConfigurationError("basis cells must be >= 1")

    def multi_indices(self, kx: int) -> np.ndarray:
        if self.kind == "polynomial":
            idx = [a for a in itertools.product(range(self.degree + 1), repeat=kx) if sum(a) <= self.degree]
        else:
            idx = list(itertools.product(range(self.cells + 1), repeat=kx))
        return np.array(sorted(idx), dtype=np.int64).reshape(-1, kx)

    def spec(self) -> dict:
        out = {"kind": self.kind, "degree": self.degree, "cells": self.cells, "ridge": self.ridge,
               "cond_threshold": self.cond_threshold, "cond_cap": self.cond_cap}
        if self.box is not None:
            out["box"] = [float(v) for v in np.ravel(self.box)]
        return out

    @classmethod
    def from_spec(cls, spec: dict) -> "RegressionBasis":
        spec = dict(spec)
        if "box" in spec and spec["box"] is not None:
            spec["box"] = tuple(float(v) for v in spec["box"])
        return cls(**spec)


def _hat_design(x, idx, lo, width):
    xi = np.clip((x - lo) / width, 0.0, None)
    cells = idx.max() if idx.size else 0
    xi = np.minimum(xi, cells)
    out = np.ones(x.shape[:-1] + (idx.shape[0],))
    for dim in range(idx.shape[1]):
        out *= np.maximum(0.0, 1.0 - np.abs(xi[..., dim, None] - idx[:, dim]))
    return out


@dataclass(eq=False)
class Layer:
    """Fitted functions of one time node, all on the same design standardization.

    ``coef`` gives u, ``ccoef`` the continuation value and ``zcoef`` the
    Brownian coefficient (m * d columns, equation-major). ``cov`` is the
    coefficient covariance of the continuation regression (per equation),
    used for Monte Carlo error bars of derived quantities.
    """

    center: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    ccoef: np.ndarray
    zcoef: np.ndarray | None
    lo: np.ndarray
    hi: np.ndarray
    cond: float
    ridge: float
    cov: np.ndarray | None = None
    dispersed: bool = False


class _Features:
    """Evaluates basis expansions for one layer's standardization."""

    def __init__(self, basis: RegressionBasis, kx: int, backend=None):
        self.basis = basis
        self.idx = basis.multi_indices(kx)
        self.backend = backend
        self.poly = basis.kind == "polynomial"

    def design(self, x, layer):
        if self.poly:
            return _kernels_py._monomials(np.asarray(x, dtype=float), self.idx, layer.center, layer.scale)
        return _hat_design(np.asarray(x, dtype=float), self.idx, layer.center, layer.scale)

    def eval(self, x, layer, coef):
        x = np.asarray(x, dtype=float)
        if self.poly:
            return kernels.poly_eval(x, self.idx, coef, layer.center, layer.scale, backend=self.backend)
        return self.design(x, layer) @ coef.reshape(len(self.idx), -1)

    def increment_integral(self, x, disp, weights, layer, coef):
        """sum_q w[n, q] (f(x_n + d_nq) - f(x_n)) for the expansion with ``coef``."""
        if self.poly:
            return kernels.increment_integral(x, disp, weights, self.idx, coef, layer.center, layer.scale,
                                              backend=self.backend)
        n = x.shape[0]
        disp = np.broadcast_to(disp, (n,) + np.shape(disp)[-2:])
        weights = np.broadcast_to(weights, (n, disp.shape[1]))
        c = coef.reshape(len(self.idx), -1)
        base = self.design(x, layer) @ c
        moved = self.design(x[:, None, :] + disp, layer) @ c
        return np.einsum("nq,nqm->nm", weights, moved - base[:, None, :])

    def increment_values(self, x, disp, layer, coef):
        if self.poly:
            return kernels.increment_values(x, disp, self.idx, coef, layer.center, layer.scale, backend=self.backend)
        c = coef.reshape(len(self.idx), -1)
        disp = np.broadcast_to(disp, (x.shape[0],) + np.shape(disp)[-2:])
        return self.design(x[:, None, :] + disp, layer) @ c - (self.design(x, layer) @ c)[:, None, :]


# -- solution -----------------------------------------------------------------

@dataclass(eq=False)
class MeshSolution:
    """Per-node regression layers for u (and z) plus run metadata."""

    grid: TimeGrid
    k: int
    basis: RegressionBasis
    dims: tuple  # (kx, d, m)
    layers: list
    u0: np.ndarray
    std_error: np.ndarray
    cv_std_error: np.ndarray
    x0: np.ndarray
    n_paths: int
    seed: int
    terminal_residual: float = 0.0
    interpolation: str = "nearest"
    margin: float = 0.25
    coeffs: ModelCoefficients | None = field(default=None, repr=False)
    measure: levy.LevyMeasure | None = field(default=None, repr=False)
    backend: str | None = None
    path_values: np.ndarray | None = field(default=None, repr=False)  # crude per-path estimates

    def __post_init__(self):
        self._features = _Features(self.basis, self.dims[0], self.backend)

    @property
    def kx(self):
        return self.dims[0]

    @property
    def m(self):
        return self.dims[2]

    def _time_weights(self, t, interpolation=None):
        g = self.grid
        if t < g.t0 - 1e-12 * max(1.0, abs(g.t0)) or t > g.T + 1e-12 * max(1.0, abs(g.T)):
            raise ConfigurationError(f"t={t} lies outside the grid span [{g.t0}, {g.T}]")
        s = min(max((t - g.t0) / g.dt, 0.0), g.n_steps)
        mode = interpolation or self.interpolation
        if mode == "nearest":
            return [(int(np.floor(s + 0.5)), 1.0)]
        if mode != "linear":
            raise ConfigurationError(f"unknown interpolation {mode!r}")
        j = min(int(np.floor(s)), g.n_steps - 1)
        w = s - j
        return [(j, 1.0 - w), (j + 1, w)]

    def layer_values(self, j, x, which="u"):
        lay = self.layers[j]
        coef = {"u": lay.coef, "c": lay.ccoef, "z": lay.zcoef}[which]
        return self._features.eval(np.asarray(x, dtype=float), lay, coef)

    def extrapolated(self, j, x):
        lay = self.layers[j]
        width = np.maximum(lay.hi - lay.lo, 1e-12)
        return np.any((x < lay.lo - self.margin * width) | (x > lay.hi + self.margin * width), axis=-1)

    def evaluate(self, t, x, interpolation=None):
        """(values (n, m), extrapolation flags (n,)) at time t for states x (n, kx)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.kx)
        out = np.zeros((x.shape[0], self.m))
        flag = np.zeros(x.shape[0], dtype=bool)
        for j, w in self._time_weights(t, interpolation):
            if w == 0.0:
                continue
            out += w * self.layer_values(j, x)
            flag |= self.extrapolated(j, x)
        return out, flag

    def evaluate_z(self, t, x, interpolation=None):
        x = np.asarray(x, dtype=float).reshape(-1, self.kx)
        d = self.dims[1]
        out = np.zeros((x.shape[0], self.m, d))
        for j, w in self._time_weights(t, interpolation):
            j = min(j, self.grid.n_steps - 1)
            if w:
                out += w * self.layer_values(j, x, "z").reshape(-1, self.m, d)
        return out

    # -- persistence
    def metadata(self) -> dict:
        g = self.grid
        return {
            "format": "levyipde-mesh-solution", "version": ARTIFACT_VERSION,
            "grid": {"t0": g.t0, "T": g.T, "n_steps": g.n_steps},
            "k": self.k, "basis": self.basis.spec(), "dims": list(self.dims),
            "u0": self.u0.tolist(), "std_error": self.std_error.tolist(),
            "cv_std_error": self.cv_std_error.tolist(), "x0": self.x0.tolist(),
            "n_paths": self.n_paths, "seed": self.seed, "terminal_residual": self.terminal_residual,
            "interpolation": self.interpolation, "margin": self.margin,
            "layers": [{"cond": lay.cond, "ridge": lay.ridge, "dispersed": lay.dispersed} for lay in self.layers],
        }

    def save(self, path):
        arrays = {}
        for j, lay in enumerate(self.layers):
            for name in ("center", "scale", "coef", "ccoef", "lo", "hi"):
                arrays[f"{name}_{j}"] = getattr(lay, name)
            if lay.zcoef is not None:
                arrays[f"zcoef_{j}"] = lay.zcoef
            if lay.cov is not None:
                arrays[f"cov_{j}"] = lay.cov
        arrays["meta"] = np.frombuffer(json.dumps(self.metadata(), sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, coeffs=None, measure=None, backend=None) -> "MeshSolution":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("format") != "levyipde-mesh-solution":
                raise ConfigurationError(f"{path} is not a mesh-solution artifact")
            layers = []
            for j, info in enumerate(meta["layers"]):
                layers.append(Layer(
                    center=data[f"center_{j}"], scale=data[f"scale_{j}"], coef=data[f"coef_{j}"],
                    ccoef=data[f"ccoef_{j}"], zcoef=data[f"zcoef_{j}"] if f"zcoef_{j}" in data else None,
                    lo=data[f"lo_{j}"], hi=data[f"hi_{j}"], cond=info["cond"], ridge=info["ridge"],
                    cov=data[f"cov_{j}"] if f"cov_{j}" in data else None, dispersed=info["dispersed"]))
        g = meta["grid"]
        return cls(grid=TimeGrid(g["t0"], g["T"], g["n_steps"]), k=meta["k"],
                   basis=RegressionBasis.from_spec(meta["basis"]), dims=tuple(meta["dims"]), layers=layers,
                   u0=np.array(meta["u0"]), std_error=np.array(meta["std_error"]),
                   cv_std_error=np.array(meta["cv_std_error"]), x0=np.array(meta["x0"]),
                   n_paths=meta["n_paths"], seed=meta["seed"], terminal_residual=meta["terminal_residual"],
                   interpolation=meta["interpolation"], margin=meta["margin"], coeffs=coeffs,
                   measure=measure, backend=backend)


# -- regression -------------------------------------------------------------------

def _standardize(basis, design, box=None):
    lo = design.min(axis=0) if box is None else box[0]
    hi = design.max(axis=0) if box is None else box[1]
    if basis.kind == "polynomial":
        center = design.mean(axis=0)
        scale = design.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        center = lo.astype(float).copy()
        scale = np.where(hi > lo, (hi - lo) / basis.cells, 1.0)
    return center, scale, lo, hi


def _regress(A, Y, basis, step, what):
    """Least squares with ridge above the condition threshold.

    Returns (coef, fitted, cond, ridge, gram_inv, resid_var).
    """
    Y = Y.reshape(Y.shape[0], -1)
    bad = ~np.isfinite(Y)
    if bad.any():
        col = int(np.argwhere(bad)[0][1])
        raise SolverError(f"non-finite regression target for {what} at step {step}, column {col}",
                          step=step, equation=col)
    s = np.linalg.svd(A, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    G = A.T @ A
    lam = 0.0
    if cond > basis.cond_threshold:
        lam = basis.ridge * s[0] ** 2
        eff = np.sqrt((s[0] ** 2 + lam) / (s[-1] ** 2 + lam)) if lam > 0 else cond
        if not eff <= basis.cond_cap:
            raise SolverError(f"design for {what} at step {step} has condition number {cond:.3g}, beyond the "
                              f"regularization cap {basis.cond_cap:.3g}", step=step, condition=cond)
    Gr = G + lam * np.eye(G.shape[0])
    try:
        coef = np.linalg.solve(Gr, A.T @ Y)
        gram_inv = np.linalg.inv(Gr)
    except np.linalg.LinAlgError:
        raise SolverError(f"singular design for {what} at step {step}", step=step, condition=cond) from None
    fitted = A @ coef
    dof = max(1, A.shape[0] - A.shape[1])
    resid_var = ((Y - fitted) ** 2).sum(axis=0) / dof
    return coef, fitted, cond, lam, gram_inv, resid_var


# -- the backward scheme --------------------------------------------------------------

class _StepContext:
    """Per-step pieces shared by the solver and the diagnostics."""

    def __init__(self, coeffs: ModelCoefficients, measure, k):
        self.coeffs = coeffs
        self.measure = measure
        self.k = k
        self.rule = levy.quadrature_rule(measure, k)
        self.empty = len(self.rule) == 0
        self.comp = _Compensator(coeffs, measure, k)

    def displacement(self, t, x):
        """beta(t, x, e_q) for every node: (n or 1, Q, kx)."""
        nodes = self.rule.nodes
        if self.coeffs.beta_state_free:
            return np.asarray(self.coeffs.beta(t, np.zeros((1, 1, self.coeffs.dims.state)), nodes[None]), dtype=float)
        return np.asarray(self.coeffs.beta(t, x[:, None, :], nodes[None]), dtype=float)

    def gamma_weights(self, i, t, x):
        w = self.rule.weights
        g = self.coeffs.gamma[i]
        if self.coeffs.gamma_state_free(i):
            vals = np.asarray(g(t, np.zeros((1, 1, self.coeffs.dims.state)), self.rule.nodes[None]), dtype=float)
        else:
            vals = np.asarray(g(t, x[:, None, :], self.rule.nodes[None]), dtype=float)
        return (w * vals).reshape(-1, len(w))

    def needs_gamma(self, i):
        return self.coeffs.driver_uses_q(i) and not self.empty

    def one_step(self, t, x, dB, jpaths, jmarks, dt):
        c = self.coeffs
        dx = c.b(t, x) * dt + np.einsum("nkd,nd->nk", c.sigma(t, x), dB) - self.comp(t, x) * dt
        if jpaths.size:
            np.add.at(dx, jpaths, c.beta(t, x[jpaths], jmarks))
        return x + dx


def nonlocal_term(solution: MeshSolution, coeffs, measure, j: int, x, ctx=None) -> np.ndarray:
    """Gamma_i at step j: integral of gamma_i (u_{j+1}(x + beta) - u_{j+1}(x)) against lambda_k, (n, m)."""
    ctx = ctx or _StepContext(coeffs, measure, solution.k)
    x = np.asarray(x, dtype=float).reshape(-1, solution.kx)
    t = solution.grid.nodes[j]
    out = np.zeros((x.shape[0], solution.m))
    nxt = solution.layers[j + 1]
    if ctx.empty:
        return out
    disp = ctx.displacement(t, x)
    for i in range(solution.m):
        if not ctx.needs_gamma(i):
            continue
        w = ctx.gamma_weights(i, t, x)
        out[:, i] = solution._features.increment_integral(x, disp, w, nxt, nxt.coef[:, i:i + 1])[:, 0]
    return out


def _default_box(basis, X_end, x0):
    if basis.box is not None:
        b = np.asarray(basis.box, dtype=float).reshape(-1)
        kx = X_end.shape[1]
        if b.size == 2:
            return np.full(kx, b[0]), np.full(kx, b[1])
        return b[:kx], b[kx:]
    sd = X_end.std(axis=0)
    half = np.where(sd > 1e-8 * (1.0 + np.abs(x0)), 3.0 * sd, 1.0)
    return x0 - half, x0 + half


def _is_degenerate(X):
    sd = X.std(axis=0)
    return bool(np.any(sd <= 1e-10 * (1.0 + np.abs(X.mean(axis=0)))))


def _driver(coeffs, i, t, x, y, z, q):
    val = np.asarray(coeffs.h[i](t, x, y, z, q), dtype=float)
    return np.broadcast_to(val, q.shape)


def _cv_targets(ctx, feat, nxt, X, Xn, dt, t, jp, jm, control_variates):
    V = feat.eval(Xn, nxt, nxt.coef)
    if not control_variates or ctx.empty:
        return V
    disp = ctx.displacement(t, X)
    integral = feat.increment_integral(X, disp, ctx.rule.weights[None, :], nxt, nxt.coef)
    J = -dt * integral
    if jp.size:
        xs = X[jp]
        moved = xs + ctx.coeffs.beta(t, xs, jm)
        jumps = feat.eval(moved, nxt, nxt.coef) - feat.eval(xs, nxt, nxt.coef)
        np.add.at(J, jp, jumps)
    return V - J


def _z_fd(feat, lay, ccoef, x, sigma, m, d):
    h = 1e-4 * lay.scale
    grad = np.empty((x.shape[0], m, x.shape[1]))
    for c in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[c] = h[c]
        grad[:, :, c] = (feat.eval(x + e, lay, ccoef) - feat.eval(x - e, lay, ccoef)) / (2 * h[c])
    return np.einsum("nmk,nkd->nmd", grad, sigma)


def solve_backward(coeffs: ModelCoefficients, measure: levy.LevyMeasure, k: int, grid: TimeGrid,
                   ensemble: PathEnsemble, basis: RegressionBasis | None = None, *,
                   z_method: str = "regression", control_variates: bool = True,
                   backend: str | None = None) -> MeshSolution:
    """Backward regression scheme for the truncated system.

    Layers whose states are all equal (always the first one, since every
    path starts at x0) are fitted on design points spread over the design
    box, each advanced one Euler step with its own path's increments. The
    value at x0 itself comes from the plain average over the actual paths.
    """
    basis = basis or RegressionBasis()
    if ensemble.k != k:
        raise ConfigurationError(f"ensemble was simulated at k={ensemble.k}, solver asked for k={k}")
    if ensemble.grid != grid:
        raise ConfigurationError("ensemble grid differs from the solver grid")
    if z_method not in ("regression", "fd"):
        raise ConfigurationError(f"unknown z_method {z_method!r}")
    kx, d, m = coeffs.dims.state, coeffs.dims.brownian, coeffs.dims.equations
    n, N, dt = ensemble.n_paths, grid.n_steps, grid.dt
    nodes = grid.nodes
    feat = _Features(basis, kx, backend)
    ctx = _StepContext(coeffs, measure, k)
    states, dBs = ensemble.states, ensemble.brownian_increments
    x0 = ensemble.x0
    box = _default_box(basis, states[:, -1], x0)
    layers = [None] * (N + 1)
    def dispersed(j):
        rng = streams.substream(ensemble.seed, "design", j)
        return rng.uniform(box[0], box[1], size=(n, kx))

    # terminal layer
    XT = states[:, -1]
    dispersed_T = _is_degenerate(XT)
    D = dispersed(N) if dispersed_T else XT
    center, scale, lo, hi = _standardize(basis, D, box if dispersed_T else None)
    probe = Layer(center, scale, None, None, None, lo, hi, 0.0, 0.0)
    A = feat.design(D, probe)
    gT = coeffs.terminal(D)
    coef, fitted, cond, lam, _, _ = _regress(A, gT, basis, N, "terminal")
    terminal_residual = float(np.max(np.abs(fitted - gT)))
    layers[N] = Layer(center, scale, coef, coef, None, lo, hi, cond, lam, dispersed=dispersed_T)

    path_drivers = np.zeros((n, m))
    u0 = cv_se = None
    # view over the layers fitted so far, for the nonlocal term
    partial = MeshSolution(grid, k, basis, (kx, d, m), layers, np.zeros(m), np.zeros(m), np.zeros(m),
                           x0, n, ensemble.seed, backend=backend)
    for j in range(N - 1, -1, -1):
        t = nodes[j]
        nxt = layers[j + 1]
        jp, jm = ensemble.step_jumps(j)
        X_act = states[:, j]
        dB = dBs[:, j]
        disp_layer = _is_degenerate(X_act)
        if disp_layer:
            X = dispersed(j)
            Xn = ctx.one_step(t, X, dB, jp, jm, dt)
        else:
            X, Xn = X_act, states[:, j + 1]
        center, scale, lo, hi = _standardize(basis, X, box if disp_layer else None)
        shell = Layer(center, scale, None, None, None, lo, hi, 0.0, 0.0)
        A = feat.design(X, shell)

        target = _cv_targets(ctx, feat, nxt, X, Xn, dt, t, jp, jm, control_variates)
        ccoef, cfit, cond, lam, gram_inv, rv = _regress(A, target, basis, j, "continuation")
        if z_method == "regression":
            zt = ((target - cfit)[:, :, None] * dB[:, None, :] / dt).reshape(n, m * d)
            zcoef, zfit, _, _, _, _ = _regress(A, zt, basis, j, "z")
        else:
            zfit = _z_fd(feat, shell, ccoef, X, coeffs.sigma(t, X), m, d).reshape(n, m * d)
            zcoef, _, _, _, _, _ = _regress(A, zfit, basis, j, "z")
        zv = zfit.reshape(n, m, d)
        if control_variates:
            target = target - np.einsum("nmd,nd->nm", zv, dB)
            ccoef, cfit, cond, lam, gram_inv, rv = _regress(A, target, basis, j, "continuation")
        cov = rv[:, None, None] * gram_inv[None, :, :]

        gam = nonlocal_term(partial, coeffs, measure, j, X, ctx)
        u_vals = cfit + dt * np.stack([_driver(coeffs, i, t, X, cfit, zv[:, i, :], gam[:, i]) for i in range(m)], axis=1)
        coef, _, _, _, _, _ = _regress(A, u_vals, basis, j, "layer")
        layers[j] = Layer(center, scale, coef, ccoef, zcoef, lo, hi, cond, lam, cov=cov, dispersed=disp_layer)

        # driver terms along the actual paths, for the pathwise estimator
        if j == 0:
            Xn_act = states[:, 1]
            tgt = _cv_targets(ctx, feat, nxt, X_act, Xn_act, dt, t, jp, jm, control_variates)
            c0 = tgt.mean(axis=0)
            z0 = ((tgt - c0)[:, :, None] * dB[:, None, :]).mean(axis=0) / dt
            if control_variates:
                tgt = tgt - np.einsum("md,nd->nm", z0, dB)
                c0 = tgt.mean(axis=0)
            cv_se = tgt.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(m)
            g0 = nonlocal_term(partial, coeffs, measure, 0, x0[None, :], ctx)[0]
            u0 = np.array([c0[i] + dt * float(_driver(coeffs, i, t, x0, c0, z0[i], np.float64(g0[i])))
                           for i in range(m)])
            hv = np.stack([np.full(n, (u0[i] - c0[i]) / dt) for i in range(m)], axis=1)
        elif disp_layer:
            c_a = feat.eval(X_act, layers[j], ccoef)
            z_a = feat.eval(X_act, layers[j], zcoef).reshape(n, m, d)
            g_a = nonlocal_term(partial, coeffs, measure, j, X_act, ctx)
            hv = np.stack([_driver(coeffs, i, t, X_act, c_a, z_a[:, i, :], g_a[:, i]) for i in range(m)], axis=1)
        else:
            hv = (u_vals - cfit) / dt
        path_drivers += dt * hv

    path_values = coeffs.terminal(XT) + path_drivers
    se = path_values.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(m)
    return MeshSolution(grid=grid, k=k, basis=basis, dims=(kx, d, m), layers=layers, u0=u0, std_error=se,
                        cv_std_error=cv_se, x0=x0.copy(), n_paths=n, seed=ensemble.seed,
                        terminal_residual=terminal_residual, coeffs=coeffs, measure=measure, backend=backend,
                        path_values=path_values)


# -- evaluation ------------------------------------------------------------------------

def evaluate_u(solution: MeshSolution, t: float, x, interpolation=None, return_flag=False):
    """u(t, x) for one state (-> (m,)) or a batch (-> (n, m))."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1 and x.size == solution.kx
    vals, flag = solution.evaluate(t, x.reshape(-1, solution.kx), interpolation)
    if single:
        vals, flag = vals[0], bool(flag[0])
    return (vals, flag) if return_flag else vals


def jump_increment_field(solution: MeshSolution, i: int, t: float, x, e, coeffs=None):
    """u_i(t, x + beta(t, x, e)) - u_i(t, x)."""
    coeffs = coeffs or solution.coeffs
    if coeffs is None:
        raise ConfigurationError("jump_increment_field needs the model coefficients")
    x = np.asarray(x, dtype=float)
    e = np.asarray(e, dtype=float)
    single = x.ndim <= 1 and e.ndim <= 1
    xs = x.reshape(-1, solution.kx)
    es = e.reshape(-1, e.shape[-1] if e.ndim else 1)
    xs, es = np.broadcast_arrays(xs[:, None, :], es[:, None, :]) if xs.shape[0] != es.shape[0] else (xs, es)
    xs = xs.reshape(-1, solution.kx)
    es = es.reshape(xs.shape[0], -1)
    moved = xs + np.asarray(coeffs.beta(t, xs, es), dtype=float)
    val = solution.evaluate(t, moved)[0][:, i] - solution.evaluate(t, xs)[0][:, i]
    return float(val[0]) if single else val


# -- residuals and fault injection ---------------------------------------------------------

@dataclass
class ResidualStatistic:
    """Out-of-sample BSDE residual: sqrt(E[sum_j R_j^2] / (T - t0)) per equation."""

    rms: np.ndarray
    per_step: np.ndarray  # (N, m) mean squared residual per step
    n_paths: int
    n_steps: int

    def rows(self):
        for j, row in enumerate(self.per_step):
            for i, v in enumerate(row):
                yield {"step": j, "equation": i, "mean_square": float(v)}


def bsde_residual(solution: MeshSolution, fresh_ensemble: PathEnsemble, coeffs=None, measure=None) -> ResidualStatistic:
    """Pathwise defect of the solution triple along an independent ensemble.

    Per step: u_{j+1}(X_{j+1}) - u_j(X_j) + dt f_j - z_j dB_j - sum_jumps U + dt int U dlambda_k,
    with U the jump increment field of layer j+1 at X_j.
    """
    coeffs = coeffs or solution.coeffs
    measure = measure or solution.measure
    if coeffs is None or measure is None:
        raise ConfigurationError("bsde_residual needs the model coefficients and the jump measure")
    if fresh_ensemble.k != solution.k:
        raise ConfigurationError(f"fresh ensemble k={fresh_ensemble.k} differs from solution k={solution.k}")
    if fresh_ensemble.grid != solution.grid:
        raise ConfigurationError("fresh ensemble grid differs from the solution grid")
    g = solution.grid
    dt, n, m, d = g.dt, fresh_ensemble.n_paths, solution.m, solution.dims[1]
    ctx = _StepContext(coeffs, measure, solution.k)
    feat = solution._features
    total = np.zeros((n, m))
    per_step = np.zeros((g.n_steps, m))
    u_cur = solution.layer_values(g.n_steps, fresh_ensemble.states[:, -1])
    for j in range(g.n_steps - 1, -1, -1):
        t = g.nodes[j]
        X = fresh_ensemble.states[:, j]
        dB = fresh_ensemble.brownian_increments[:, j]
        nxt = solution.layers[j + 1]
        u_next = u_cur
        u_here = solution.layer_values(j, X)
        z = solution.layer_values(j, X, "z").reshape(n, m, d)
        gam = nonlocal_term(solution, coeffs, measure, j, X, ctx)
        f = np.stack([_driver(coeffs, i, t, X, u_here, z[:, i, :], gam[:, i]) for i in range(m)], axis=1)
        R = u_next - u_here + dt * f - np.einsum("nmd,nd->nm", z, dB)
        if not ctx.empty:
            disp = ctx.displacement(t, X)
            R += dt * feat.increment_integral(X, disp, ctx.rule.weights[None, :], nxt, nxt.coef)
            jp, jm = fresh_ensemble.step_jumps(j)
            if jp.size:
                xs = X[jp]
                U = feat.eval(xs + coeffs.beta(t, xs, jm), nxt, nxt.coef) - feat.eval(xs, nxt, nxt.coef)
                np.subtract.at(R, jp, U)
        per_step[j] = (R ** 2).mean(axis=0)
        total += R ** 2
        u_cur = u_here
    rms = np.sqrt(total.mean(axis=0) / (g.T - g.t0))
    return ResidualStatistic(rms=rms, per_step=per_step, n_paths=n, n_steps=g.n_steps)


def shift_layer(solution: MeshSolution, j: int, delta: float, equation: int | None = None) -> MeshSolution:
    """Copy of the solution with u on layer j moved up by ``delta`` (fault injection)."""
    layers = list(solution.layers)
    lay = layers[j]
    coef = lay.coef.copy()
    cols = slice(None) if equation is None else slice(equation, equation + 1)
    if solution.basis.kind == "polynomial":
        coef[0, cols] += delta  # the constant monomial comes first
    else:
        coef[:, cols] += delta  # hats sum to one
    layers[j] = replace(lay, coef=coef)
    return replace(solution, layers=layers)


# -- representation identity cross-check ------------------------------------------------------

def reestimate_jump_field(solution: MeshSolution, fresh_ensemble: PathEnsemble, coeffs=None,
                          mark_degree: int = 3, state_degree: int = 1, equation: int = 0) -> DiagnosticsReport:
    """Regress one-step defects on jump-mark features and compare with the field.

    The defect u_{j+1}(X_{j+1}) - c_j(X_j) - z_j(X_j) dB_j of every step with at
    most one jump is regressed, pooled over steps, on state polynomials plus
    jump-indicator times e^a x^b features (a >= 1). The mark-dependent part of
    the fit estimates U(x, e); it is compared with ``jump_increment_field`` on
    the steps that carry exactly one jump.
    """
    coeffs = coeffs or solution.coeffs
    g = solution.grid
    n, m, d = fresh_ensemble.n_paths, solution.m, solution.dims[1]
    kx = solution.kx
    ell = fresh_ensemble.jump_marks.shape[1]
    counts = fresh_ensemble.jump_counts()
    x_idx = [a for a in itertools.product(range(solution.basis.degree + 1), repeat=kx)
             if sum(a) <= max(solution.basis.degree, 1)]
    e_idx = [(a, b) for a in itertools.product(range(mark_degree + 1), repeat=ell)
             for b in itertools.product(range(state_degree + 1), repeat=kx)
             if 1 <= sum(a) <= mark_degree and sum(b) <= state_degree]
    scale_x = np.maximum(fresh_ensemble.states.std(axis=(0, 1)), 1e-12)
    center_x = fresh_ensemble.states.mean(axis=(0, 1))
    rows_A, rows_y, events = [], [], []
    for j in range(g.n_steps):
        X = fresh_ensemble.states[:, j]
        keep = counts[:, j] <= 1
        dB = fresh_ensemble.brownian_increments[:, j]
        y = (solution.layer_values(j + 1, fresh_ensemble.states[:, j + 1])[:, equation]
             - solution.layer_values(j, X, "c")[:, equation]
             - np.einsum("nd,nd->n", solution.layer_values(j, X, "z").reshape(n, m, d)[:, equation, :], dB))
        e = np.zeros((n, ell))
        jp, jm = fresh_ensemble.step_jumps(j)
        single = counts[jp, j] == 1
        e[jp[single]] = jm[single]
        has = (counts[:, j] == 1).astype(float)
        xs = (X - center_x) / scale_x
        cols = [np.prod(xs ** np.array(a), axis=1) for a in x_idx]
        cols += [has * np.prod(e ** np.array(a), axis=1) * np.prod(xs ** np.array(b), axis=1) for a, b in e_idx]
        A = np.column_stack(cols)
        rows_A.append(A[keep])
        rows_y.append(y[keep])
        sel = keep & (counts[:, j] == 1)
        events.append((j, X[sel], e[sel], A[sel][:, len(x_idx):]))
    A = np.vstack(rows_A)
    y = np.concatenate(rows_y)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ecoef = coef[len(x_idx):]
    est, ref = [], []
    for j, X, e, Ae in events:
        if len(X) == 0:
            continue
        est.append(Ae @ ecoef)
        ref.append(jump_increment_field(solution, equation, g.nodes[j + 1], X, e, coeffs))
    est = np.concatenate(est) if est else np.zeros(0)
    ref = np.concatenate(ref) if ref else np.zeros(0)
    rep = DiagnosticsReport("jump-field-reestimate")
    rms_field = float(np.sqrt(np.mean(ref ** 2))) if ref.size else 0.0
    rms_gap = float(np.sqrt(np.mean((est - ref) ** 2))) if ref.size else 0.0
    ratio = rms_gap / rms_field if rms_field > 0 else (0.0 if rms_gap == 0 else float("inf"))
    rep.values.update(rms_field=rms_field, rms_discrepancy=rms_gap, ratio=ratio, n_events=int(ref.size))
    rep.add("jump-field-agreement", ratio <= 0.05, ratio, None, f"RMS discrepancy / RMS field = {ratio:.4g}")
    return rep


# -- ladder over truncation levels ---------------------------------------------------------

@dataclass
class ConvergenceReport:
    """Per-rung results of a truncation ladder plus monotonicity checks."""

    rows: list
    report: DiagnosticsReport

    @property
    def passed(self):
        return self.report.passed

    def column(self, name):
        return [r.get(name) for r in self.rows]


def _decreasing_at(values, errors, n_sigma=3.0):
    vals = np.asarray(values, dtype=float)
    errs = np.asarray(errors, dtype=float)
    if np.all(vals == 0.0):
        return True, 0.0
    margins = (vals[:-1] - vals[1:]) / np.maximum(n_sigma * np.sqrt(errs[:-1] ** 2 + errs[1:] ** 2), 1e-300)
    return bool(np.all(vals[:-1] - vals[1:] > n_sigma * np.sqrt(errs[:-1] ** 2 + errs[1:] ** 2))), float(margins.min())


def _probe_points(solution, n_probe=21):
    lay = solution.layers[0]
    lo, hi = lay.lo, lay.hi
    kx = solution.kx
    pts = [solution.x0]
    for c in range(kx):
        for v in np.linspace(lo[c], hi[c], n_probe):
            p = solution.x0.copy()
            p[c] = v
            pts.append(p)
    return np.array(pts)


def _field_gap(sol_lo, sol_hi, ens_hi, coeffs, measure, n_field):
    """(mean, se) over paths of (1/(T-t0)) sum_j dt int |U_hi - U_lo 1{|e|>=1/k_lo}|^2 dlambda_{k_hi}."""
    g = sol_hi.grid
    rule = levy.quadrature_rule(measure, sol_hi.k)
    mask = (np.linalg.norm(rule.nodes, axis=1) >= 1.0 / sol_lo.k).astype(float)
    n = min(n_field, ens_hi.n_paths)
    acc = np.zeros(n)
    for j in range(g.n_steps):
        t = g.nodes[j]
        X = ens_hi.states[:n, j]
        if coeffs.beta_state_free:
            disp = np.asarray(coeffs.beta(t, np.zeros((1, 1, sol_hi.kx)), rule.nodes[None]), dtype=float)
        else:
            disp = np.asarray(coeffs.beta(t, X[:, None, :], rule.nodes[None]), dtype=float)
        lh, ll = sol_hi.layers[j + 1], sol_lo.layers[j + 1]
        Uh = sol_hi._features.increment_values(X, disp, lh, lh.coef)
        Ul = sol_lo._features.increment_values(X, disp, ll, ll.coef) * mask[None, :, None]
        acc += g.dt * np.einsum("q,nqm->n", rule.weights, (Uh - Ul) ** 2)
    acc /= g.T - g.t0
    return float(acc.mean()), float(acc.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def ladder_study(coeffs, measure, ks, grid, x0, n_paths, seed, basis=None, *, n_field=20000,
                 workers=1, backend=None, progress=None) -> ConvergenceReport:
    """Solve at every truncation level on coupled ensembles and compare neighbours.

    All rungs share the Brownian path and thin one jump reservoir drawn at
    ``max(ks)``. Gap columns compare rung r with rung r - 1:

    * ``forward_gap``: E[sup_s |X^(k_r) - X^(k_{r-1})|^2];
    * ``solution_gap``: max over probe points of |u^(k_r)(t0, .) - u^(k_{r-1})(t0, .)|,
      with the standard error of the coupled pathwise difference at x0;
    * ``u_field_gap``: time-averaged lambda_{k_r}-L2 distance of the jump fields,
      the lower rung's field being zero below its cutoff.
    """
    ks = [int(k) for k in ks]
    if len(ks) < 3 or any(b <= a for a, b in zip(ks, ks[1:])):
        raise ConfigurationError("ladder needs at least three strictly increasing truncation levels")
    basis = basis or RegressionBasis()
    top = ks[-1]
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    rows, ens, sols = [], [], []
    for k in ks:
        e = simulate_forward(coeffs, measure, k, x0, grid, n_paths, seed, reservoir_k=top, workers=workers)
        s = solve_backward(coeffs, measure, k, grid, e, basis, backend=backend)
        ens.append(e)
        sols.append(s)
        rows.append({"k": k, "small_jump_second_moment": levy.small_jump_second_moment(measure, k),
                     "u0": float(s.u0[0]), "u0_se": float(s.std_error[0])})
        if progress:
            progress(k)
    probes = _probe_points(sols[0])
    for r in range(1, len(ks)):
        a, b = ens[r - 1], ens[r]
        sup = np.max(np.sum((b.states - a.states) ** 2, axis=2), axis=1)
        sa, sb = sols[r - 1], sols[r]
        diff = np.abs(sb.evaluate(grid.t0, probes)[0] - sa.evaluate(grid.t0, probes)[0]).max()
        D = sb.path_values[:, 0] - sa.path_values[:, 0]
        fg, fg_se = _field_gap(sa, sb, b, coeffs, measure, n_field)
        rows[r].update({
            "forward_gap": float(sup.mean()), "forward_gap_se": float(sup.std(ddof=1) / np.sqrt(n_paths)),
            "solution_gap": float(diff), "solution_gap_se": float(D.std(ddof=1) / np.sqrt(n_paths)),
            "u0_gap": float(abs(sb.u0[0] - sa.u0[0])),
            "u_field_gap": fg, "u_field_gap_se": fg_se,
        })
    rep = DiagnosticsReport("ladder")
    for col in ("forward_gap", "solution_gap", "u_field_gap"):
        vals = [row[col] for row in rows[1:]]
        errs = [row[col + "_se"] for row in rows[1:]]
        ok, margin = _decreasing_at(vals, errs)
        rep.add(f"{col}-decreasing", ok, margin, None if ok else {"values": vals, "se": errs},
                "strictly decreasing at 3 sigma" + (" (all zero)" if np.all(np.asarray(vals) == 0) else ""))
    rep.values["ks"] = ks
    return ConvergenceReport(rows, rep)


# -- continuity and growth ----------------------------------------------------------------------

def continuity_modulus_probe(solution: MeshSolution, rho, pairs, M2: float, *, kappas=None, t=None,
                             envelope=None, equation: int = 0, n_sigma: float = 3.0) -> DiagnosticsReport:
    """Fit |u(t,x) - u(t,x')|^2 <= rho(M2 |dx|^2 (1 + |dx|^2)) C (1 + |x|^kappa).

    For each kappa on the grid the smallest admissible C is the largest
    observed ratio; the reported pair (C, kappa) minimizes C (ties go to the
    smaller kappa). With ``envelope=(C, kappa)`` the given envelope is checked
    instead, each pair being allowed ``n_sigma`` Monte Carlo standard errors of
    its left side (from the continuation-regression covariance).
    """
    t = solution.grid.t0 if t is None else t
    xa, xb = (np.asarray(p, dtype=float).reshape(-1, solution.kx) for p in pairs)
    ua = solution.evaluate(t, xa)[0][:, equation]
    ub = solution.evaluate(t, xb)[0][:, equation]
    du = ua - ub
    lhs = du ** 2
    dist2 = np.sum((xa - xb) ** 2, axis=1)
    base = np.asarray(rho(M2 * dist2 * (1.0 + dist2)), dtype=float)
    # standard error of du from the layer covariance
    lay = solution.layers[solution._time_weights(t)[0][0]]
    if lay.cov is not None:
        v = solution._features.design(xa, lay) - solution._features.design(xb, lay)
        var = np.einsum("nb,bc,nc->n", v, lay.cov[equation], v)
        sd_du = np.sqrt(np.maximum(var, 0.0))
    else:
        sd_du = np.zeros_like(du)
    sd_lhs = 2.0 * np.abs(du) * sd_du + sd_du ** 2
    norm_x = np.linalg.norm(xa, axis=1)
    rep = DiagnosticsReport("continuity-modulus")
    if envelope is not None:
        C, kappa = envelope
        bound = C * base * (1.0 + norm_x ** kappa)
        excess = (lhs - bound) / np.where(sd_lhs > 0, sd_lhs, np.inf)
        excess = np.where((lhs > bound) & (sd_lhs == 0), np.inf, np.where(lhs <= bound, 0.0, excess))
        worst = int(np.argmax(excess))
        ok = bool(np.all(excess <= n_sigma))
        rep.add("envelope-holds", ok, float(excess[worst]),
                None if ok else {"x": xa[worst].tolist(), "x_prime": xb[worst].tolist()},
                f"worst excess {excess[worst]:.3g} sigma")
        rep.values.update(C=float(C), kappa=float(kappa))
        return rep
    kappas = np.arange(0.0, 4.01, 0.5) if kappas is None else np.asarray(kappas, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        fits = []
        for kappa in kappas:
            denom = base * (1.0 + norm_x ** kappa)
            r = np.where(denom > 0, lhs / np.where(denom > 0, denom, 1.0), np.where(lhs > 0, np.inf, 0.0))
            fits.append(float(r.max()) if r.size else 0.0)
    fits = np.array(fits)
    best = int(np.argmin(fits))  # argmin returns the first, i.e. smallest kappa, on ties
    C, kappa = float(fits[best]), float(kappas[best])
    rep.values.update(C=C, kappa=kappa, fits=dict(zip(kappas.tolist(), fits.tolist())),
                      max_sd_lhs=float(sd_lhs.max()) if sd_lhs.size else 0.0, M2=float(M2))
    rep.add("envelope-finite", np.isfinite(C), C, None, f"C={C:.4g}, kappa={kappa:g}")
    return rep


def growth_envelope(solution: MeshSolution, t=None, box=None, powers=(0, 1, 2, 3, 4), n_grid=201,
                    stability=1.5, equation: int = 0) -> DiagnosticsReport:
    """Fit |u(t,x)| <= C (1 + |x|^p) on the design box and check it on the doubled box.

    The reported power is the smallest p whose constant grows by at most
    ``stability`` when the box doubles.
    """
    t = solution.grid.t0 if t is None else t
    lay = solution.layers[solution._time_weights(t)[0][0]]
    lo, hi = (lay.lo, lay.hi) if box is None else (np.asarray(box[0], float), np.asarray(box[1], float))
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)

    def consts(scale):
        axes = [np.linspace(mid[c] - scale * half[c], mid[c] + scale * half[c], n_grid) for c in range(solution.kx)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, solution.kx) if solution.kx <= 2 \
            else np.vstack([np.where(np.arange(solution.kx) == c, a[:, None], mid) for c, a in enumerate(axes)])
        u = np.abs(solution.evaluate(t, pts)[0][:, equation])
        r = np.linalg.norm(pts, axis=1)
        return np.array([float(np.max(u / (1.0 + r ** p))) for p in powers])

    c1, c2 = consts(1.0), consts(2.0)
    ratio = np.where(c1 > 0, c2 / np.where(c1 > 0, c1, 1.0), 1.0)
    ok = np.flatnonzero(ratio <= stability)
    rep = DiagnosticsReport("growth-envelope")
    rep.values.update(C=dict(zip(powers, c1.tolist())), C_doubled=dict(zip(powers, c2.tolist())))
    if ok.size:
        p = powers[int(ok[0])]
        rep.values.update(p=p, C_fit=float(c1[ok[0]]), ratio=float(ratio[ok[0]]))
        rep.add("polynomial-growth", True, float(ratio[ok[0]]), None, f"|u| <= {c1[ok[0]]:.4g}(1+|x|^{p})")
    else:
        rep.add("polynomial-growth", False, float(ratio.min()), None, "no power stable under box doubling")
    return rep
