"""Model coefficient bundle, continuity moduli and assumption checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import levy, streams
from .diagnostics import DiagnosticsReport
from .errors import ConfigurationError, ModelError
from .registry import Dims

_RTOL = 1e-12  # rounding slack in pointwise inequality checks


# -- moduli -------------------------------------------------------------------

@dataclass(frozen=True)
class ConcaveModulus:
    """A concave continuity modulus rho with a declared Osgood property."""

    rho: Callable = field(repr=False)
    name: str
    osgood_flag: bool
    params: dict = field(default_factory=dict)

    def __call__(self, u):
        return self.rho(np.asarray(u, dtype=float))

    def spec(self) -> dict:
        return {"name": self.name, **self.params}


def linear_modulus(constant: float = 1.0) -> ConcaveModulus:
    """rho(u) = constant * u, i.e. Lipschitz with constant ** (1/p)."""
    c = float(constant)
    return ConcaveModulus(lambda u: c * u, "linear", True, {"constant": c})


def log_modulus(constant: float = 1.0, delta: float = np.exp(-1.0)) -> ConcaveModulus:
    """u log(1/u) on [0, delta], continued by its tangent line above delta."""
    c, d = float(constant), float(delta)
    if not 0.0 < d <= np.exp(-1.0):
        raise ConfigurationError("log modulus needs 0 < delta <= 1/e")
    val_d, slope_d = d * np.log(1.0 / d), np.log(1.0 / d) - 1.0

    def rho(u):
        u = np.asarray(u, dtype=float)
        small = np.clip(u, 1e-300, d)
        inner = np.where(u > 0, small * np.log(1.0 / small), 0.0)
        return c * np.where(u <= d, inner, val_d + slope_d * (u - d))
    return ConcaveModulus(rho, "log", True, {"constant": c, "delta": d})


def power_modulus(exponent: float, constant: float = 1.0) -> ConcaveModulus:
    """constant * u**exponent; Osgood only when exponent == 1."""
    a, c = float(exponent), float(constant)
    if not 0.0 < a <= 1.0:
        raise ConfigurationError("power modulus exponent must lie in (0, 1]")
    return ConcaveModulus(lambda u: c * np.power(np.maximum(u, 0.0), a), "power", a == 1.0,
                          {"exponent": a, "constant": c})


MODULI = {"linear": linear_modulus, "log": log_modulus, "power": power_modulus}


def modulus_from_spec(spec) -> ConcaveModulus:
    if isinstance(spec, ConcaveModulus):
        return spec
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in MODULI:
        raise ConfigurationError(f"unknown modulus {name!r}; known: {sorted(MODULI)}")
    return MODULI[name](**spec)


def check_modulus(rho: ConcaveModulus, upper: float = 100.0, n: int = 400) -> DiagnosticsReport:
    """Sampled checks of rho(0)=0, positivity, monotonicity and midpoint concavity."""
    rep = DiagnosticsReport(f"modulus:{rho.name}")
    grid = np.concatenate([[0.0], np.geomspace(1e-12, upper, n)])
    vals = rho(grid)
    rep.add("rho-zero", abs(float(vals[0])) == 0.0, float(abs(vals[0])), {"u": 0.0})
    pos = vals[1:] > 0
    rep.add("rho-positive", bool(pos.all()), float((~pos).sum()),
            None if pos.all() else {"u": float(grid[1:][~pos][0])})
    dif = np.diff(vals)
    mono = dif >= -_RTOL * np.abs(vals[1:])
    rep.add("rho-nondecreasing", bool(mono.all()), float((~mono).sum()),
            None if mono.all() else {"u": float(grid[1:][~mono][0])})
    a, b = np.meshgrid(grid[::8], grid[::8])
    mid = rho(0.5 * (a + b))
    avg = 0.5 * (rho(a) + rho(b))
    conc = mid >= avg - _RTOL * np.abs(avg) - 1e-300
    witness = None
    if not conc.all():
        idx = np.argwhere(~conc)[0]
        witness = {"a": float(a[tuple(idx)]), "b": float(b[tuple(idx)])}
    rep.add("rho-midpoint-concave", bool(conc.all()), float((~conc).sum()), witness)
    return rep


# -- coefficient bundle ---------------------------------------------------------

@dataclass
class ModelCoefficients:
    """Everything that defines the forward dynamics and the nonlinear system.

    Callables follow the broadcasting conventions of :mod:`levyipde.registry`.
    ``moduli`` maps a slot name (``b``, ``sigma``, ``beta``, ``gamma``, ``g``,
    ``h``) to its declared modulus; undeclared slots default to the Lipschitz
    modulus ``C**2 u``.
    """

    dims: Dims
    b: Callable
    sigma: Callable
    beta: Callable
    gamma: Sequence[Callable]
    g: Sequence[Callable]
    h: Sequence[Callable]
    lipschitz_const: float = 1.0
    horizon: float = 1.0
    moduli: dict = field(default_factory=dict)

    def __post_init__(self):
        m = self.dims.equations
        for name in ("gamma", "g", "h"):
            if len(getattr(self, name)) != m:
                raise ConfigurationError(f"{name}: expected {m} entries, got {len(getattr(self, name))}")
        self.gamma, self.g, self.h = list(self.gamma), list(self.g), list(self.h)

    @property
    def beta_state_free(self) -> bool:
        return bool(getattr(self.beta, "state_free", False))

    @property
    def sigma_state_free(self) -> bool:
        return bool(getattr(self.sigma, "state_free", False))

    def gamma_state_free(self, i: int) -> bool:
        return bool(getattr(self.gamma[i], "state_free", False))

    def driver_uses_q(self, i: int) -> bool:
        return bool(getattr(self.h[i], "uses_q", True))

    def driver_uses_z(self, i: int) -> bool:
        return bool(getattr(self.h[i], "uses_z", True))

    def modulus(self, slot: str, p: float = 2.0) -> ConcaveModulus:
        if slot in self.moduli:
            return modulus_from_spec(self.moduli[slot])
        return linear_modulus(self.lipschitz_const ** p)

    def terminal(self, x) -> np.ndarray:
        """All terminal values at ``x``: (..., kx) -> (..., m)."""
        return np.stack([np.asarray(gi(x), dtype=float) for gi in self.g], axis=-1)


def effective_driver(coeffs: ModelCoefficients, i: int, t: float, x, y, z, zeta: Callable,
                     k: float, measure: levy.LevyMeasure, rtol: float = 1e-8) -> float:
    """h_i(t, x, y, z, q) with q the lambda_k-integral of gamma_i(t, x, .) * zeta."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))

    def integrand(e):
        return np.asarray(coeffs.gamma[i](t, x[None, :], e), dtype=float) * np.asarray(zeta(e), dtype=float)

    q = levy.quad_integrate(measure, k, integrand, rtol=rtol)
    val = float(np.asarray(coeffs.h[i](t, x, y, z, np.float64(q))))
    if not np.isfinite(val):
        raise ModelError(f"driver {i} returned {val} at t={t}, x={x.tolist()}, y={y.tolist()}, "
                         f"z={z.tolist()}, q={q}")
    return val


# -- Mao-type tests ---------------------------------------------------------------

def _pairs(pairs):
    xa, xb = pairs
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    if xa.ndim == 1:
        xa, xb = xa[:, None], xb[:, None]
    return xa, xb


def _flat(v, n):
    return np.asarray(v, dtype=float).reshape(n, -1)


def _witness(xa, xb, idx):
    return {"x": xa[idx].tolist(), "x_prime": xb[idx].tolist()}


def _bound(rho, p, dist):
    return np.power(np.maximum(rho(dist ** p), 0.0), 1.0 / p)


def mao_distance_test(fn: Callable, rho: ConcaveModulus, p: float, pairs, name: str = "mao") -> DiagnosticsReport:
    """Check |f(x) - f(x')| <= rho(|x - x'|^p)^(1/p) on every pair.

    ``fn`` maps an (n, kx) array of states to n values (any trailing shape,
    compared in the Euclidean norm). Shared arguments such as (t, y, z, q)
    are closed over by ``fn``.
    """
    if p < 2:
        raise ConfigurationError("Mao order p must be at least 2")
    xa, xb = _pairs(pairs)
    n = xa.shape[0]
    diff = np.linalg.norm(_flat(fn(xa), n) - _flat(fn(xb), n), axis=1)
    bound = _bound(rho, p, np.linalg.norm(xa - xb, axis=1))
    rep = DiagnosticsReport(name)
    _record(rep, name, diff, bound, xa, xb)
    return rep


def _record(rep, name, lhs, bound, xa, xb):
    ok = lhs <= bound * (1.0 + _RTOL) + 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, lhs / np.where(bound > 0, bound, 1.0), np.where(lhs > 0, np.inf, 0.0))
    worst = int(np.argmax(ratio)) if ratio.size else 0
    passed = bool(ok.all())
    witness = None
    if not passed:
        bad = np.flatnonzero(~ok)
        worst = int(bad[np.argmax(ratio[bad])])
        witness = _witness(xa, xb, worst)
    rep.add(name, passed, float(ratio[worst]) if ratio.size else 0.0, witness,
            f"{int((~ok).sum())}/{len(ok)} pairs violate")
    return ok


def one_sided_mao_test(fn: Callable, rho: ConcaveModulus, p: float, pairs, name: str = "one-sided-mao") -> DiagnosticsReport:
    """Signed check <(x-x')/|x-x'|, f(x)-f(x')> <= rho(|x-x'|^p)^(1/p).

    ``fn`` must be R^kx-valued. The report also carries an ``implication``
    check: every pair passing the two-sided inequality passes the signed one
    (Cauchy-Schwarz); counterexamples are counted.
    """
    if p < 2:
        raise ConfigurationError("Mao order p must be at least 2")
    xa, xb = _pairs(pairs)
    n = xa.shape[0]
    df = _flat(fn(xa), n) - _flat(fn(xb), n)
    dx = xa - xb
    if df.shape[1] != dx.shape[1]:
        raise ConfigurationError("one-sided test needs a function with values in the state space")
    dist = np.linalg.norm(dx, axis=1)
    unit = dx / np.where(dist > 0, dist, 1.0)[:, None]
    signed = np.einsum("ij,ij->i", unit, df)
    bound = _bound(rho, p, dist)
    rep = DiagnosticsReport(name)
    ok_signed = _record(rep, name, np.maximum(signed, 0.0), bound, xa, xb)
    ok_two = np.linalg.norm(df, axis=1) <= bound * (1.0 + _RTOL) + 1e-300
    counter = ok_two & ~ok_signed
    rep.add("implication", not counter.any(), float(counter.sum()),
            _witness(xa, xb, int(np.flatnonzero(counter)[0])) if counter.any() else None,
            "two-sided pass implies signed pass")
    rep.values["counterexamples"] = int(counter.sum())
    return rep


# -- Bihari comparison -------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def _log_integral(rho, lo, hi):
    """int_{e^lo}^{e^hi} ds / rho(s), integrated in log s with Gauss-Legendre panels."""
    if hi == lo:
        return 0.0
    a, b = (lo, hi) if hi > lo else (hi, lo)
    n_panels = max(4, int(np.ceil(b - a)) * 2)
    edges = np.linspace(a, b, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    v = mid[:, None] + half[:, None] * _GL_X[None, :]
    s = np.exp(v)
    total = float(np.sum(half[:, None] * _GL_W[None, :] * s / rho(s)))
    return total if hi > lo else -total


def osgood_integral(rho: ConcaveModulus, lo: float, hi: float = 1.0) -> float:
    """int_lo^hi du / rho(u); diverges as lo -> 0 exactly for Osgood moduli."""
    return _log_integral(rho, np.log(lo), np.log(hi))


def bihari_envelope(a0: float, c: float, rho: ConcaveModulus, t: float) -> float:
    """Solution y(t) of y' = c rho(y), y(0) = a0.

    Inverts G(y) = int_{a0}^{y} ds / rho(s) = c t numerically, with G computed
    in log coordinates.
    """
    if a0 < 0 or c < 0 or t < 0:
        raise ConfigurationError("bihari_envelope needs a0, c, t >= 0")
    if a0 == 0.0:
        if rho.osgood_flag:
            return 0.0
        raise ConfigurationError(f"modulus {rho.name!r} is not declared Osgood; "
                                 "the envelope from a0 = 0 is not unique")
    target = c * t
    if target == 0.0:
        return float(a0)
    la = np.log(a0)

    def resid(v):
        return _log_integral(rho, la, v) - target

    hi = la + 1.0
    while resid(hi) < 0:
        hi = la + 2.0 * (hi - la)
        if hi - la > 1400:
            return float("inf")  # blow-up before t
    v = optimize.brentq(resid, la, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(np.exp(v))


# -- assumption validation ------------------------------------------------------------

@dataclass(frozen=True)
class SamplePlan:
    """How the universally quantified assumptions are probed."""

    n_pairs: int = 10_000
    box: tuple = (-5.0, 5.0)
    yzq_box: tuple = (-5.0, 5.0)
    mark_radius: float = 1.0
    p_values: tuple = (2.0,)
    t0: float = 0.0
    near_origin: int = 64
    seed: int = 0


def _sample_marks(rng, n, ell, radius):
    r = np.exp(rng.uniform(np.log(1e-8 * radius), np.log(radius), size=n))
    r[: max(1, n // 50)] = radius
    if ell == 1:
        return (r * rng.choice([-1.0, 1.0], size=n))[:, None]
    d = rng.standard_normal((n, ell))
    return r[:, None] * d / np.linalg.norm(d, axis=1, keepdims=True)


def _state_pairs(rng, n, kx, box, near_origin):
    lo, hi = box
    n_far = n // 2
    n_near = n - n_far
    xa = rng.uniform(lo, hi, size=(n, kx))
    xb = np.empty_like(xa)
    xb[:n_far] = rng.uniform(lo, hi, size=(n_far, kx))
    step = np.exp(rng.uniform(np.log(1e-8), np.log(1.0), size=n_near))
    d = rng.standard_normal((n_near, kx))
    xb[n_far:] = np.clip(xa[n_far:] + step[:, None] * d / np.linalg.norm(d, axis=1, keepdims=True), lo, hi)
    # grid pairs straddling and touching the origin, where non-Lipschitz behaviour hides
    g = np.concatenate([-np.geomspace(1.0, 1e-10, near_origin // 2), [0.0], np.geomspace(1e-10, 1.0, near_origin // 2)])
    ga, gb = np.meshgrid(g, g)
    grid_a = np.zeros((ga.size, kx))
    grid_b = np.zeros((ga.size, kx))
    grid_a[:, 0], grid_b[:, 0] = ga.ravel(), gb.ravel()
    return np.vstack([xa, grid_a]), np.vstack([xb, grid_b])


def validate_assumptions(coeffs: ModelCoefficients, sample_plan: SamplePlan | None = None) -> DiagnosticsReport:
    """Witness search for the jump bounds, driver Lipschitz and Mao conditions.

    Every check reports its worst observed ratio (1 is the boundary) and, on
    failure, a witnessing point or pair.
    """
    plan = sample_plan or SamplePlan()
    rng = streams.substream(plan.seed, streams.VALIDATION)
    dims = coeffs.dims
    kx, d, m, ell = dims.state, dims.brownian, dims.equations, dims.marks
    C = float(coeffs.lipschitz_const)
    T0, T = plan.t0, coeffs.horizon
    n = plan.n_pairs
    rep = DiagnosticsReport("assumptions")

    t = rng.uniform(T0, T, size=n)
    x = rng.uniform(*plan.box, size=(n, kx))
    e = _sample_marks(rng, n, ell, plan.mark_radius)
    cap = C * np.minimum(1.0, np.linalg.norm(e, axis=1))

    def jump_bound(name, vals):
        vals = np.asarray(vals, dtype=float).reshape(n, -1)
        size = np.linalg.norm(vals, axis=1)
        ratio = size / cap
        ok = size <= cap * (1.0 + _RTOL)
        i = int(np.argmax(ratio))
        rep.add(name, bool(ok.all()), float(ratio[i]),
                None if ok.all() else {"t": float(t[i]), "x": x[i].tolist(), "e": e[i].tolist()},
                f"sup |.|/(C(1^|e|)) with C={C}")

    jump_bound("beta-jump-bound", coeffs.beta(t[:, None], x, e))
    for i in range(m):
        jump_bound(f"gamma-jump-bound[{i}]", coeffs.gamma[i](t, x, e))

    # driver Lipschitz in (y, z, q), uniformly in (t, x)
    ya, yb = (rng.uniform(*plan.yzq_box, size=(n, m)) for _ in range(2))
    za, zb = (rng.uniform(*plan.yzq_box, size=(n, d)) for _ in range(2))
    qa, qb = (rng.uniform(*plan.yzq_box, size=n) for _ in range(2))
    # growth probes along each axis: superlinear drivers fail here whatever C is
    scales = np.geomspace(1.0, 1e6, 13)
    extra = []
    for axis in range(m + d + 1):
        v = np.zeros((scales.size, m + d + 1))
        v[:, axis] = scales
        extra.append(v)
    extra = np.vstack(extra)
    ne = extra.shape[0]
    ya = np.vstack([ya, extra[:, :m]]); yb = np.vstack([yb, np.zeros((ne, m))])
    za = np.vstack([za, extra[:, m:m + d]]); zb = np.vstack([zb, np.zeros((ne, d))])
    qa = np.concatenate([qa, extra[:, -1]]); qb = np.concatenate([qb, np.zeros(ne)])
    th = np.concatenate([t, np.full(ne, T0)])
    xh = np.vstack([x, np.zeros((ne, kx))])
    dist = (np.linalg.norm(ya - yb, axis=1) + np.linalg.norm(za - zb, axis=1) + np.abs(qa - qb))
    for i in range(m):
        ha = np.asarray(coeffs.h[i](th[:, None], xh, ya, za, qa), dtype=float).reshape(-1)
        hb = np.asarray(coeffs.h[i](th[:, None], xh, yb, zb, qb), dtype=float).reshape(-1)
        lhs = np.abs(ha - hb)
        ok = lhs <= C * dist * (1.0 + _RTOL) + 1e-300
        ratio = np.where(dist > 0, lhs / (C * np.where(dist > 0, dist, 1.0)), 0.0)
        j = int(np.argmax(ratio))
        rep.add(f"driver-lipschitz[{i}]", bool(ok.all()), float(ratio[j]),
                None if ok.all() else {"y": [ya[j].tolist(), yb[j].tolist()], "z": [za[j].tolist(), zb[j].tolist()],
                                       "q": [float(qa[j]), float(qb[j])]},
                f"|dh| <= C(|dy|+|dz|+|dq|) with C={C}")

    # Mao conditions in x, with shared (t, e, y, z, q)
    xa, xb = _state_pairs(rng, n, kx, plan.box, plan.near_origin)
    npair = xa.shape[0]
    ts = rng.uniform(T0, T, size=npair)[:, None]
    es = _sample_marks(rng, npair, ell, plan.mark_radius)
    ys = rng.uniform(*plan.yzq_box, size=(npair, m))
    zs = rng.uniform(*plan.yzq_box, size=(npair, d))
    qs = rng.uniform(*plan.yzq_box, size=npair)
    slots = [("b", lambda xx: coeffs.b(ts, xx)),
             ("sigma", lambda xx: coeffs.sigma(ts, xx)),
             ("beta", lambda xx: coeffs.beta(ts, xx, es))]
    for i in range(m):
        slots.append((f"gamma[{i}]", lambda xx, i=i: coeffs.gamma[i](ts[:, 0], xx, es)))
        slots.append((f"g[{i}]", lambda xx, i=i: coeffs.g[i](xx)))
        slots.append((f"h[{i}]", lambda xx, i=i: coeffs.h[i](ts, xx, ys, zs, qs)))
    for p in plan.p_values:
        for slot, fn in slots:
            rho = coeffs.modulus(slot.split("[")[0], p)
            sub = mao_distance_test(fn, rho, p, (xa, xb), name=f"mao-{slot}-p{p:g}")
            rep.extend(sub)
    for slot in sorted({s.split("[")[0] for s, _ in slots}):
        rho = coeffs.modulus(slot)
        for chk in check_modulus(rho).checks:
            rep.add(f"modulus-{slot}:{chk.name}", chk.passed, chk.worst_ratio, chk.witness, chk.detail)
    return rep
