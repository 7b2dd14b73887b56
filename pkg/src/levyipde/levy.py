"""Levy measures with infinite mass at the origin, their truncations, and quadrature.

A measure ``lam`` on ``E = R^l \\ {0}`` is described by its Lebesgue density.
Truncation level ``k`` keeps only marks with ``|e| >= 1/k``; the truncated
measure has finite mass and is sampled as a compound Poisson mark law.

Integrals against the truncated measure are computed in polar form: Gauss-Legendre
panels on log-spaced radial shells between ``1/k`` and the support radius, times
a direction rule (the two signs in 1-D, equally spaced angles in 2-D, the
coordinate cross in higher dimensions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, interpolate

from .diagnostics import DiagnosticsReport
from .errors import ConfigurationError, QuadratureError

GAUSS_ORDER = 8
MAX_REFINEMENTS = 10


def _sphere_area(dim: int) -> float:
    return 2.0 * math.pi ** (dim / 2.0) / math.gamma(dim / 2.0)


def _check_k(k) -> int:
    if int(k) != k or k < 1:
        raise ConfigurationError(f"truncation index must be an integer >= 1, got {k!r}")
    return int(k)


@dataclass(frozen=True, eq=False)
class LevyMeasure:
    """A sigma-finite jump measure given by its density on ``R^dim_e \\ {0}``.

    Attributes
    ----------
    dim_e:
        Mark-space dimension.
    density:
        Vectorized density, ``(..., dim_e) -> (...)``, nonnegative.
    support_radius:
        Outer bound of the support (``inf`` for unbounded).
    mass_above, second_moment_below:
        Optional closed forms ``r -> lam(|e| >= r)`` and ``r -> int_{|e|<r} |e|^2 lam``.
        When present they are used directly and serve as oracles for quadrature.
    radial_quantile:
        Optional closed-form inverse CDF ``(u, r_lo) -> r`` of the radial law
        restricted to ``[r_lo, support_radius]``; identical for every direction.
    isotropic:
        Density depends on ``|e|`` only. Required for ``dim_e > 1``.
    spec:
        Serializable description (scenario ``measure`` block).
    """

    dim_e: int
    density: Callable[[np.ndarray], np.ndarray]
    support_radius: float = math.inf
    name: str = "custom"
    mass_above: Callable[[float], float] | None = None
    second_moment_below: Callable[[float], float] | None = None
    radial_quantile: Callable[[np.ndarray, float], np.ndarray] | None = None
    isotropic: bool = False
    spec: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.dim_e < 1:
            raise ConfigurationError("dim_e must be >= 1")
        if self.dim_e > 1 and not self.isotropic:
            raise ConfigurationError("marks of dimension > 1 require an isotropic density")
        if not self.support_radius > 0:
            raise ConfigurationError("support_radius must be positive")

    # radial decomposition: one entry per direction family
    def sides(self):
        if self.dim_e == 1:
            return [
                (1.0, lambda r: self.density(np.asarray(r)[..., None])),
                (-1.0, lambda r: self.density(-np.asarray(r)[..., None])),
            ]
        area = _sphere_area(self.dim_e)
        unit = np.zeros(self.dim_e)
        unit[0] = 1.0

        def radial(r):
            r = np.asarray(r, dtype=float)
            return area * r ** (self.dim_e - 1) * self.density(r[..., None] * unit)

        return [(None, radial)]

    def __repr__(self):
        return f"LevyMeasure({self.name}, dim_e={self.dim_e}, support_radius={self.support_radius})"


@dataclass(frozen=True)
class JumpTrain:
    """Jump times and marks of one path of the truncated Poisson measure."""

    times: np.ndarray
    marks: np.ndarray
    k: int

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class QuadratureRule:
    """Fixed nodes/weights for integrals against a truncated measure."""

    nodes: np.ndarray  # (Q, dim_e)
    weights: np.ndarray  # (Q,), density already folded in
    k: int
    n_panels: int

    def __len__(self):
        return len(self.weights)

    def integrate(self, integrand):
        if len(self.weights) == 0:
            probe = np.asarray(integrand(np.zeros((1, self.nodes.shape[1]))))
            return np.zeros(probe.shape[1:])
        vals = np.asarray(integrand(self.nodes), dtype=float)
        bad = ~np.isfinite(vals)
        if bad.any():
            q = int(np.argwhere(bad)[0][0])
            raise QuadratureError(f"integrand is not finite at node e={self.nodes[q].tolist()} (k={self.k})")
        return np.tensordot(self.weights, vals, axes=(0, 0))


# ---------------------------------------------------------------------------
# constructors


def power_law(alpha: float, scale: float = 1.0, radius: float = 1.0, dim_e: int = 1) -> LevyMeasure:
    """Reference family ``scale * |e|^(-dim_e - alpha)`` on ``0 < |e| <= radius``.

    In 1-D this is ``scale * |e|^(-1-alpha)``: symmetric, infinite total mass for
    every ``alpha > 0``, and ``int (1 ^ |e|^2)`` finite for ``alpha < 2``.
    """
    if not 0.0 < alpha < 2.0:
        raise ConfigurationError(f"power-law alpha must lie in (0, 2), got {alpha}")
    if scale <= 0:
        raise ConfigurationError("power-law scale must be positive")
    radius = float(radius)
    c = scale * _sphere_area(dim_e)  # radial density is c * r^(-1-alpha)
    r_neg = 0.0 if math.isinf(radius) else radius ** -alpha

    def density(e):
        e = np.asarray(e, dtype=float)
        r = np.sqrt(np.sum(e * e, axis=-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            val = scale * r ** (-dim_e - alpha)
        return np.where((r > 0) & (r <= radius), val, 0.0)

    def mass_above(r_lo):
        if r_lo >= radius:
            return 0.0
        return c / alpha * (r_lo ** -alpha - r_neg)

    def second_moment_below(r_hi):
        r_hi = min(r_hi, radius)
        return c / (2.0 - alpha) * r_hi ** (2.0 - alpha)

    def radial_quantile(u, r_lo):
        a = r_lo ** -alpha
        return (a - np.asarray(u) * (a - r_neg)) ** (-1.0 / alpha)

    return LevyMeasure(
        dim_e=dim_e,
        density=density,
        support_radius=radius,
        name=f"power-law(alpha={alpha}, scale={scale}, radius={radius})",
        mass_above=mass_above,
        second_moment_below=second_moment_below,
        radial_quantile=radial_quantile,
        isotropic=True,
        spec={"kind": "power-law", "alpha": alpha, "scale": scale, "radius": radius, "dim_e": dim_e},
    )


def from_table(radii, values, values_negative=None) -> LevyMeasure:
    """1-D measure from a sampled density on the positive (and negative) half-line.

    The density is interpolated linearly in log-log coordinates between grid
    radii, extended toward the origin with the power-law slope of the first two
    grid points, and is zero beyond the last radius.
    """
    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    neg = values if values_negative is None else np.asarray(values_negative, dtype=float)
    if radii.ndim != 1 or len(radii) < 2 or np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise ConfigurationError("table radii must be positive and strictly increasing (>= 2 points)")
    if values.shape != radii.shape or neg.shape != radii.shape:
        raise ConfigurationError("table values must match the radii grid")
    if np.any(values <= 0) or np.any(neg <= 0):
        raise ConfigurationError("table density values must be positive on the grid")
    lr = np.log(radii)
    tables = {1.0: np.log(values), -1.0: np.log(neg)}
    r_max = float(radii[-1])

    def side_density(r, logv):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            lrr = np.log(np.where(r > 0, r, 1.0))
        slope = (logv[1] - logv[0]) / (lr[1] - lr[0])
        inner = np.interp(lrr, lr, logv)
        below = logv[0] + slope * (lrr - lr[0])
        out = np.exp(np.where(r < radii[0], below, inner))
        return np.where((r > 0) & (r <= r_max), out, 0.0)

    def density(e):
        e = np.asarray(e, dtype=float)[..., 0]
        return np.where(e >= 0, side_density(e, tables[1.0]), side_density(-e, tables[-1.0]))

    spec = {"kind": "table", "radii": radii.tolist(), "values": values.tolist()}
    if values_negative is not None:
        spec["values_negative"] = neg.tolist()
    return LevyMeasure(dim_e=1, density=density, support_radius=r_max, name="table", spec=spec)


def measure_from_spec(spec: dict) -> LevyMeasure:
    kind = spec.get("kind")
    if kind == "power-law":
        return power_law(
            float(spec["alpha"]),
            float(spec.get("scale", 1.0)),
            float(spec.get("radius", 1.0)),
            int(spec.get("dim_e", 1)),
        )
    if kind == "table":
        return from_table(spec["radii"], spec["values"], spec.get("values_negative"))
    raise ConfigurationError(f"unknown measure kind {kind!r}")


# ---------------------------------------------------------------------------
# quadrature


def _outer_radius(measure: LevyMeasure, r_lo: float, rtol: float) -> float:
    """Finite outer radius for quadrature; for unbounded support, cut where the tail mass is negligible."""
    if not math.isinf(measure.support_radius):
        return measure.support_radius
    key = ("outer", r_lo, rtol)
    if key in measure._cache:
        return measure._cache[key]

    def tail(r):
        return sum(integrate.quad(f, r, np.inf, limit=200)[0] for _, f in measure.sides())

    shell = tail(r_lo)
    r = max(2.0 * r_lo, 1.0)
    while tail(r) > rtol * max(shell, 1e-300):
        r *= 2.0
        if r > 1e12:
            raise QuadratureError(f"{measure!r}: tail mass does not vanish (k={1.0 / r_lo:g})")
    measure._cache[key] = r
    return r


def _directions(dim_e: int, n_directions: int):
    if dim_e == 2:
        th = 2.0 * math.pi * (np.arange(n_directions) + 0.5) / n_directions
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(n_directions, 1.0 / n_directions)
    eye = np.eye(dim_e)
    dirs = np.concatenate([eye, -eye])
    return dirs, np.full(len(dirs), 1.0 / len(dirs))


def build_rule(measure: LevyMeasure, k: int, n_panels: int, order: int = GAUSS_ORDER,
               n_directions: int = 16, rtol: float = 1e-8) -> QuadratureRule:
    """Panel rule with a fixed panel count (deterministic)."""
    k = _check_k(k)
    r_lo = 1.0 / k
    if r_lo >= measure.support_radius:
        return QuadratureRule(np.zeros((0, measure.dim_e)), np.zeros(0), k, n_panels)
    r_hi = _outer_radius(measure, r_lo, rtol)
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.geomspace(r_lo, r_hi, n_panels + 1)
    a, b = edges[:-1, None], edges[1:, None]
    r = (0.5 * (b - a) * x + 0.5 * (b + a)).ravel()
    wr = (0.5 * (b - a) * w).ravel()
    nodes, weights = [], []
    for sign, radial in measure.sides():
        dens = radial(r)
        if sign is not None:
            nodes.append((sign * r)[:, None])
            weights.append(wr * dens)
        else:
            dirs, dw = _directions(measure.dim_e, n_directions)
            nodes.append((r[:, None, None] * dirs[None]).reshape(-1, measure.dim_e))
            weights.append((wr * dens)[:, None] * dw[None])
    return QuadratureRule(np.concatenate(nodes), np.concatenate([wt.ravel() for wt in weights]), k, n_panels)


def _initial_panels(measure, k):
    r_lo = 1.0 / k
    r_hi = measure.support_radius if not math.isinf(measure.support_radius) else max(10.0, 10 * r_lo)
    return max(2, int(math.ceil(2.0 * math.log10(max(r_hi / r_lo, 1.0 + 1e-12)))))


def quad_integrate(measure: LevyMeasure, k: int, integrand, rtol: float = 1e-8, n_panels: int | None = None,
                   atol: float = 0.0):
    """Integrate ``integrand`` against the truncated measure ``lam_k``.

    ``integrand`` maps nodes of shape ``(Q, dim_e)`` to values of shape
    ``(Q, ...)``. With ``n_panels`` given the rule is fixed and the result is
    deterministic; otherwise the panel count doubles until successive results
    agree to ``rtol`` relative to the integral of ``|integrand|``, or to
    ``atol`` times the truncated mass (for integrands that are pure rounding).

    Raises
    ------
    QuadratureError
        If refinement does not converge or the integrand is not finite at a node.
    """
    k = _check_k(k)
    if n_panels is not None:
        return build_rule(measure, k, n_panels, rtol=rtol).integrate(integrand)
    p = _initial_panels(measure, k)
    rule = build_rule(measure, k, p, rtol=rtol)
    prev = rule.integrate(integrand)
    for _ in range(MAX_REFINEMENTS):
        p *= 2
        rule = build_rule(measure, k, p, rtol=rtol)
        vals = np.asarray(integrand(rule.nodes), dtype=float)
        cur = rule.integrate(lambda _e: vals)
        l1 = np.tensordot(rule.weights, np.abs(vals), axes=(0, 0)) if len(rule) else np.zeros_like(cur)
        floor = atol * float(np.sum(rule.weights))
        if np.all(np.abs(cur - prev) <= np.maximum(rtol * l1, floor) + 1e-300):
            return cur
        prev = cur
    raise QuadratureError(f"quadrature against {measure!r} with k={k} did not converge to rtol={rtol}")


def quadrature_rule(measure: LevyMeasure, k: int, rtol: float = 1e-8) -> QuadratureRule:
    """Fixed rule accurate to ``rtol`` for the mass and the 2nd/4th radial moments.

    Cached on the measure; the hot loops reuse it for every state.
    """
    k = _check_k(k)
    key = ("rule", k, rtol)
    if key not in measure._cache:
        p = _initial_panels(measure, k)

        def ref(e):
            r2 = np.sum(e * e, axis=-1)
            return np.stack([np.ones_like(r2), r2, r2 * r2], axis=-1)

        rule = build_rule(measure, k, p, rtol=rtol)
        prev = rule.integrate(ref)
        for _ in range(MAX_REFINEMENTS):
            p *= 2
            nxt = build_rule(measure, k, p, rtol=rtol)
            cur = nxt.integrate(ref)
            if np.all(np.abs(cur - prev) <= rtol * np.abs(cur)):
                break  # the coarser rule already agrees with its refinement
            prev, rule = cur, nxt
        else:
            raise QuadratureError(f"no stable quadrature rule for {measure!r} at k={k}")
        measure._cache[key] = rule
    return measure._cache[key]


# ---------------------------------------------------------------------------
# moments


def truncated_mass(measure: LevyMeasure, k: int) -> float:
    """``lam({|e| >= 1/k})``: closed form when available, else quadrature."""
    k = _check_k(k)
    if measure.mass_above is not None:
        return float(measure.mass_above(1.0 / k))
    if 1.0 / k >= measure.support_radius:
        return 0.0
    return float(quad_integrate(measure, k, lambda e: np.ones(len(e))))


def small_jump_second_moment(measure: LevyMeasure, k: int) -> float:
    """``int_{|e| < 1/k} |e|^2 lam(de)``, the part of the measure discarded at level k."""
    k = _check_k(k)
    if measure.second_moment_below is not None:
        return float(measure.second_moment_below(1.0 / k))
    r_hi = min(1.0 / k, measure.support_radius)
    total = 0.0
    for _, radial in measure.sides():
        val, err = integrate.quad(lambda r: r * r * float(radial(np.array(r))), 0.0, r_hi, limit=200)
        if not np.isfinite(val) or err > 1e-6 * max(abs(val), 1e-12):
            raise QuadratureError(f"small-jump moment of {measure!r} at k={k} did not converge (err={err:g})")
        total += val
    return total


def check_measure(measure: LevyMeasure, cap: float = 1e6, ks=(1, 2, 4, 8, 16, 32, 64, 128, 256),
                  mass_bound: float | None = None) -> DiagnosticsReport:
    """Numerical checks of the standing assumptions on the jump measure.

    * ``int (1 ^ |e|^2) lam`` is below ``cap``;
    * every truncated mass is finite;
    * the truncated mass increases strictly along ``ks`` (after it first becomes
      positive) and eventually exceeds ``mass_bound`` (default: 10x the mass at
      the second rung), the numerical face of infinite total mass.
    """
    rep = DiagnosticsReport("levy-measure")
    small = small_jump_second_moment(measure, 1)
    big = truncated_mass(measure, 1)
    total = small + big
    rep.add("integrates-1-wedge-e2", np.isfinite(total) and total < cap, total / cap, detail=f"value={total:.6g}")
    masses = [truncated_mass(measure, k) for k in ks]
    rep.add("finite-truncated-mass", all(np.isfinite(masses)), detail=str([round(m, 6) for m in masses]))
    pos = [m for m in masses if m > 0]
    increasing = len(pos) >= 2 and all(b > a for a, b in zip(pos, pos[1:]))
    bound = mass_bound if mass_bound is not None else 10.0 * (pos[0] if pos else 1.0)
    rep.add("infinite-total-mass", increasing and masses[-1] > bound, masses[-1] / bound,
            detail=f"mass(k={ks[-1]})={masses[-1]:.6g} vs bound {bound:.6g}")
    rep.values.update(second_moment_wedge=total, masses=dict(zip(ks, masses)))
    return rep


# ---------------------------------------------------------------------------
# sampling


def _side_tables(measure: LevyMeasure, k: int):
    """Tabulated radial inverse CDFs per side (for densities without closed forms)."""
    key = ("tables", k)
    if key not in measure._cache:
        r_lo = 1.0 / k
        r_hi = _outer_radius(measure, r_lo, 1e-10)
        grid = np.geomspace(r_lo, r_hi, 4097)
        out = []
        for sign, radial in measure.sides():
            f = radial(grid) * grid  # integrate in log r
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(np.log(grid)))])
            mass = cdf[-1]
            keep = np.concatenate([[True], np.diff(cdf) > 0])
            inv = interpolate.PchipInterpolator(cdf[keep] / mass, np.log(grid[keep])) if mass > 0 else None
            out.append((sign, mass, inv))
        measure._cache[key] = out
    return measure._cache[key]


def sample_marks(measure: LevyMeasure, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. marks from the normalized truncated measure."""
    k = _check_k(k)
    u_r = rng.random(n)
    u_d = rng.random(n) if measure.dim_e == 1 else None
    if measure.dim_e > 1:
        g = rng.standard_normal((n, measure.dim_e))
        dirs = g / np.linalg.norm(g, axis=1, keepdims=True)
    if measure.radial_quantile is not None:
        r = measure.radial_quantile(u_r, 1.0 / k)
        if measure.dim_e > 1:
            return r[:, None] * dirs
        return np.where(u_d < 0.5, r, -r)[:, None]
    tables = _side_tables(measure, k)
    masses = np.array([m for _, m, _ in tables])
    if masses.sum() <= 0:
        raise ConfigurationError(f"{measure!r} has zero mass at k={k}; nothing to sample")
    if measure.dim_e > 1:
        r = np.exp(tables[0][2](u_r))
        return r[:, None] * dirs
    p_pos = masses[0] / masses.sum()
    pos = u_d < p_pos
    r = np.empty(n)
    if pos.any():
        r[pos] = np.exp(tables[0][2](u_r[pos]))
    if (~pos).any():
        r[~pos] = -np.exp(tables[1][2](u_r[~pos]))
    return r[:, None]


def sample_truncated_jumps(measure: LevyMeasure, k: int, horizon: float, rng: np.random.Generator,
                           t0: float = 0.0) -> JumpTrain:
    """One realization of the truncated Poisson random measure on ``(t0, t0 + horizon]``."""
    k = _check_k(k)
    if horizon <= 0:
        raise ConfigurationError("horizon must be positive")
    mass = truncated_mass(measure, k)
    if mass <= 0:
        return JumpTrain(np.zeros(0), np.zeros((0, measure.dim_e)), k)
    count = rng.poisson(mass * horizon)
    times = np.sort(t0 + horizon * (1.0 - rng.random(count)))
    return JumpTrain(times, sample_marks(measure, k, count, rng), k)
