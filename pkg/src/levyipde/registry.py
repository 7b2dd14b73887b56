"""Named built-in coefficient functions.

Scenario files pick coefficients by registry name plus numeric parameters; no
code is loaded at runtime. Every function is vectorized over leading axes:

* ``b(t, x)``: ``(..., kx) -> (..., kx)``
* ``sigma(t, x)``: ``(..., kx) -> (..., kx, d)``
* ``beta(t, x, e)``: ``(..., kx), (..., l) -> (..., kx)``
* ``gamma(t, x, e)``: ``-> (...)``
* ``g(x)``: ``(..., kx) -> (...)``
* ``h(t, x, y, z, q)``: ``(..., kx), (..., m), (..., d), (...) -> (...)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError

SLOTS = ("b", "sigma", "beta", "gamma", "g", "h")


@dataclass(frozen=True)
class Coefficient:
    """A registry function bound to its parameters."""

    slot: str
    name: str
    params: dict
    fn: Callable = field(repr=False)
    state_free: bool = False  # no dependence on x
    time_free: bool = True
    uses_q: bool = True  # drivers only: depends on the nonlocal argument
    uses_z: bool = True

    def __call__(self, *args):
        return self.fn(*args)

    def spec(self) -> dict:
        return {"name": self.name, **self.params}


@dataclass(frozen=True)
class Dims:
    state: int = 1
    brownian: int = 1
    equations: int = 1
    marks: int = 1


def _vec(value, n, what):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.full(n, float(arr[0]))
    if arr.shape != (n,):
        raise ConfigurationError(f"{what}: expected {n} entries, got {arr.size}")
    return arr


def _mat(value, rows, cols, what):
    arr = np.asarray(value, dtype=float)
    if arr.size == 1:
        return np.full((rows, cols), float(arr.reshape(-1)[0]))
    arr = arr.reshape(rows, cols) if arr.size == rows * cols else arr
    if arr.shape != (rows, cols):
        raise ConfigurationError(f"{what}: expected a {rows}x{cols} matrix")
    return arr


def _mark_to_state(e, kx):
    # l == kx: componentwise; l == 1: the scalar mark moves every state component
    if e.shape[-1] == kx:
        return e
    if e.shape[-1] == 1:
        return np.broadcast_to(e, e.shape[:-1] + (kx,))
    raise ConfigurationError(f"mark dimension {e.shape[-1]} incompatible with state dimension {kx}")


def _norm(e):
    return np.sqrt(np.sum(e * e, axis=-1))


# -- drift ------------------------------------------------------------------

def _b_zero(p, dims, i):
    return dict(fn=lambda t, x: np.zeros(np.shape(x)), state_free=True)


def _b_constant(p, dims, i):
    v = _vec(p.get("value", 0.0), dims.state, "b.constant.value")
    return dict(fn=lambda t, x: np.broadcast_to(v, np.shape(x)).copy(), state_free=True)


def _b_linear(p, dims, i):
    a = _mat(p.get("slope", 0.0), dims.state, dims.state, "b.linear.slope")
    if np.size(p.get("slope", 0.0)) == 1:
        a = float(np.asarray(p.get("slope", 0.0)).reshape(-1)[0]) * np.eye(dims.state)
    c = _vec(p.get("intercept", 0.0), dims.state, "b.linear.intercept")
    return dict(fn=lambda t, x: np.asarray(x) @ a.T + c)


def _b_sin(p, dims, i):
    amp = _vec(p.get("amplitude", 1.0), dims.state, "b.sin.amplitude")
    freq = float(p.get("frequency", 1.0))
    return dict(fn=lambda t, x: amp * np.sin(freq * np.asarray(x)))


# -- diffusion --------------------------------------------------------------

def _sigma_constant(p, dims, i):
    s = _mat(p.get("value", 0.0), dims.state, dims.brownian, "sigma.constant.value")
    return dict(fn=lambda t, x: np.broadcast_to(s, np.shape(x)[:-1] + s.shape).copy(), state_free=True)


def _sigma_zero(p, dims, i):
    return _sigma_constant({"value": 0.0}, dims, i)


def _sigma_linear(p, dims, i):
    # sigma_ij(x) = intercept_ij + slope_ij * x_i
    c = _mat(p.get("intercept", 0.0), dims.state, dims.brownian, "sigma.linear.intercept")
    s = _mat(p.get("slope", 0.0), dims.state, dims.brownian, "sigma.linear.slope")
    return dict(fn=lambda t, x: c + s * np.asarray(x)[..., :, None])


# -- jump coefficient ---------------------------------------------------------

def _beta_zero(p, dims, i):
    def fn(t, x, e):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(e)[:-1] + (dims.state,)))
    return dict(fn=fn, state_free=True)


def _beta_mark(p, dims, i):
    s = float(p.get("scale", 1.0))

    def fn(t, x, e):
        out = s * _mark_to_state(np.asarray(e, dtype=float), dims.state)
        return np.broadcast_to(out, np.broadcast_shapes(np.shape(x), out.shape))
    return dict(fn=fn, state_free=True)


def _beta_abs_mark(p, dims, i):
    s = float(p.get("scale", 1.0))

    def fn(t, x, e):
        r = s * _norm(np.asarray(e, dtype=float))[..., None]
        out = np.broadcast_to(r, r.shape[:-1] + (dims.state,))
        return np.broadcast_to(out, np.broadcast_shapes(np.shape(x), out.shape))
    return dict(fn=fn, state_free=True)


def _beta_modulated_mark(p, dims, i):
    # e * (scale + amplitude * sin(x)): bounded by (scale + |amplitude|) |e|, Lipschitz in x
    s = float(p.get("scale", 1.0))
    a = float(p.get("amplitude", 0.5))

    def fn(t, x, e):
        em = _mark_to_state(np.asarray(e, dtype=float), dims.state)
        return em * (s + a * np.sin(np.asarray(x)))
    return dict(fn=fn)


# -- nonlocal weights -----------------------------------------------------------

def _gamma_one(p, dims, i):
    s = float(p.get("scale", 1.0))
    return dict(fn=lambda t, x, e: np.broadcast_to(
        s, np.broadcast_shapes(np.shape(x)[:-1], np.shape(e)[:-1])).copy(), state_free=True)


def _gamma_zero(p, dims, i):
    return _gamma_one({"scale": 0.0}, dims, i)


def _gamma_min_abs(p, dims, i):
    s = float(p.get("scale", 1.0))

    def fn(t, x, e):
        v = s * np.minimum(1.0, _norm(np.asarray(e, dtype=float)))
        return np.broadcast_to(v, np.broadcast_shapes(np.shape(x)[:-1], v.shape)).copy()
    return dict(fn=fn, state_free=True)


def _gamma_square(p, dims, i):
    s = float(p.get("scale", 1.0))

    def fn(t, x, e):
        e = np.asarray(e, dtype=float)
        v = s * np.sum(e * e, axis=-1)
        return np.broadcast_to(v, np.broadcast_shapes(np.shape(x)[:-1], v.shape)).copy()
    return dict(fn=fn, state_free=True)


# -- terminal -------------------------------------------------------------------

def _g_constant(p, dims, i):
    v = float(p.get("value", 0.0))
    return dict(fn=lambda x: np.full(np.shape(x)[:-1], v), state_free=True)


def _g_linear(p, dims, i):
    a = _vec(p.get("slope", 1.0), dims.state, "g.linear.slope")
    c = float(p.get("intercept", 0.0))
    return dict(fn=lambda x: np.asarray(x) @ a + c)


def _g_square(p, dims, i):
    s = float(p.get("scale", 1.0))
    shift = _vec(p.get("shift", 0.0), dims.state, "g.square.shift")
    return dict(fn=lambda x: s * np.sum((np.asarray(x) - shift) ** 2, axis=-1))


def _g_abs(p, dims, i):
    s = float(p.get("scale", 1.0))
    return dict(fn=lambda x: s * _norm(np.asarray(x)))


def _g_sqrt_abs(p, dims, i):
    s = float(p.get("scale", 1.0))
    return dict(fn=lambda x: s * np.sqrt(_norm(np.asarray(x))))


def _g_sin(p, dims, i):
    amp = float(p.get("amplitude", 1.0))
    freq = float(p.get("frequency", 1.0))
    return dict(fn=lambda x: amp * np.sin(freq * np.sum(np.asarray(x), axis=-1)))


# -- drivers ----------------------------------------------------------------------

def _h_zero(p, dims, i):
    return dict(fn=lambda t, x, y, z, q: np.zeros(np.shape(q)), state_free=True, uses_q=False, uses_z=False)


def _h_linear(p, dims, i):
    # own_y * y_i + <y_coupling, y> + <z_coeffs, z> + q_coeff * q + constant
    own = float(p.get("own_y", 0.0))
    yc = _vec(p.get("y", 0.0), dims.equations, "h.linear.y")
    zc = _vec(p.get("z", 0.0), dims.brownian, "h.linear.z")
    qc = float(p.get("q", 0.0))
    const = float(p.get("constant", 0.0))

    def fn(t, x, y, z, q):
        y = np.asarray(y)
        return own * y[..., i] + y @ yc + np.asarray(z) @ zc + qc * np.asarray(q) + const
    return dict(fn=fn, state_free=True, uses_q=qc != 0.0, uses_z=bool(np.any(zc != 0.0)))


def _h_quadratic_q(p, dims, i):
    s = float(p.get("scale", 1.0))
    return dict(fn=lambda t, x, y, z, q: s * np.asarray(q) ** 2, state_free=True, uses_z=False)


def _h_source(p, dims, i):
    # own_y * y_i + amplitude * sin(x_1): x-dependent, Lipschitz in y
    own = float(p.get("own_y", 0.0))
    amp = float(p.get("amplitude", 1.0))

    def fn(t, x, y, z, q):
        return own * np.asarray(y)[..., i] + amp * np.sin(np.asarray(x)[..., 0])
    return dict(fn=fn, uses_q=False, uses_z=False)


REGISTRY: dict[str, dict[str, Callable]] = {
    "b": {"zero": _b_zero, "constant": _b_constant, "linear": _b_linear, "sin": _b_sin},
    "sigma": {"zero": _sigma_zero, "constant": _sigma_constant, "linear": _sigma_linear},
    "beta": {"zero": _beta_zero, "mark": _beta_mark, "abs-mark": _beta_abs_mark,
             "modulated-mark": _beta_modulated_mark},
    "gamma": {"one": _gamma_one, "zero": _gamma_zero, "min-abs": _gamma_min_abs, "square": _gamma_square},
    "g": {"constant": _g_constant, "linear": _g_linear, "square": _g_square, "abs": _g_abs,
          "sqrt-abs": _g_sqrt_abs, "sin": _g_sin},
    "h": {"zero": _h_zero, "linear": _h_linear, "quadratic-q": _h_quadratic_q, "source": _h_source},
}


def make(slot: str, spec: dict, dims: Dims, index: int = 0) -> Coefficient:
    """Instantiate a registry function from ``{"name": ..., **params}``."""
    if slot not in REGISTRY:
        raise ConfigurationError(f"unknown coefficient slot {slot!r}")
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in REGISTRY[slot]:
        raise ConfigurationError(f"unknown {slot} function {name!r}; known: {sorted(REGISTRY[slot])}")
    kw = REGISTRY[slot][name](spec, dims, index)
    return Coefficient(slot=slot, name=name, params=spec, **kw)
