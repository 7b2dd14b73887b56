"""Timing of the hot kernels, compiled against pure Python, plus an end-to-end solve."""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .bsde import RegressionBasis, solve_backward
from .sde import simulate_forward


def _timeit(fn, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def _problem(n_points, n_nodes, degree, seed):
    rng = np.random.default_rng(seed)
    exps = RegressionBasis(degree=degree).multi_indices(1)
    return dict(
        x=rng.normal(size=(n_points, 1)),
        disp=rng.uniform(-1, 1, size=(1, n_nodes, 1)),
        weights=rng.uniform(0, 1, size=n_nodes),
        exps=exps,
        coefs=rng.normal(size=(len(exps), 1)),
        center=np.zeros(1),
        scale=np.ones(1),
    )


def backends():
    return ["compiled", "python"] if kernels.BACKEND == "compiled" else ["python"]


def kernel_benchmark(n_points=100_000, n_nodes=32, degree=3, repeats=3, seed=0):
    """One row per (kernel, backend): best-of time, speedup over Python, max deviation from Python."""
    p = _problem(n_points, n_nodes, degree, seed)
    calls = {
        "poly_eval": lambda b: kernels.poly_eval(p["x"], p["exps"], p["coefs"], p["center"], p["scale"], backend=b),
        "increment_values": lambda b: kernels.increment_values(
            p["x"][: n_points // 4], p["disp"], p["exps"], p["coefs"], p["center"], p["scale"], backend=b),
        "increment_integral": lambda b: kernels.increment_integral(
            p["x"], p["disp"], p["weights"], p["exps"], p["coefs"], p["center"], p["scale"], backend=b),
    }
    rows = []
    for name, call in calls.items():
        ref_time, ref = _timeit(lambda: call("python"), repeats)
        for b in backends():
            sec, out = (ref_time, ref) if b == "python" else _timeit(lambda: call(b), repeats)
            rows.append({"benchmark": name, "backend": b, "n_points": n_points, "n_nodes": n_nodes,
                         "seconds": sec, "speedup": ref_time / sec if sec > 0 else float("nan"),
                         "max_abs_diff": float(np.max(np.abs(np.asarray(out) - np.asarray(ref))))})
    return rows


def solve_benchmark(coeffs, measure, k, grid, x0, n_paths, seed, basis=None):
    """Backward solve on one shared ensemble with each backend."""
    ens = simulate_forward(coeffs, measure, k, x0, grid, n_paths, seed)
    rows, ref = [], None
    for b in reversed(backends()):  # python first, as reference
        sec, sol = _timeit(lambda: solve_backward(coeffs, measure, k, grid, ens, basis, backend=b), 1)
        if ref is None:
            ref = (sec, sol.u0)
        rows.append({"benchmark": "solve_backward", "backend": b, "n_points": n_paths, "n_nodes": grid.n_steps,
                     "seconds": sec, "speedup": ref[0] / sec if sec > 0 else float("nan"),
                     "max_abs_diff": float(np.max(np.abs(sol.u0 - ref[1])))})
    return rows[::-1]
