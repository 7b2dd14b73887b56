"""Forward jump-diffusion under a truncated jump measure.

Euler-Maruyama on a uniform grid. Jumps of the truncated Poisson measure are
simulated exactly in continuous time and attached to the step that contains
them, with the jump coefficient evaluated at the left node. The compensator
drift (integral of beta against lambda_k) is subtracted every step.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import levy, streams
from .coefficients import ModelCoefficients
from .diagnostics import DiagnosticsReport
from .errors import ConfigurationError, SimulationError

_OVERFLOW = 1e150


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ConfigurationError(f"grid needs T > t0, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError("n_steps must be a positive integer")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.n_steps * factor)

    def step_of(self, times) -> np.ndarray:
        """Index j of the step (tau_j, tau_{j+1}] containing each time."""
        j = np.ceil((np.asarray(times) - self.t0) / self.dt - 1e-12).astype(np.int64) - 1
        return np.clip(j, 0, self.n_steps - 1)


@dataclass(eq=False)
class PathEnsemble:
    """Simulated paths with all the randomness that produced them.

    Jumps are stored flat and sorted by (path, time); ``jump_offsets[p]`` to
    ``jump_offsets[p + 1]`` index the jumps of path ``p``.
    """

    grid: TimeGrid
    states: np.ndarray  # (n, N + 1, kx)
    brownian_increments: np.ndarray  # (n, N, d)
    jump_offsets: np.ndarray  # (n + 1,)
    jump_times: np.ndarray
    jump_marks: np.ndarray  # (J, l)
    jump_steps: np.ndarray
    k: int
    seed: int
    x0: np.ndarray
    coupling_id: str | None = None
    stream: str = streams.FORWARD
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def jump_paths(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_paths), np.diff(self.jump_offsets))

    def jump_train(self, path: int) -> levy.JumpTrain:
        lo, hi = self.jump_offsets[path], self.jump_offsets[path + 1]
        return levy.JumpTrain(self.jump_times[lo:hi], self.jump_marks[lo:hi], self.k)

    def jump_counts(self) -> np.ndarray:
        """Number of jumps per (path, step)."""
        if "counts" not in self._cache:
            counts = np.zeros((self.n_paths, self.grid.n_steps), dtype=np.int64)
            np.add.at(counts, (self.jump_paths, self.jump_steps), 1)
            self._cache["counts"] = counts
        return self._cache["counts"]

    def step_jumps(self, j: int):
        """(path indices, marks) of the jumps attached to step j."""
        if "by_step" not in self._cache:
            order = np.lexsort((self.jump_paths, self.jump_steps))
            bounds = np.searchsorted(self.jump_steps[order], np.arange(self.grid.n_steps + 1))
            self._cache["by_step"] = (order, bounds)
        order, bounds = self._cache["by_step"]
        sel = order[bounds[j]:bounds[j + 1]]
        return self.jump_paths[sel], self.jump_marks[sel]

    def evaluate_at(self, s: float) -> np.ndarray:
        """States at time s (left grid node); x0 for s <= t0."""
        if s <= self.grid.t0:
            return np.broadcast_to(self.x0, (self.n_paths, self.x0.size)).copy()
        j = int(np.floor((s - self.grid.t0) / self.grid.dt + 1e-12))
        return self.states[:, min(j, self.grid.n_steps)].copy()

    def columns(self):
        """Long-format table: one row per (path, time) with state and cumulative jump count."""
        n, n1, kx = self.states.shape
        cum = np.concatenate([np.zeros((n, 1), dtype=np.int64), np.cumsum(self.jump_counts(), axis=1)], axis=1)
        header = ["path", "time"] + [f"x{c}" for c in range(kx)] + ["jumps"]
        rows = np.column_stack([
            np.repeat(np.arange(n), n1),
            np.tile(self.grid.nodes, n),
            self.states.reshape(n * n1, kx),
            cum.reshape(-1),
        ])
        return header, rows


def compensator_drift(coeffs: ModelCoefficients, measure: levy.LevyMeasure, k: int, t: float, x) -> np.ndarray:
    """Integral of e -> beta(t, x, e) against lambda_k."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return np.asarray(levy.quad_integrate(measure, k, lambda e: coeffs.beta(t, x[None, :], e)), dtype=float)


class _Compensator:
    """Per-step compensator drift, memoized when beta ignores (t, x)."""

    def __init__(self, coeffs, measure, k):
        self.coeffs = coeffs
        self.const = None
        if levy.truncated_mass(measure, k) == 0.0:
            self.const = np.zeros(coeffs.dims.state)
        elif coeffs.beta_state_free and getattr(coeffs.beta, "time_free", False):
            self.const = compensator_drift(coeffs, measure, k, 0.0, np.zeros(coeffs.dims.state))
        else:
            self.rule = levy.quadrature_rule(measure, k)

    def __call__(self, t, x):
        if self.const is not None:
            return self.const
        nodes, w = self.rule.nodes, self.rule.weights
        out = np.empty_like(x)
        step = max(1, (1 << 20) // max(1, len(w)))
        for lo in range(0, len(x), step):
            vals = self.coeffs.beta(t, x[lo:lo + step, None, :], nodes[None, :, :])
            out[lo:lo + step] = np.einsum("q,nqk->nk", w, vals)
        return out


def _draw_block(measure, k_draw, k, grid, n, d, rng_bm, rng_jump, substeps):
    dt = grid.dt
    fine = rng_bm.standard_normal((n, grid.n_steps * substeps, d)) * np.sqrt(dt / substeps)
    dB = fine.reshape(n, grid.n_steps, substeps, d).sum(axis=2) if substeps > 1 else fine
    horizon = grid.T - grid.t0
    mass = levy.truncated_mass(measure, k_draw)
    counts = rng_jump.poisson(mass * horizon, size=n) if mass > 0 else np.zeros(n, dtype=np.int64)
    total = int(counts.sum())
    times = grid.t0 + horizon * (1.0 - rng_jump.random(total))
    marks = levy.sample_marks(measure, k_draw, total, rng_jump) if total else np.zeros((0, measure.dim_e))
    paths = np.repeat(np.arange(n), counts)
    if k_draw != k:
        keep = np.linalg.norm(marks, axis=1) >= 1.0 / k
        times, marks, paths = times[keep], marks[keep], paths[keep]
    order = np.lexsort((times, paths))
    return dB, paths[order], times[order], marks[order]


def _simulate_block(coeffs, grid, x0, dB, jpaths, jmarks, jsteps, comp, lo):
    n = dB.shape[0]
    kx = coeffs.dims.state
    dt = grid.dt
    nodes = grid.nodes
    X = np.empty((n, grid.n_steps + 1, kx))
    X[:, 0] = x0
    order = np.lexsort((jpaths, jsteps))
    bounds = np.searchsorted(jsteps[order], np.arange(grid.n_steps + 1))
    for j in range(grid.n_steps):
        t = nodes[j]
        x = X[:, j]
        dx = coeffs.b(t, x) * dt + np.einsum("nkd,nd->nk", coeffs.sigma(t, x), dB[:, j])
        dx = dx - comp(t, x) * dt
        sel = order[bounds[j]:bounds[j + 1]]
        if sel.size:
            p = jpaths[sel]
            np.add.at(dx, p, coeffs.beta(t, x[p], jmarks[sel]))
        X[:, j + 1] = x + dx
        bad = ~np.all(np.isfinite(X[:, j + 1]) & (np.abs(X[:, j + 1]) < _OVERFLOW), axis=1)
        if bad.any():
            path = int(np.flatnonzero(bad)[0]) + lo
            raise SimulationError(f"state left the finite range on path {path} at step {j}", path=path, step=j)
    return X


def simulate_forward(coeffs: ModelCoefficients, measure: levy.LevyMeasure, k: int, x0, grid: TimeGrid,
                     n_paths: int, seed: int, *, reservoir_k: int | None = None, brownian_substeps: int = 1,
                     stream: str = streams.FORWARD, workers: int = 1, coupling_id: str | None = None,
                     block_size: int = streams.DEFAULT_BLOCK_SIZE) -> PathEnsemble:
    """Simulate ``n_paths`` Euler paths from ``x0`` at ``grid.t0`` under lambda_k.

    Coupling hooks: with ``reservoir_k`` (>= k) the jumps are drawn at that
    level and thinned to ``|e| >= 1/k``, so ensembles sharing seed and
    reservoir see the same large jumps. ``brownian_substeps`` draws the
    Brownian path on a grid that many times finer and sums it, so a grid of N
    steps with substeps 2 shares its Brownian path with 2N steps and substeps 1.
    The result depends only on the arguments, never on ``workers``.
    """
    k = levy._check_k(k)
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    k_draw = k if reservoir_k is None else levy._check_k(reservoir_k)
    if k_draw < k:
        raise ConfigurationError("reservoir_k must be >= k")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (coeffs.dims.state,):
        raise ConfigurationError(f"x0 must have {coeffs.dims.state} components")
    d = coeffs.dims.brownian
    comp = _Compensator(coeffs, measure, k)
    tag = f"{stream}/res{k_draw}/sub{grid.n_steps * brownian_substeps}"

    def run(block):
        b, lo, hi = block
        rng_bm = streams.substream(seed, tag + "/brownian", b)
        rng_jump = streams.substream(seed, f"{stream}/res{k_draw}/jumps", b)
        dB, jp, jt, jm = _draw_block(measure, k_draw, k, grid, hi - lo, d, rng_bm, rng_jump, brownian_substeps)
        js = grid.step_of(jt)
        X = _simulate_block(coeffs, grid, x0, dB, jp, jm, js, comp, lo)
        return X, dB, jp + lo, jt, jm, js

    todo = list(streams.blocks(n_paths, block_size))
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, todo))
    else:
        parts = [run(b) for b in todo]

    jp = np.concatenate([p[2] for p in parts])
    offsets = np.concatenate([[0], np.cumsum(np.bincount(jp, minlength=n_paths))])
    return PathEnsemble(
        grid=grid,
        states=np.concatenate([p[0] for p in parts]),
        brownian_increments=np.concatenate([p[1] for p in parts]),
        jump_offsets=offsets,
        jump_times=np.concatenate([p[3] for p in parts]),
        jump_marks=np.concatenate([p[4] for p in parts]).reshape(-1, measure.dim_e),
        jump_steps=np.concatenate([p[5] for p in parts]),
        k=k, seed=int(seed), x0=x0, coupling_id=coupling_id, stream=stream,
    )


@dataclass(frozen=True)
class GapStatistic:
    """E[sup_s |X^(k_high)_s - X^(k_low)_s|^2] with its Monte Carlo standard error."""

    k_low: int
    k_high: int
    mean: float
    std_error: float
    n_paths: int


def coupled_truncation_gap(coeffs, measure, k_low, k_high, x0, grid, n_paths, seed, *,
                           reservoir_k=None, workers=1) -> GapStatistic:
    """Sup-gap between two truncation levels sharing Brownian path and jump reservoir.

    The reservoir is drawn at ``reservoir_k`` (default ``k_high``); pass the
    top of a ladder so that every rung is a thinning of the same jumps.
    """
    if k_low > k_high:
        raise ConfigurationError("coupled_truncation_gap needs k_low <= k_high")
    res = max(k_high, reservoir_k or k_high)
    hi = simulate_forward(coeffs, measure, k_high, x0, grid, n_paths, seed, reservoir_k=res, workers=workers)
    lo = simulate_forward(coeffs, measure, k_low, x0, grid, n_paths, seed, reservoir_k=res, workers=workers)
    sup = np.max(np.sum((hi.states - lo.states) ** 2, axis=2), axis=1)
    se = float(sup.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else float("nan")
    return GapStatistic(int(k_low), int(k_high), float(sup.mean()), se, int(n_paths))


def _running_sup(dev):
    return np.maximum.accumulate(dev, axis=1)


def moment_diagnostics(ensemble: PathEnsemble, p: float = 2.0, x_pairs=None) -> DiagnosticsReport:
    """Fit the constants of the forward moment estimates.

    First estimate: the smallest M with E[sup_{r<=s}|X_r - x|^p] <= M (s - t)(1 + |x|^p)
    at every grid time. With ``x_pairs = (ensemble_x, ensemble_x')`` (two
    ensembles with shared randomness started at x and x'), also the smallest M
    with E[sup_{r<=s}|X_r - X'_r - (x - x')|^p] <= M (s - t)|x - x'|^p.
    Each fitted constant comes with the standard error at its maximizing time.
    """
    if p < 2:
        raise ConfigurationError("moment order p must be at least 2")
    rep = DiagnosticsReport("moments")
    g = ensemble.grid
    elapsed = g.nodes[1:] - g.t0
    x0 = ensemble.x0

    def fit(dev, scale, key):
        sup = _running_sup(dev)[:, 1:]  # (n, N) at s = tau_1..tau_N
        mean = sup.mean(axis=0)
        se = sup.std(axis=0, ddof=1) / np.sqrt(sup.shape[0]) if sup.shape[0] > 1 else np.zeros_like(mean)
        ratio = mean / (elapsed * scale)
        j = int(np.argmax(ratio))
        rep.values[key] = float(ratio[j])
        rep.values[key + "_se"] = float(se[j] / (elapsed[j] * scale))
        rep.values[key + "_time"] = float(g.nodes[j + 1])
        rep.values[key + "_curve"] = ratio.tolist()
        finite = bool(np.all(np.isfinite(ratio)))
        rep.add(key, finite, float(ratio[j]), None if finite else {"time": float(g.nodes[j + 1])},
                f"fitted {key} = {ratio[j]:.6g} +- {rep.values[key + '_se']:.3g}")

    dev = np.linalg.norm(ensemble.states - x0, axis=2) ** p
    fit(dev, 1.0 + np.linalg.norm(x0) ** p, "M_p")
    if x_pairs is not None:
        a, b = x_pairs
        shift = a.x0 - b.x0
        dist = np.linalg.norm(shift)
        if dist == 0:
            raise ConfigurationError("x_pairs need distinct starting points")
        dev2 = np.linalg.norm(a.states - b.states - shift, axis=2) ** p
        fit(dev2, dist ** p, "M_p_pair")
    return rep
