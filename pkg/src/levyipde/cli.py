"""Command-line interface.

Exit status: 0 success, 1 validation failure (bad scenario, failed check),
2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, bench, io, levy, streams
from .bsde import MeshSolution, bsde_residual, ladder_study, solve_backward
from .coefficients import validate_assumptions
from .errors import ConfigurationError, NumericalError
from .ipde import terminal_consistency, viscosity_check
from .scenario import load_scenario
from .sde import moment_diagnostics, simulate_forward

log = logging.getLogger("levyipde")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2


class CheckFailed(Exception):
    """A verification ran to completion and did not pass."""


def _ladder_arg(text):
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario YAML file or the name of a shipped scenario")
    common.add_argument("--seed", type=int, help="master seed (overrides numerics.seed)")
    common.add_argument("--out", help="output directory (overrides outputs.directory)")
    common.add_argument("--k", type=int, help="truncation level")
    common.add_argument("--ladder", type=_ladder_arg, help="truncation ladder, e.g. 2,4,8,16")
    common.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    common.add_argument("--steps", type=int, help="number of time steps")
    common.add_argument("--workers", type=int, help="threads for path simulation")
    common.add_argument("--force", action="store_true", help="run even if the assumption checks fail")
    common.add_argument("--quiet", action="store_true", help="only print the summary line")

    p = argparse.ArgumentParser(prog="levyipde", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sf = sub.add_parser("simulate-forward", parents=[common], help="simulate the forward jump diffusion")
    sf.add_argument("--export-paths", type=int, default=100, help="number of paths written to paths.csv")
    sub.add_parser("solve", parents=[common], help="solve the truncated system by backward regression")
    sub.add_parser("ladder", parents=[common], help="convergence study over the truncation ladder")
    for name, text in (("verify-viscosity", "viscosity residual of a mesh solution"),
                       ("residual", "out-of-sample BSDE residual of a mesh solution")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--solution", help="saved mesh solution (.npz); solved afresh when omitted")
    sub.add_parser("verify-assumptions", parents=[common], help="sample-based checks of the model assumptions")
    bp = sub.add_parser("bench", parents=[common], help="compiled vs pure-Python kernel timings")
    bp.add_argument("--repeats", type=int, default=3)
    return p


# -- helpers ------------------------------------------------------------------------

class _Run:
    def __init__(self, args):
        self.args = args
        if args.config is None:
            raise ConfigurationError("--config is required for this command")
        base = load_scenario(args.config)
        self.cfg = base.with_overrides(seed=args.seed, k=args.k, ladder=args.ladder, paths=args.paths,
                                       steps=args.steps, workers=args.workers)
        nu = self.cfg.numerics
        self.name = self.cfg.name
        self.coeffs = self.cfg.model()
        self.measure = self.cfg.measure()
        self.grid = self.cfg.grid()
        self.k, self.n_paths, self.seed, self.workers = nu["k"], nu["n_paths"], nu["seed"], nu["workers"]
        self.tol = nu["tolerances"]
        self.out = Path(args.out or self.cfg.data["outputs"]["directory"])

    def write(self, filename, rows, kind, columns=None):
        path = io.write_csv(self.out / filename, rows, kind, self.name, columns)
        log.info("wrote %s", path)
        return path

    def gate(self):
        rep = validate_assumptions(self.coeffs, self.cfg.sample_plan())
        self.write("assumptions.csv", rep.rows(), "assumptions")
        if rep.passed:
            return rep
        names = ", ".join(c.name for c in rep.failures())
        if self.args.force:
            log.warning("assumption checks failed (%s); continuing because of --force", names)
            return rep
        raise CheckFailed(f"assumption checks failed: {names} (rerun with --force to proceed)")

    def simulate(self, k=None, stream=streams.FORWARD, grid=None):
        return simulate_forward(self.coeffs, self.measure, self.k if k is None else k, self.cfg.x0,
                                grid or self.grid, self.n_paths, self.seed, stream=stream, workers=self.workers)

    def solve(self):
        nu = self.cfg.numerics
        ens = self.simulate()
        log.info("simulated %d paths x %d steps at k=%d", self.n_paths, self.grid.n_steps, self.k)
        sol = solve_backward(self.coeffs, self.measure, self.k, self.grid, ens, self.cfg.basis(),
                             z_method=nu["z_method"], control_variates=nu["control_variates"])
        sol.interpolation = nu["interpolation"]
        return sol

    def solution(self):
        path = getattr(self.args, "solution", None)
        if path:
            return MeshSolution.load(path, self.coeffs, self.measure)
        self.gate()
        return self.solve()


def _solve_rows(sol, term):
    for i in range(sol.m):
        yield {"equation": i, "t0": sol.grid.t0, "x0": sol.x0.tolist(), "k": sol.k, "n_steps": sol.grid.n_steps,
               "n_paths": sol.n_paths, "seed": sol.seed, "u0": float(sol.u0[i]),
               "std_error": float(sol.std_error[i]), "cv_std_error": float(sol.cv_std_error[i]),
               "small_jump_second_moment": levy.small_jump_second_moment(sol.measure, sol.k),
               "terminal_max_error": term.values[f"max_error[{i}]"]}


# -- commands ------------------------------------------------------------------------

def cmd_simulate_forward(args):
    run = _Run(args)
    ens = run.simulate()
    header, data = ens.columns()
    n_exp = min(max(args.export_paths, 0), ens.n_paths)
    run.out.mkdir(parents=True, exist_ok=True)
    io.write_table(run.out / "paths.csv", header, data[: n_exp * (run.grid.n_steps + 1)], "paths", run.name)
    rep = moment_diagnostics(ens, 2.0)
    xT = ens.states[:, -1]
    rows = [{"statistic": f"mean_XT[{c}]", "value": float(xT[:, c].mean()),
             "std_error": float(xT[:, c].std(ddof=1) / np.sqrt(ens.n_paths))} for c in range(xT.shape[1])]
    rows += [{"statistic": f"var_XT[{c}]", "value": float(xT[:, c].var(ddof=1)), "std_error": ""}
             for c in range(xT.shape[1])]
    rows.append({"statistic": "M_2", "value": rep.values["M_p"], "std_error": rep.values["M_p_se"]})
    rows.append({"statistic": "jumps_per_path", "value": float(ens.jump_counts().sum() / ens.n_paths),
                 "std_error": ""})
    run.write("forward.csv", rows, "forward")
    return (f"simulate-forward {run.name}: {ens.n_paths} paths x {run.grid.n_steps} steps at k={run.k}, "
            f"mean X_T = {xT[:, 0].mean():.6g}, M_2 = {rep.values['M_p']:.4g}")


def cmd_solve(args):
    run = _Run(args)
    run.gate()
    sol = run.solve()
    run.out.mkdir(parents=True, exist_ok=True)
    sol.save(run.out / "solution.npz")
    xs = np.linspace(sol.layers[-1].lo, sol.layers[-1].hi, 11)
    term = terminal_consistency(sol, run.coeffs, xs, run.tol["terminal"])
    if not term.passed:
        log.warning("terminal layer misses g: %s", term.failures()[0].detail)
    run.write("solve.csv", _solve_rows(sol, term), "solve")
    run.write("layers.csv", ({"step": j, "time": float(run.grid.nodes[j]), "cond": lay.cond, "ridge": lay.ridge,
                              "dispersed": lay.dispersed} for j, lay in enumerate(sol.layers)), "layers")
    u = ", ".join(f"{sol.u0[i]:.6g} +- {sol.std_error[i]:.2g}" for i in range(sol.m))
    return f"solve {run.name}: k={run.k} N={run.grid.n_steps} paths={run.n_paths} u0 = {u}"


def cmd_ladder(args):
    run = _Run(args)
    run.gate()
    ks = run.cfg.numerics["ladder"]
    study = ladder_study(run.coeffs, run.measure, ks, run.grid, run.cfg.x0, run.n_paths, run.seed,
                         run.cfg.basis(), workers=run.workers,
                         progress=lambda k: log.info("rung k=%d solved", k))
    run.write("ladder.csv", study.rows, "ladder")
    run.write("ladder_checks.csv", study.report.rows(), "ladder-checks")
    if not study.passed:
        raise CheckFailed("ladder: " + ", ".join(c.name for c in study.report.failures()))
    return f"ladder {run.name}: ks={ks} all gap columns strictly decreasing"


def cmd_verify_viscosity(args):
    run = _Run(args)
    sol = run.solution()
    rep = viscosity_check(sol, run.coeffs, run.measure, rtol=run.tol["quad_rtol"])
    run.write("viscosity.csv", rep.rows(), "viscosity")
    worst = float(np.nanmax(rep.max_abs()))
    if not worst <= run.tol["viscosity"]:
        raise CheckFailed(f"viscosity residual {worst:.3e} exceeds {run.tol['viscosity']:g}")
    return f"verify-viscosity {run.name}: max |R| = {worst:.3e} (tolerance {run.tol['viscosity']:g})"


def cmd_verify_assumptions(args):
    run = _Run(args)
    rep = validate_assumptions(run.coeffs, run.cfg.sample_plan())
    run.write("assumptions.csv", rep.rows(), "assumptions")
    if not rep.passed:
        worst = rep.failures()[0]
        raise CheckFailed(f"{rep.summary()}; first failure {worst.name} at {worst.witness}")
    return f"verify-assumptions {run.name}: all {len(rep.checks)} checks pass"


def cmd_residual(args):
    run = _Run(args)
    sol = run.solution()
    fresh = simulate_forward(run.coeffs, run.measure, sol.k, sol.x0, sol.grid, run.n_paths, run.seed,
                             stream=streams.FRESH_RESIDUAL, workers=run.workers)
    stat = bsde_residual(sol, fresh, run.coeffs, run.measure)
    run.write("residual.csv", stat.rows(), "residual")
    worst = float(stat.rms.max())
    rms = ", ".join(f"{v:.4e}" for v in stat.rms)
    if not worst <= run.tol["residual_rms"]:
        raise CheckFailed(f"BSDE residual rms {rms} exceeds {run.tol['residual_rms']:g}")
    return f"residual {run.name}: rms = {rms} on {fresh.n_paths} fresh paths"


def cmd_bench(args):
    rows = bench.kernel_benchmark(repeats=args.repeats)
    name = None
    if args.config:
        run = _Run(args)
        name = run.name
        rows += bench.solve_benchmark(run.coeffs, run.measure, run.k, run.grid, run.cfg.x0, run.n_paths,
                                      run.seed, run.cfg.basis())
    out = Path(args.out or "out")
    io.write_csv(out / "bench.csv", rows, "bench", name)
    fast = [r for r in rows if r["backend"] == "compiled"]
    if not fast:
        return "bench: compiled backend unavailable, pure-Python timings only"
    return "bench: speedup " + ", ".join(f"{r['benchmark']} {r['speedup']:.1f}x" for r in fast)


COMMANDS = {
    "simulate-forward": cmd_simulate_forward,
    "solve": cmd_solve,
    "ladder": cmd_ladder,
    "verify-viscosity": cmd_verify_viscosity,
    "verify-assumptions": cmd_verify_assumptions,
    "residual": cmd_residual,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        with np.errstate(over="raise", invalid="raise"):
            summary = COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"{args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CheckFailed as exc:
        print(f"{args.command}: FAILED: {exc}")
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"{args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
