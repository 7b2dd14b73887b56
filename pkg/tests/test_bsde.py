import numpy as np
import pytest

from conftest import custom, model
from levyipde import levy
from levyipde.bsde import (MeshSolution, RegressionBasis, bsde_residual, continuity_modulus_probe,
                           evaluate_u, growth_envelope, jump_increment_field, ladder_study,
                           reestimate_jump_field, shift_layer, solve_backward)
from levyipde.coefficients import linear_modulus
from levyipde.errors import ConfigurationError, SolverError
from levyipde.scenario import scenario_from_dict
from levyipde.sde import TimeGrid, simulate_forward
from levyipde.streams import FRESH_RESIDUAL

GRID = TimeGrid(0.0, 1.0, 20)
N_PATHS = 20_000


def solve(m, lam, k=8, x0=(2.0,), grid=GRID, n=N_PATHS, seed=1, basis=None, **kw):
    ens = simulate_forward(m, lam, k, list(x0), grid, n, seed)
    return solve_backward(m, lam, k, grid, ens, basis, **kw), ens


@pytest.fixture(scope="module")
def linear(lam):
    return solve(model(), lam)


def within(sol, exact, extra=0.0):
    return abs(sol.u0[0] - exact) <= 3 * sol.std_error[0] + extra


def test_linear_terminal(linear):
    sol, _ = linear
    assert within(sol, 2.1)
    assert sol.terminal_residual < 1e-10
    xs = np.linspace(1, 3, 7)[:, None]
    np.testing.assert_allclose(evaluate_u(sol, 1.0, xs)[:, 0], xs[:, 0], atol=1e-10)


def test_linear_solution_everywhere(linear):
    sol, _ = linear
    for t in (0.25, 0.5, 0.75):
        xs = np.linspace(1.5, 2.5, 5)[:, None]
        np.testing.assert_allclose(evaluate_u(sol, t, xs)[:, 0], xs[:, 0] + 0.1 * (1 - t), atol=0.02)


def test_quadratic_payoff(lam):
    sol, _ = solve(model(b=0.0, g="square"), lam, x0=(0.0,))
    exact = 0.04 + levy.quad_integrate(lam, 8, lambda e: e[:, 0] ** 2)
    assert within(sol, exact)


def test_linear_driver(lam):
    sol, _ = solve(model(h={"name": "linear", "own_y": 0.5}), lam)
    exact = np.exp(0.5) * 2.1
    # explicit scheme: relative bias about (1 + dt/2)^N / e^0.5 - 1
    bias = abs((1 + 0.5 * GRID.dt) ** GRID.n_steps - np.exp(0.5)) * 2.1
    assert within(sol, exact, 1.5 * bias)


def test_nonlocal_driver_closed_form(lam):
    # h = q = B u with gamma = 1, beta = |e|, g = x: u = x + tau * int |e| dlambda_4 = x + 2 tau
    m = model(b=0.0, beta="abs-mark", gamma="one", h={"name": "linear", "q": 1.0})
    sol, _ = solve(m, lam, k=4)
    assert within(sol, 4.0, 1e-6)
    assert evaluate_u(sol, 0.5, [1.0])[0] == pytest.approx(2.0, abs=0.02)


def test_coupled_equations(lam):
    cfg = scenario_from_dict({
        "dims": {"equations": 2},
        "coefficients": {"b": {"name": "constant", "value": 0.1}, "sigma": {"name": "constant", "value": 0.2},
                         "beta": {"name": "mark"}, "g": [{"name": "linear"}, {"name": "constant", "value": 0.0}],
                         "h": [{"name": "zero"}, {"name": "linear", "y": [1.0, 0.0]}]},
    })
    m = cfg.model()
    sol, _ = solve(m, lam)
    # second equation integrates the first: u_1 = tau (x + 0.1 tau)
    assert abs(sol.u0[0] - 2.1) <= 3 * sol.std_error[0]
    assert abs(sol.u0[1] - 2.1) <= 3 * sol.std_error[1] + 0.01


def test_constant_scenario(lam):
    sol, ens = solve(model(b=0.0, sigma=0.0, beta="zero", g={"name": "constant", "value": 5.0}), lam, n=500)
    xs = np.linspace(-3, 3, 9)
    for j in range(GRID.n_steps + 1):
        np.testing.assert_allclose(sol.layer_values(j, xs[:, None])[:, 0], 5.0, atol=1e-9)
    assert jump_increment_field(sol, 0, 0.5, xs[:, None], np.full((9, 1), 0.3)) == pytest.approx(np.zeros(9))
    fresh = simulate_forward(sol.coeffs, lam, 8, [2.0], GRID, 500, 1, stream=FRESH_RESIDUAL)
    assert bsde_residual(sol, fresh).rms[0] < 1e-10


def test_zero_displacement_field(lam):
    sol, _ = solve(model(beta="zero"), lam, n=2000)
    assert jump_increment_field(sol, 0, 0.3, [2.0], [0.5]) == 0.0


def test_jump_field_identity(linear):
    sol, _ = linear
    assert jump_increment_field(sol, 0, 0.5, [2.0], [0.4]) == pytest.approx(0.4, abs=1e-3)


def test_linear_interpolation_is_convex_combination(linear):
    sol, _ = linear
    t = 0.5 * (GRID.nodes[3] + GRID.nodes[4]) + 0.01
    w = (t - GRID.nodes[3]) / GRID.dt
    x = np.array([[2.2]])
    want = (1 - w) * sol.layer_values(3, x) + w * sol.layer_values(4, x)
    np.testing.assert_allclose(evaluate_u(sol, t, x, interpolation="linear"), want, rtol=1e-12)
    np.testing.assert_allclose(evaluate_u(sol, t, x), sol.layer_values(4, x), rtol=1e-12)
    with pytest.raises(ConfigurationError):
        evaluate_u(sol, 1.5, x)


def test_extrapolation_is_flagged(linear):
    sol, _ = linear
    _, flag = evaluate_u(sol, 0.5, [50.0], return_flag=True)
    assert flag
    _, flag = evaluate_u(sol, 0.5, [2.0], return_flag=True)
    assert not flag


def test_save_load_round_trip(linear, tmp_path, lam):
    sol, _ = linear
    path = tmp_path / "sol.npz"
    sol.save(path)
    back = MeshSolution.load(path, sol.coeffs, lam)
    xs = np.linspace(1, 3, 11)[:, None]
    for t in (0.0, 0.3, 1.0):
        np.testing.assert_array_equal(back.evaluate(t, xs)[0], sol.evaluate(t, xs)[0])
    np.testing.assert_array_equal(back.u0, sol.u0)
    assert back.metadata() == sol.metadata()


def test_driver_free_equals_plain_average(linear):
    sol, ens = linear
    plain = ens.states[:, -1, 0].mean()
    assert abs(sol.u0[0] - plain) <= 3 * sol.std_error[0]
    np.testing.assert_allclose(sol.path_values[:, 0], ens.states[:, -1, 0])


def test_independent_seeds_agree(lam):
    a, _ = solve(model(g="square", b=0.0), lam, x0=(0.5,), seed=11)
    b, _ = solve(model(g="square", b=0.0), lam, x0=(0.5,), seed=12)
    assert abs(a.u0[0] - b.u0[0]) <= 3 * np.hypot(a.std_error[0], b.std_error[0])


def test_fd_z_and_piecewise_basis(lam, linear):
    sol, ens = linear
    fd = solve_backward(sol.coeffs, lam, 8, GRID, ens, z_method="fd")
    hats = solve_backward(sol.coeffs, lam, 8, GRID, ens, RegressionBasis(kind="piecewise-local", cells=6))
    assert fd.u0[0] == pytest.approx(sol.u0[0], abs=1e-3)
    assert within(hats, 2.1)


def test_control_variates_reduce_spread(linear, lam):
    sol, ens = linear
    plain = solve_backward(sol.coeffs, lam, 8, GRID, ens, control_variates=False)
    assert within(plain, 2.1)
    assert sol.cv_std_error[0] < plain.cv_std_error[0]


def test_solver_rejects_bad_inputs(linear, lam):
    sol, ens = linear
    with pytest.raises(ConfigurationError):
        solve_backward(sol.coeffs, lam, 4, GRID, ens)
    with pytest.raises(ConfigurationError):
        solve_backward(sol.coeffs, lam, 8, TimeGrid(0, 1, 10), ens)
    with pytest.raises(ConfigurationError):
        solve_backward(sol.coeffs, lam, 8, GRID, ens, z_method="malliavin")


def test_nonfinite_target_is_solver_error(lam):
    g = custom("g", lambda x: np.where(np.asarray(x)[..., 0] > 2.5, np.inf, 1.0))
    with pytest.raises(SolverError, match="terminal"):
        solve(model(g=g), lam, n=2000)


def test_condition_cap(lam):
    basis = RegressionBasis(degree=3, cond_threshold=1.0, cond_cap=1.0, ridge=0.0)
    with pytest.raises(SolverError) as err:
        solve(model(), lam, n=2000, basis=basis)
    assert err.value.condition is not None and err.value.step == GRID.n_steps


def test_residual_and_fault_injection(linear, lam):
    sol, _ = linear
    fresh = simulate_forward(sol.coeffs, lam, 8, [2.0], GRID, N_PATHS, 1, stream=FRESH_RESIDUAL)
    base = bsde_residual(sol, fresh)
    bad = bsde_residual(shift_layer(sol, 10, 1.0), fresh)
    assert base.rms[0] < 0.05
    assert bad.rms[0] >= 10 * base.rms[0]
    # one shifted layer adds two unit defects: sqrt(2 / (T - t0))
    assert bad.rms[0] == pytest.approx(np.sqrt(2.0), rel=0.05)
    other = simulate_forward(sol.coeffs, lam, 4, [2.0], GRID, 100, 1)
    with pytest.raises(ConfigurationError):
        bsde_residual(sol, other)


def test_reestimated_field(linear, lam):
    sol, _ = linear
    fresh = simulate_forward(sol.coeffs, lam, 8, [2.0], GRID, N_PATHS, 3, stream=FRESH_RESIDUAL)
    rep = reestimate_jump_field(sol, fresh)
    assert rep.passed, rep.values
    assert rep.values["n_events"] > 1000


def test_ladder_without_jumps(lam):
    study = ladder_study(model(beta="zero"), lam, [2, 4, 8], GRID, [2.0], 3000, 1)
    assert study.passed
    for row in study.rows[1:]:
        assert row["forward_gap"] == 0.0 and row["solution_gap"] == 0.0 and row["u_field_gap"] == 0.0
    np.testing.assert_allclose(study.column("small_jump_second_moment"), [(4 / 3) * k ** -1.5 for k in (2, 4, 8)])


def test_ladder_rejects_bad_ks(lam):
    with pytest.raises(ConfigurationError):
        ladder_study(model(), lam, [4, 4, 8], GRID, [0.0], 100, 1)


def test_continuity_probe_constant(lam):
    sol, _ = solve(model(b=0.0, sigma=0.0, beta="zero", g={"name": "constant", "value": 5.0}), lam, n=500)
    xa = np.linspace(-1, 1, 20)
    rep = continuity_modulus_probe(sol, linear_modulus(), (xa, xa + 0.1), 1.0)
    assert rep.values["C"] < 1e-12


def test_continuity_probe_affine(linear):
    sol, _ = linear
    M2 = 2.0
    xa = np.zeros(10)
    xb = np.linspace(1e-3, 1e-2, 10)
    rep = continuity_modulus_probe(sol, linear_modulus(), (xa, xb), M2, kappas=[1.0], t=1.0)
    assert rep.values["C"] == pytest.approx(1.0 / M2, rel=1e-3)
    held = continuity_modulus_probe(sol, linear_modulus(), (xa, xb), M2, t=1.0, envelope=(rep.values["C"], 1.0))
    assert held.passed


def test_growth_envelope_linear(linear):
    sol, _ = linear
    rep = growth_envelope(sol)
    assert rep.passed and rep.values["p"] <= 1
