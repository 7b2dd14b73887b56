import numpy as np
import pytest
from scipy import integrate

from conftest import custom, model
from levyipde import levy
from levyipde.coefficients import (ConcaveModulus, SamplePlan, bihari_envelope, check_modulus, effective_driver,
                                   linear_modulus, log_modulus, mao_distance_test, modulus_from_spec,
                                   one_sided_mao_test, osgood_integral, power_modulus, validate_assumptions)
from levyipde.errors import ConfigurationError, ModelError

SMALL_PLAN = SamplePlan(n_pairs=2000, seed=3)


def pairs(n=500, lo=-5, hi=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, n), rng.uniform(lo, hi, n)


# -- effective driver

def test_driver_with_zero_zeta_is_plain_h(lam):
    m = model(h={"name": "linear", "own_y": 0.5, "q": 1.0}, gamma="one")
    v = effective_driver(m, 0, 0.3, [1.0], [2.0], [0.0], lambda e: np.zeros(len(e)), 4, lam)
    assert v == pytest.approx(1.0)


def test_driver_collapses_to_mass(lam):
    m = model(h={"name": "linear", "q": 1.0}, gamma="one")
    v = effective_driver(m, 0, 0.0, [0.0], [0.0], [0.0], lambda e: np.ones(len(e)), 4, lam)
    assert v == pytest.approx(levy.truncated_mass(lam, 4), rel=1e-9)


def test_driver_with_square_gamma(lam):
    c, y = 0.6, 1.0
    m = model(h={"name": "linear", "own_y": c, "q": 1.0}, gamma="square")
    v = effective_driver(m, 0, 0.0, [0.0], [y], [0.0], lambda e: np.ones(len(e)), 4, lam)
    assert v == pytest.approx(c * y + 7 / 6, rel=1e-9)


def test_driver_nonfinite_is_model_error(lam):
    bad = custom("h", lambda t, x, y, z, q: np.float64(np.inf))
    with pytest.raises(ModelError, match="driver 0"):
        effective_driver(model(h=bad), 0, 0.0, [0.0], [0.0], [0.0], lambda e: np.zeros(len(e)), 4, lam)


# -- assumption validation

def test_linear_model_passes():
    rep = validate_assumptions(model(), SMALL_PLAN)
    assert rep.passed, [c.name for c in rep.failures()]
    assert rep.check("beta-jump-bound").worst_ratio <= 1.0 + 1e-12


def test_quadratic_driver_fails_with_witness():
    rep = validate_assumptions(model(h="quadratic-q"), SMALL_PLAN)
    chk = rep.check("driver-lipschitz[0]")
    assert not chk.passed and chk.witness is not None and chk.worst_ratio > 1
    q0, q1 = chk.witness["q"]
    assert abs(q0 ** 2 - q1 ** 2) > abs(q0 - q1)


def test_sqrt_terminal_fails_mao_near_origin():
    rep = validate_assumptions(model(g="sqrt-abs"), SMALL_PLAN)
    chk = rep.check("mao-g[0]-p2")
    assert not chk.passed
    x, xp = chk.witness["x"][0], chk.witness["x_prime"][0]
    assert abs(np.sqrt(abs(x)) - np.sqrt(abs(xp))) > abs(x - xp)
    assert min(abs(x), abs(xp)) < 1.0


def test_growing_jump_coefficient_fails():
    big = custom("beta", lambda t, x, e: 2.0 * np.broadcast_to(e, np.broadcast_shapes(np.shape(x), np.shape(e))),
                 state_free=True)
    rep = validate_assumptions(model(beta=big), SMALL_PLAN)
    assert not rep.check("beta-jump-bound").passed


def test_declared_modulus_is_used():
    m = model(g="square")
    assert not validate_assumptions(m, SMALL_PLAN).check("mao-g[0]-p2").passed
    m.moduli = {"g": {"name": "linear", "constant": 100.0}}
    assert validate_assumptions(m, SMALL_PLAN).check("mao-g[0]-p2").passed


def test_validation_is_deterministic():
    a = list(validate_assumptions(model(g="sqrt-abs"), SMALL_PLAN).rows())
    b = list(validate_assumptions(model(g="sqrt-abs"), SMALL_PLAN).rows())
    assert a == b


# -- Mao tests

def test_mao_identity_passes():
    rep = mao_distance_test(lambda x: x, linear_modulus(1.0), 2, pairs())
    assert rep.passed and rep.checks[0].worst_ratio == pytest.approx(1.0)


def test_mao_slope_two():
    bad = mao_distance_test(lambda x: 2 * x, linear_modulus(1.0), 2, pairs())
    assert not bad.passed and bad.checks[0].worst_ratio == pytest.approx(2.0)
    assert bad.checks[0].witness is not None
    assert mao_distance_test(lambda x: 2 * x, linear_modulus(4.0), 2, pairs()).passed


def test_mao_rejects_small_p():
    with pytest.raises(ConfigurationError):
        mao_distance_test(lambda x: x, linear_modulus(), 1.5, pairs())


def test_one_sided_examples():
    tiny = linear_modulus(1e-12)
    assert one_sided_mao_test(lambda x: -x, tiny, 2, pairs()).passed
    assert not mao_distance_test(lambda x: -x, tiny, 2, pairs()).passed
    rep = one_sided_mao_test(lambda x: x, linear_modulus(1.0), 2, pairs())
    assert rep.passed and rep.values["counterexamples"] == 0


def test_one_sided_needs_state_valued_function():
    xa, xb = np.zeros((3, 2)), np.ones((3, 2))
    with pytest.raises(ConfigurationError):
        one_sided_mao_test(lambda x: x[:, 0], linear_modulus(), 2, (xa, xb))


# -- moduli and Bihari

def test_shipped_moduli_are_concave():
    for rho in (linear_modulus(3.0), log_modulus(), power_modulus(0.5), modulus_from_spec({"name": "log"})):
        assert check_modulus(rho).passed


def test_convex_function_fails_concavity():
    with pytest.raises(ConfigurationError):
        power_modulus(2.0)
    rep = check_modulus(ConcaveModulus(lambda u: u * u, "square", False))
    assert not rep.check("rho-midpoint-concave").passed


def test_osgood_integral_diverges_only_for_osgood():
    lin = [osgood_integral(linear_modulus(), 10.0 ** -j) for j in (4, 8, 16)]
    sqrt = [osgood_integral(power_modulus(0.5), 10.0 ** -j) for j in (4, 8, 16)]
    assert lin[-1] - lin[-2] == pytest.approx(8 * np.log(10), rel=1e-9)
    assert sqrt[-1] - sqrt[-2] < 1e-3


def test_bihari_exponential():
    assert bihari_envelope(1.0, 1.0, linear_modulus(), 1.0) == pytest.approx(np.e, rel=1e-12)
    assert bihari_envelope(0.0, 2.0, log_modulus(), 3.0) == 0.0
    assert bihari_envelope(0.7, 1.0, linear_modulus(), 0.0) == 0.7


def test_bihari_zero_start_needs_osgood():
    with pytest.raises(ConfigurationError):
        bihari_envelope(0.0, 1.0, power_modulus(0.5), 1.0)


def test_bihari_log_modulus_against_ode():
    rho = log_modulus()
    closed = np.exp(np.log(1e-4) * np.exp(-1.0))  # u' = u log(1/u) below 1/e
    sol = integrate.solve_ivp(lambda t, y: rho(y), (0, 1), [1e-4], rtol=1e-10, atol=1e-14)
    got = bihari_envelope(1e-4, 1.0, rho, 1.0)
    assert got == pytest.approx(closed, rel=1e-9)
    assert got == pytest.approx(sol.y[0, -1], rel=1e-7)


def test_bihari_crosses_the_tangent_point():
    rho = log_modulus()
    sol = integrate.solve_ivp(lambda t, y: rho(y), (0, 2.0), [0.1], rtol=1e-11, atol=1e-14)
    assert sol.y[0, -1] > np.exp(-1)
    assert bihari_envelope(0.1, 1.0, rho, 2.0) == pytest.approx(sol.y[0, -1], rel=1e-7)
