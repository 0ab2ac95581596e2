import math
from dataclasses import replace

import numpy as np
import pytest

import design_theory as dt
from errors import ConfigError, DesignError, EtaValidityError


@pytest.fixture
def constant_params():
    return dt.DesignParams(mu=4.0, rho=0.1, profile=dt.NoiseProfile.constant(1.0),
                           N=64, R=8, B=16, eta=0.01, T_steps=1000)


# ----------------------------- noise profiles -----------------------------

def test_power_law_average_close_to_relaxation():
    p = dt.NoiseProfile.power_law(0.3)
    exact = p.sigma_bar_sq(1000)
    approx = dt.sigma_bar_sq_approx(0.3, 1.0, 1000)
    assert exact == pytest.approx(approx, rel=0.01)
    assert p.sigma(0) == 0.0


def test_cell_averaged_average_equals_relaxation():
    p = dt.NoiseProfile.cell_averaged(0.25, tau=2.0)
    for H in (1, 3, 17, 256):
        direct = float(np.mean(np.asarray(p.sigma(np.arange(H))) ** 2))
        assert direct == pytest.approx(p.sigma_bar_sq_relaxed(H), rel=1e-10)


def test_tabulated_holds_last_value():
    p = dt.NoiseProfile.tabulated([0.5, 1.0, 2.0])
    assert p.sigma(5) == 2.0
    assert p.sigma_bar_sq(2) == pytest.approx((0.25 + 1.0) / 2)
    assert p.sigma_bar_sq_relaxed(1.5) == pytest.approx(0.25 + 0.5 * ((0.25 + 1.0) / 2 - 0.25))


@pytest.mark.parametrize("factory,key", [
    (lambda: dt.NoiseProfile.power_law(0.5), "alpha"),
    (lambda: dt.NoiseProfile.tabulated([1.0, 0.5]), "sigma_table"),
    (lambda: dt.NoiseProfile.tabulated([]), "sigma_table"),
    (lambda: dt.NoiseProfile("gaussian"), "noise"),
])
def test_invalid_profiles(factory, key):
    with pytest.raises(ConfigError) as exc:
        factory()
    assert exc.value.key == key


# ----------------------------- bound -----------------------------

def test_variance_and_bound(constant_params):
    V = dt.variance_param(constant_params)
    assert V == pytest.approx(1 / 16 + 1 / 64 + 0.1 / 8)
    terms = dt.bound_terms(constant_params)
    assert terms["optimisation"] == pytest.approx(12.0 / (0.01 * 1000))
    assert terms["noise"] == pytest.approx(8 * 0.01 * V)
    assert dt.convergence_bound(constant_params) == pytest.approx(terms["optimisation"] + terms["noise"])


def test_eta_validity_conditions(constant_params):
    assert dt.eta_validity(replace(constant_params, eta=0.49)).valid
    check = dt.eta_validity(replace(constant_params, eta=0.5))
    assert not check.valid and check.condition == dt.COND_SMOOTH
    biased = replace(constant_params, kappa=1.0, eta=0.1)
    assert dt.eta_validity(biased).condition == dt.COND_BIAS
    with pytest.raises(EtaValidityError) as exc:
        dt.convergence_bound(biased)
    assert exc.value.condition == dt.COND_BIAS


def test_eta_cap(constant_params):
    assert dt.eta_cap(constant_params) < 0.5
    assert dt.eta_cap(constant_params) == pytest.approx(0.5)
    biased = replace(constant_params, kappa=1.0)
    cap = dt.eta_cap(biased)
    assert cap == pytest.approx(8 / (2 * math.sqrt(2) * 64))
    assert dt.eta_validity(replace(biased, eta=cap)).valid


def test_horizon_needs_divisibility():
    d = dt.DesignParams(mu=1.0, rho=0.0, profile=dt.NoiseProfile.constant(1.0), N=10, R=3)
    with pytest.raises(ConfigError):
        _ = d.horizon


# ----------------------------- design -----------------------------

def test_closed_form_general_branch():
    sol = dt.optimal_design_power_law(0.25, 5.0, 0.5)
    assert sol.branch == "general"
    assert sol.y_star == pytest.approx(1.7913, abs=1e-4)
    assert sol.x_star == pytest.approx(0.9449, abs=1e-4)


def test_closed_form_rho_zero():
    sol = dt.optimal_design_power_law(0.25, 5.0, 0.0)
    assert sol.branch == "rho_zero"
    assert sol.y_star == pytest.approx(5.0)
    assert sol.x_star == pytest.approx(5.0)


def test_closed_form_rho_inverse_mu():
    sol = dt.optimal_design_power_law(0.25, 5.0, 0.2)
    assert sol.branch == "rho_inverse_mu"
    assert sol.x_star == pytest.approx(5.0 / 3.0)
    assert sol.y_star == pytest.approx(2.5)


def test_closed_form_rejects_alpha():
    with pytest.raises(DesignError):
        dt.optimal_design_power_law(0.5, 5.0, 0.1)
    with pytest.raises(DesignError):
        dt.optimal_design_power_law(0.0, 5.0, 0.1)


ALPHAS = np.linspace(0.05, 0.45, 5)
MUS = (0.5, 1.0, 2.0, 5.0, 20.0)
RHOS = (0.01, 0.1, 0.3, 0.6, 0.9)


@pytest.mark.parametrize("alpha", ALPHAS)
def test_closed_form_agrees_with_grid(alpha):
    for mu in MUS:
        for rho in RHOS:
            if math.isclose(rho * mu, 1.0):
                continue
            closed = dt.optimal_design_power_law(alpha, mu, rho)
            d = dt.DesignParams(mu=mu, rho=rho, profile=dt.NoiseProfile.power_law(alpha))
            grid = dt.optimal_design_numeric(d)
            assert not grid.boundary
            assert grid.x_star == pytest.approx(closed.x_star, rel=0.01)
            assert grid.y_star == pytest.approx(closed.y_star, rel=0.01)
            y = closed.y_star
            assert closed.x_star == pytest.approx(y * y / (mu - rho * y * y), rel=1e-9)


@pytest.mark.parametrize("alpha", [0.1, 0.3])
@pytest.mark.parametrize("rho", [0.05, 0.3])
def test_design_grows_with_mu(alpha, rho):
    sols = [dt.optimal_design_power_law(alpha, mu, rho) for mu in (0.5, 1, 2, 4, 8, 16)]
    xs = [s.x_star for s in sols]
    ys = [s.y_star for s in sols]
    assert all(b >= a for a, b in zip(xs, xs[1:]))
    assert all(b >= a for a, b in zip(ys, ys[1:]))


def test_objective_I_is_min_of_J():
    d = dt.DesignParams(mu=6.0, rho=0.1, profile=dt.NoiseProfile.power_law(0.3))
    x = 3.0
    y = dt.y_from_x(x, d.mu, d.rho)
    assert dt.objective_J(x, y, d) == pytest.approx(dt.objective_I(x, d))
    for other in (0.5 * y, 2.0 * y):
        assert dt.objective_J(x, other, d) > dt.objective_I(x, d)


def test_k_curve_is_scaled_root_of_I():
    alpha, mu, rho = 0.3, 6.0, 0.1
    d = dt.DesignParams(mu=mu, rho=rho, profile=dt.NoiseProfile.power_law(alpha))
    xs = np.geomspace(0.1, 100, 7)
    K = dt.k_curve(alpha, mu, rho, xs)
    np.testing.assert_allclose(K ** 2 / (2 * alpha + 1), dt.objective_I(xs, d), rtol=1e-12)


def test_numeric_design_flags_boundary():
    # constant noise: I decreases in x all the way to the grid edge
    d = dt.DesignParams(mu=4.0, rho=0.1, profile=dt.NoiseProfile.constant(1.0))
    sol = dt.optimal_design_numeric(d, lo=1e-2, hi=1e3, points=200)
    assert sol.boundary
    assert sol.x_star == pytest.approx(1e3)


@pytest.mark.parametrize("lo,hi,points,key", [(5.0, 5.0, 50, "x_lo"), (10.0, 1.0, 50, "x_lo"), (0.0, 1.0, 50, "x_lo"),
                                             (0.1, 10.0, 2, "x_points")])
def test_numeric_design_rejects_empty_range(lo, hi, points, key):
    d = dt.DesignParams(mu=4.0, rho=0.1, profile=dt.NoiseProfile.power_law(0.3))
    with pytest.raises(ConfigError) as exc:
        dt.optimal_design_numeric(d, lo=lo, hi=hi, points=points)
    assert exc.value.key == key


# ----------------------------- step size -----------------------------

def test_optimal_eta_minimises_j0(constant_params):
    C = 1e5
    a, b = dt.j0_coefficients(constant_params, C)
    assert a == pytest.approx(12.0 * (16 + 4.0 * 8) / C)
    eta = dt.optimal_eta(constant_params, C)
    assert eta == pytest.approx(math.sqrt(a / b))
    for other in (0.5 * eta, 1.5 * eta):
        assert dt.j0(other, constant_params, C) > dt.j0(eta, constant_params, C)


def test_optimal_eta_falls_back_to_cap_without_noise(constant_params):
    quiet = replace(constant_params, profile=dt.NoiseProfile.constant(0.0))
    assert dt.optimal_eta(quiet, 1e4) == dt.eta_cap(quiet)


def test_j0_rejects_budget(constant_params):
    with pytest.raises(ConfigError):
        dt.j0_coefficients(constant_params, 0.0)
