import math

import pytest

import equations as eq
from config import MU_LARGE_MODEL, MU_SMALL_MODEL
from errors import ConfigError

PAIRS = [(7, 1), (6, 2), (5, 3), (4, 4), (2, 6), (1, 7)]

# published gamma values; the large-model row was printed with a slightly lower mu,
# so it only agrees to two decimals within 0.02
PUBLISHED_SMALL_MODEL = {(7, 1): 1.02, (5, 3): 0.34, (4, 4): 0.26, (2, 6): 0.17, (1, 7): 0.15}
PUBLISHED_LARGE_MODEL = {(7, 1): 1.29, (6, 2): 0.65, (5, 3): 0.43, (4, 4): 0.32, (2, 6): 0.22, (1, 7): 0.18}


def test_costs_and_ratio():
    p = eq.ComputeParams(W=6, T=2, mu=5.0, C=2.0)
    assert eq.cost_without_buffer(p) == pytest.approx(12.0)
    assert eq.cost_with_buffer(p) == pytest.approx(8.0)
    assert eq.compute_ratio(p) == pytest.approx(8.0 / 12.0)
    assert eq.parity_scale(p, p) == pytest.approx(eq.compute_ratio(p))


@pytest.mark.parametrize("pair,expected", sorted(PUBLISHED_SMALL_MODEL.items()))
def test_gamma_matches_published_small_model(pair, expected):
    W, T = pair
    assert eq.compute_ratio(eq.ComputeParams(W, T, MU_SMALL_MODEL)) == pytest.approx(expected, abs=0.005)


@pytest.mark.parametrize("pair,expected", sorted(PUBLISHED_LARGE_MODEL.items()))
def test_gamma_close_to_published_large_model(pair, expected):
    W, T = pair
    assert eq.compute_ratio(eq.ComputeParams(W, T, MU_LARGE_MODEL)) == pytest.approx(expected, abs=0.02)


def test_six_two_entry_follows_the_formula():
    # the published 0.41 at mu = 6.84 does not follow from (1 + W/T)/(1 + mu)
    g = eq.compute_ratio(eq.ComputeParams(6, 2, MU_SMALL_MODEL))
    assert g == pytest.approx(4.0 / 7.84, rel=1e-12)
    assert abs(g - 0.41) > 0.09


def test_gamma_table_rows_in_order():
    rows = eq.gamma_table(MU_LARGE_MODEL, PAIRS)
    assert [(r["W"], r["T"]) for r in rows] == PAIRS
    assert rows[1]["gamma"] == pytest.approx(0.6369, abs=1e-4)
    assert all(r["cost_with_buffer"] / r["cost_without_buffer"] == pytest.approx(r["gamma"]) for r in rows)


def test_gamma_one_when_w_over_t_equals_mu():
    assert eq.compute_ratio(eq.ComputeParams(6, 2, 3.0)) == pytest.approx(1.0)


@pytest.mark.parametrize("kw,key", [
    ({"W": 1, "T": 0, "mu": 1.0}, "T"),
    ({"W": -1, "T": 1, "mu": 1.0}, "W"),
    ({"W": 1, "T": 1, "mu": -0.5}, "mu"),
    ({"W": 1, "T": 1, "mu": 1.0, "C": 0.0}, "C"),
])
def test_invalid_params(kw, key):
    with pytest.raises(ConfigError) as exc:
        eq.ComputeParams(**kw)
    assert exc.value.key == key


def test_estimate_mu():
    assert eq.estimate_mu(K_training=1200, T=2, K_inference=600, W=6) == pytest.approx(6.0)
    with pytest.raises(ConfigError):
        eq.estimate_mu(100, 1, 0, 1)


def test_median_iqr():
    med, q25, q75 = eq.median_iqr([5.12, 5.28, 5.48, 5.30, 5.20])
    assert med == pytest.approx(5.28)
    assert q25 <= med <= q75
    with pytest.raises(ConfigError):
        eq.median_iqr([])


def test_updates_for_budget():
    assert eq.updates_for_budget(100.0, 7.0) == 14
    assert eq.updates_for_budget(21.0, 7.0) == 3
    assert math.isclose(eq.updates_for_budget(0.0, 1.0), 0)
    with pytest.raises(ConfigError):
        eq.updates_for_budget(10.0, 0.0)


def test_gamma_falls_with_fewer_workers_per_trainer():
    for mu in (1.0, MU_SMALL_MODEL, MU_LARGE_MODEL):
        gammas = [r["gamma"] for r in eq.gamma_table(mu, PAIRS)]
        assert all(b < a for a, b in zip(gammas, gammas[1:]))


def test_gamma_falls_as_rollouts_get_dearer():
    for W, T in PAIRS:
        gammas = [eq.compute_ratio(eq.ComputeParams(W, T, mu)) for mu in (0.5, 1.0, 3.0, 6.84, 20.0)]
        assert all(b < a for a, b in zip(gammas, gammas[1:]))


@pytest.mark.parametrize("k", [0.001, 3.0, 1e6])
def test_estimate_mu_ignores_window_length(k):
    base = eq.estimate_mu(1200.0, 2, 450.0, 6)
    assert eq.estimate_mu(k * 1200.0, 2, k * 450.0, 6) == pytest.approx(base, rel=1e-12)
