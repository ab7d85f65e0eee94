import math

import numpy as np
import pytest
from scipy import integrate

from thinlevy.endgame import (LevySimConfig, g_scale, kappa, levy_measure_density, predict_log_tails,
                              predict_tails, psi, simulate_levy_sup)
from thinlevy.numerics import NumericalError
from thinlevy.ratefn import log_phi

KAPPA = 3.6515657620937905
A_CONST = 0.06405719326107179
D_CONST = 0.12887964823386427


def test_frozen_constants(endgame):
    assert abs(endgame.kappa - KAPPA) < 1e-10
    assert abs(endgame.A - A_CONST) < 1e-10
    assert abs(endgame.D - D_CONST) < 1e-10


def test_constant_relations(table, endgame):
    assert 0 < endgame.A < endgame.D
    assert endgame.D == table.B / table.theta_star
    assert endgame.A == pytest.approx(table.B * endgame.kappa / endgame.psi(table.theta_star), rel=1e-14)


def test_psi_origin_and_slope(endgame):
    assert psi(0.0, endgame) == 0.0
    h = 1e-8
    assert abs(psi(h, endgame) / h - endgame.kappa) < 1e-6


def test_psi_is_convex_above_drift(endgame):
    a = np.linspace(0.0, 6.0, 13)
    vals = np.array([endgame.psi(x) for x in a])
    assert np.all(vals[1:-1] <= 0.5 * (vals[:-2] + vals[2:]) + 1e-12)
    # compensated jumps: psi(a) - kappa a = int (e^{-ay} - 1 + ay) Pi(dy) > 0
    assert np.all(vals[1:] > endgame.kappa * a[1:])


def test_psi_rejects_negative(endgame):
    with pytest.raises(ValueError):
        endgame.psi(-1.0)


def test_kappa_is_pure(endgame):
    assert kappa(endgame.theta_star, endgame.tau) == endgame.kappa


def test_levy_density_domain(endgame):
    with pytest.raises(ValueError):
        levy_measure_density(np.array([0.5]), endgame.theta_star)
    vals = levy_measure_density(np.array([-0.5, -1.0, -2.0]), endgame.theta_star)
    assert np.all(vals > 0)
    assert np.allclose(vals, endgame.pi(np.array([0.5, 1.0, 2.0])))


def test_scale_function_increasing(endgame):
    vs = [0.25, 0.5, 1.0, 2.0]
    ws = [endgame.W(v) for v in vs]
    assert all(a < b for a, b in zip(ws, ws[1:]))
    assert all(0 < endgame.g(v) <= 1 for v in vs)
    assert g_scale(0.0, endgame) == (0.0, 0.0)
    with pytest.raises(ValueError):
        g_scale(-1.0, endgame)


def test_scale_function_without_jumps(endgame):
    # pure drift: W = 1/kappa, so g = 1 for every v > 0
    flat = endgame.without_jumps()
    assert flat.W(1.0) == pytest.approx(1.0 / endgame.kappa, rel=1e-8)
    assert flat.g(2.0) == pytest.approx(1.0, abs=1e-8)


def test_predictions_share_exponent(table, endgame):
    u = 6.0
    lsu, lh1 = predict_log_tails(u, table, endgame)
    assert lsu - lh1 == pytest.approx(math.log(endgame.D / endgame.A), abs=1e-12)
    assert lh1 == pytest.approx(math.log(endgame.A) - 1.25 * math.log(u) + log_phi(u, table), abs=1e-12)
    su, h1 = predict_tails(u, table, endgame)
    assert 0 < h1 < su


def test_sim_config_validation():
    with pytest.raises(ValueError):
        LevySimConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        LevySimConfig(T=0.0)


def test_simulation_is_deterministic(endgame):
    cfg = LevySimConfig(T=5.0)
    a = simulate_levy_sup(endgame, cfg, reps=600, seed=4, batch=250)
    b = simulate_levy_sup(endgame, cfg, reps=600, seed=4, batch=250)
    assert np.array_equal(a.inf, b.inf)
    assert np.all(a.inf <= 0) and np.all(a.inf <= a.end)


def test_simulated_drift_and_variance(endgame):
    # X_T has mean kappa T and variance T * int z^2 Pi(dz)
    T = 4.0
    s = simulate_levy_sup(endgame, LevySimConfig(T=T), reps=20_000, seed=9)
    m2, _ = integrate.quad(lambda y: y * y * endgame.pi(np.array([y]))[0], 0, np.inf, limit=400)
    se = s.end.std(ddof=1) / math.sqrt(s.end.size)
    assert abs(s.end.mean() - endgame.kappa * T) < 3 * se
    assert abs(s.end.var(ddof=1) / (m2 * T) - 1) < 0.05


def test_survival_matches_scale_function(endgame):
    v = 1.0
    s = simulate_levy_sup(endgame, LevySimConfig(T=20.0), reps=4000, seed=12)
    ok = (s.inf >= -v).astype(float)
    se = ok.std(ddof=1) / math.sqrt(ok.size)
    assert abs(ok.mean() - endgame.g(v)) < 3 * se


def test_tail_constants_reject_bad_psi(table):
    from thinlevy.endgame import tail_constants
    with pytest.raises(NumericalError):
        tail_constants(table, 1.0, 0.0)
