import json
import math

import numpy as np
import pytest

from thinlevy.process import (ClockSample, Measure, ModelParams, TruncationScheme, analytic_mean, clock_cdf,
                              clock_log_mgf, clock_weight, eval_path, extend_clocks, fire_probability,
                              hitting_time, make_vertex_process, sample_batch, sample_clocks,
                              tail_log_mgf, tail_mean_var_on_grid, tail_moments)

P = ModelParams()
# blocked direct summation of c_i (1 - exp(-5 c_i) - 5 c_i) for 1e5 < i <= 1e9 plus an integral beyond
M_N5_BRUTE = -6.215530199201348


def test_model_params_derived_fields():
    assert P.alpha == pytest.approx(0.4)
    assert P.rho == pytest.approx(0.6)
    assert P.eta == pytest.approx(0.2)
    for tau in (3.0, 4.0, 2.5):
        with pytest.raises(ValueError):
            ModelParams(tau=tau)


def test_clock_weight():
    assert clock_weight(1, P) == 1.0
    assert clock_weight(2, P) == pytest.approx(0.757858283255199, rel=1e-12)
    assert clock_weight(10**6, P) == pytest.approx(10**-2.4, rel=1e-12)
    with pytest.raises(ValueError):
        clock_weight(0, P)


def test_truncation_scheme_invariants():
    with pytest.raises(ValueError):
        TruncationScheme(N=999)
    with pytest.raises(ValueError):
        TruncationScheme(tail_grid_step=0.0)
    assert TruncationScheme(N=3, tail_mode="none").N == 3
    assert TruncationScheme().grid(2.0).size == 1025


def test_measure_rejects_non_positive_tilt():
    with pytest.raises(ValueError):
        Measure.tilted(0.0)
    with pytest.raises(ValueError):
        Measure.tilted(-1.0)


def test_tilted_law_tends_to_original_as_theta_vanishes():
    c = np.array([1.0, 0.3, 0.01])
    t = np.array([0.2, 1.0, 2.0])
    assert np.allclose(clock_cdf(c, t, 2.0, Measure.tilted(1e-12)), 1 - np.exp(-c * t), rtol=1e-9)


def test_tilted_fire_probability_closed_form():
    c, u, th = np.array([0.8, 0.1, 1e-4]), 3.0, 1.3
    x = c * u
    ref = np.exp(th * x) * (1 - np.exp(-x)) / (np.exp(th * x) * (1 - np.exp(-x)) + np.exp(-x))
    assert np.allclose(fire_probability(c, u, Measure.tilted(th)), ref, rtol=1e-12)


def test_sampling_is_deterministic_and_serialisable():
    scheme = TruncationScheme(N=1000)
    a = sample_clocks(P, 2.0, scheme, Measure.tilted(0.7), seed=42, replica=3)
    b = sample_clocks(P, 2.0, scheme, Measure.tilted(0.7), seed=42, replica=3)
    assert a.to_json() == b.to_json()
    doc = json.loads(a.to_json())
    assert doc["measure"] == {"kind": "tilted", "theta": 0.7}
    back = ClockSample.from_json(a.to_json())
    for t in (0.0, 0.5, 1.7, 2.0):
        assert eval_path(back, t).value == pytest.approx(eval_path(a, t).value, abs=1e-12)
    assert np.all(np.isinf(a.head_times) | (a.head_times <= 2.0))
    assert np.all(a.head_times > 0)


def test_original_clock_mean():
    # E[T_2] = 1 / c_2 = 2^0.4
    scheme = TruncationScheme(N=1000, tail_mode="none")
    t2 = np.array([sample_clocks(P, 5.0, scheme, seed=9, replica=r).head_times[0] for r in range(20_000)])
    se = t2.std(ddof=1) / math.sqrt(t2.size)
    assert abs(t2.mean() - 2**0.4) < 3 * se


def test_tilted_marginal_matches_law():
    u, th, R = 2.0, 0.8, 100_000
    scheme = TruncationScheme(N=1000, tail_mode="none")
    batch = sample_batch(P, u, scheme, Measure.tilted(th), R, np.random.default_rng(5))
    for i in (2, 5, 40):
        c = clock_weight(i, P)
        sel = batch.weight == c
        for t in (0.5, 1.5):
            freq = np.sum(batch.time[sel] <= t) / R
            p = float(clock_cdf(c, t, u, Measure.tilted(th)))
            assert abs(freq - p) < 3 * math.sqrt(p * (1 - p) / R) + 1e-12


def test_tail_moments_zero_at_origin_and_brute_force():
    scheme = TruncationScheme(N=100_000)
    assert tail_moments(P, scheme, 0.0, Measure.original())[:2] == (0.0, 0.0)
    tm = tail_moments(P, scheme, 5.0, Measure.original())
    assert abs(tm.mean - M_N5_BRUTE) < 1e-4
    assert tm.err < 1e-6


def test_tail_variance_is_monotone_on_grid():
    scheme = TruncationScheme(N=1000)
    for measure in (Measure.original(), Measure.tilted(1.1)):
        grid = scheme.grid(4.0)
        m, v = tail_mean_var_on_grid(P, scheme, 4.0, measure, grid)
        assert m[0] == 0.0 and v[0] == 0.0
        assert np.all(np.diff(v) >= 0)


@pytest.mark.parametrize("measure", [Measure.original(), Measure.tilted(0.9)])
def test_tail_moment_differences_match_direct_sum(measure):
    u, t = 3.0, 2.0
    lo = tail_moments(P, TruncationScheme(N=1000), t, measure, u)
    hi = tail_moments(P, TruncationScheme(N=2000), t, measure, u)
    c = np.arange(1001, 2001, dtype=float) ** -0.4
    p = clock_cdf(c, t, u, measure)
    assert lo.mean - hi.mean == pytest.approx(float(np.sum(c * (p - c * t))), rel=1e-8)
    assert lo.var - hi.var == pytest.approx(float(np.sum(c * c * p * (1 - p))), rel=1e-8)


@pytest.mark.parametrize("theta", [0.3, 1.3, 3.0])
def test_clock_log_mgf_against_extended_precision(theta):
    import mpmath as mp
    xs = [1e-6, 1.99e-2, 2.01e-2, 0.2, 3.0]
    got = clock_log_mgf(np.array(xs), theta)
    with mp.workdps(50):
        for x, g in zip(xs, got):
            x = mp.mpf(x)
            ref = mp.log(mp.exp(-x) + (1 - mp.exp(-x)) * mp.exp(theta * x)) - theta * x * x
            assert abs(g - float(ref)) < 1e-10 * abs(float(ref))


def test_tail_log_mgf_vanishes_without_tilt():
    assert abs(tail_log_mgf(P, TruncationScheme(N=1000), 3.0, 0.0)) < 1e-14
    assert tail_log_mgf(P, TruncationScheme(N=1000, tail_mode="none"), 3.0, 1.0) == 0.0


def test_eval_path_three_clock_fixture():
    c2, c3 = 2**-0.4, 3**-0.4
    s = ClockSample.from_jumps(P, 3.0, [c2, c3], [1.0, math.inf])
    pv = eval_path(s, 2.0)
    assert pv.value == pytest.approx(1 + c2 * (1 - 2 * c2) - 2 * c3**2, abs=1e-14)
    assert pv.value == pv.start + pv.drift * pv.t + pv.head_part + pv.tail_mean_part + pv.tail_noise_part
    assert eval_path(s, 0.0).value == 1.0
    with pytest.raises(ValueError):
        eval_path(s, 3.5)


def test_jumps_are_upward_and_right_continuous():
    s = ClockSample.from_jumps(P, 2.0, [0.3], [1.0], drift=0.0)
    before = eval_path(s, 1.0 - 1e-12).value
    at = eval_path(s, 1.0).value
    assert at - before == pytest.approx(0.3, abs=1e-9)


def test_hitting_time_fixtures():
    assert hitting_time(ClockSample.from_jumps(P, 3.0, [], [], drift=-1.0)) == pytest.approx(1.0, abs=1e-12)
    # one jump of 0.5 at t=0.5 on net slope -1 (drift offsets the compensator 0.25)
    s = ClockSample.from_jumps(P, 3.0, [0.5], [0.5], drift=-0.75)
    assert hitting_time(s) == pytest.approx(1.5, abs=1e-12)
    assert hitting_time(s.without_jump(0)) <= hitting_time(s)
    assert hitting_time(ClockSample.from_jumps(P, 0.5, [], [], drift=-1.0)) == 0.5


def test_hitting_time_tie_at_jump_counts_as_hit():
    s = ClockSample.from_jumps(P, 3.0, [0.5], [1.0], drift=-0.75)
    assert hitting_time(s) == pytest.approx(1.0, abs=1e-12)


def test_removing_jumps_never_delays_the_hit():
    scheme = TruncationScheme(N=1000)
    for r in range(20):
        s = sample_clocks(P, 2.0, scheme, seed=3, replica=r)
        h = hitting_time(s)
        fired = np.flatnonzero(s.head_times <= 2.0)
        for k in fired[:3]:
            assert hitting_time(s.without_jump(k)) <= h + 1e-12


def test_batch_first_passage_matches_single_sample_solver():
    scheme = TruncationScheme(N=1000)
    batch = sample_batch(P, 2.0, scheme, Measure.original(), 300, np.random.default_rng(8))
    hit, when = batch.first_passage()
    for r in range(batch.R):
        h = hitting_time(batch.replica(r))
        assert (h < 2.0) == hit[r] or abs(h - 2.0) < 1e-12
        if hit[r]:
            assert h == pytest.approx(when[r], abs=1e-9)


def test_make_vertex_process():
    assert make_vertex_process(P, 1) == (1.0, 0.0)
    start, drift = make_vertex_process(P, 2)
    assert start == pytest.approx(2**-0.4)
    assert drift == pytest.approx(1 - 2**-0.8)


def test_vertex_process_excludes_its_clock_and_earlier_silence_probability():
    # P(no clock j < i fires by u) = exp(-u sum_{j<i} c_j) at i = 3, u = 2
    u, R = 2.0, 20_000
    scheme = TruncationScheme(N=1000, tail_mode="none")
    first = sample_clocks(P, u, scheme, seed=1, replica=0, vertex=3)
    assert not np.any(np.isclose(first.weights, 3**-0.4))
    assert first.start == pytest.approx(3**-0.4)
    silent = 0
    for r in range(R):
        s = sample_clocks(P, u, scheme, seed=1, replica=r, vertex=3)
        silent += bool(np.all(s.head_times[:2] > u))
    p = math.exp(-u * (1 + 2**-0.4))
    assert abs(silent / R - p) < 3 * math.sqrt(p * (1 - p) / R)


@pytest.mark.parametrize("u", [1.0, 2.0, 5.0])
def test_mean_matches_analytic(u):
    scheme = TruncationScheme(N=1000)
    batch = sample_batch(P, u, scheme, Measure.original(), 10_000, np.random.default_rng(int(u * 10)))
    s = batch.value_at_u()
    assert abs(s.mean() - analytic_mean(P, u)) < 3 * s.std(ddof=1) / math.sqrt(s.size)


def test_doubling_n_changes_paths_within_budget():
    scheme = TruncationScheme(N=1000)
    u = 2.0
    v1 = tail_moments(P, scheme, u, Measure.original()).var
    v2 = tail_moments(P, TruncationScheme(N=2000), u, Measure.original()).var
    diffs = []
    for r in range(1000):
        s = sample_clocks(P, u, scheme, seed=4, replica=r)
        e = extend_clocks(s, 2000, seed=4 + r)
        diffs.append(eval_path(e, u).value - eval_path(s, u).value)
    rms = math.sqrt(np.mean(np.square(diffs)))
    assert rms < 3 * math.sqrt(v1 - v2)
