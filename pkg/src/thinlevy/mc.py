"""Monte Carlo estimators for the tail of the thinned Levy process.

The tilted estimators rest on the identity

    P(E) = phi(u; theta) * E_theta[exp(-theta u S_u) 1_E],   E subset {S_u > 0},

with phi the exact moment generating function of the simulated truncated
model.  Weights are carried as logarithms throughout: at u = 12 the
probabilities are of order e^{-1300}.

By default the Gaussian tail endpoint is integrated out analytically given
the head clocks (Rao-Blackwellisation); the tail path is then drawn as a
bridge to an endpoint sampled from its conditional law.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special, stats

from .process import (Measure, ModelParams, PathBatch, TruncationScheme, batch_size, fire_probability,
                      sample_batch)
from .ratefn import (RateFunctionTable, i_e, log_normalizer_truncated, log_phi, solve_theta_star, theta_star_u)


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    reps: int
    method: str
    effective_sample_size: float
    log_value: float = -math.inf
    log_std_error: float = -math.inf
    log_normalizer: float = 0.0
    theta: float = 0.0
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be >= 0")
        if self.effective_sample_size > self.reps * (1 + 1e-9):
            raise ValueError("effective sample size cannot exceed reps")

    def to_dict(self) -> dict:
        return {"estimate": self.value, "se": self.std_error, "ess": self.effective_sample_size,
                "log_estimate": self.log_value, "log_se": self.log_std_error, "reps": self.reps,
                "method": self.method, "log_normalizer": self.log_normalizer, "theta": self.theta}


def combined_z(a: Estimate, b: Estimate) -> float:
    """|a - b| in units of the combined standard error."""
    se = math.hypot(a.std_error, b.std_error)
    return abs(a.value - b.value) / se if se > 0 else (0.0 if a.value == b.value else math.inf)


def estimate_from_log_weights(log_w: np.ndarray, method: str, log_norm: float = 0.0, theta: float = 0.0) -> Estimate:
    """Mean of exp(log_w + log_norm) with its standard error, in log space."""
    n = log_w.size
    finite = np.isfinite(log_w)
    if not finite.any():
        raise ZeroDivisionError("no replica carries positive weight (zero effective sample size)")
    top = float(np.max(log_w[finite]))
    w = np.exp(log_w - top)
    mean_scaled = float(np.mean(w))
    sd_scaled = float(np.std(w, ddof=1)) if n > 1 else 0.0
    ess = float(np.sum(w) ** 2 / np.sum(w * w))
    log_value = top + math.log(mean_scaled) + log_norm
    log_se = top + math.log(sd_scaled) - 0.5 * math.log(n) + log_norm if sd_scaled > 0 else -math.inf
    return Estimate(math.exp(log_value), math.exp(log_se) if log_se > -math.inf else 0.0, n, method,
                    min(ess, float(n)), log_value, log_se, log_norm, theta)


def _batches(params, u, scheme, measure, reps, seed, budget=2_000_000):
    size = batch_size(params, u, scheme, measure, budget)
    done, b = 0, 0
    while done < reps:
        R = min(size, reps - done)
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(b,)))
        yield rng, sample_batch(params, u, scheme, measure, R, rng)
        done += R
        b += 1


def _rao_blackwell(batch: PathBatch, theta: float, rng: np.random.Generator) -> np.ndarray:
    """log E[exp(-theta u S_u) 1{S_u > 0} | head], and bridge the tail to a draw.

    Given the head, S_u = x + Z with Z ~ N(0, v).  The weighted law of Z on
    {x + Z > 0} is N(-theta u v, v) truncated to z > -x.
    """
    u = batch.u
    x = batch.deterministic_at_u()
    v = float(batch.tail_var[-1])
    if v <= 0 or batch.scheme.tail_mode != "gaussian":
        s = x
        return np.where(s > 0, -theta * u * s, -np.inf)
    sd = math.sqrt(v)
    shift = -theta * u * v
    lower = (-x - shift) / sd
    log_w = -theta * u * x + 0.5 * theta**2 * u**2 * v + special.log_ndtr(-lower)
    z = stats.truncnorm.rvs(lower, np.inf, loc=shift, scale=sd, random_state=rng)
    batch.set_noise_endpoint(np.asarray(z, dtype=float))
    return log_w


def _naive_indicators(params, u, reps, seed, scheme, need_h1=True):
    su, h1 = [], []
    for _, batch in _batches(params, u, scheme, Measure.original(), reps, seed):
        pos = batch.value_at_u() > 0
        su.append(pos)
        if need_h1:
            hit, _ = batch.first_passage()
            h1.append(~hit & pos)
    return np.concatenate(su), (np.concatenate(h1) if need_h1 else None)


def _proportion(ok: np.ndarray) -> Estimate:
    n = ok.size
    p = float(np.mean(ok))
    se = math.sqrt(p * (1 - p) / n)
    return Estimate(p, se, n, "naive", float(n),
                    math.log(p) if p > 0 else -math.inf, math.log(se) if se > 0 else -math.inf)


def _tilt(params: ModelParams, u: float, theta: Optional[float], table: Optional[RateFunctionTable]) -> float:
    if theta is None:
        table = table or solve_theta_star(params)
        theta = theta_star_u(u, table)
    if not theta > 0:
        raise ValueError(f"tilt parameter must be positive, got {theta}")
    return float(theta)


def _estimate(target: str, params: ModelParams, u: float, method: str, reps: int, seed: int,
              scheme: TruncationScheme, theta: Optional[float], table: Optional[RateFunctionTable],
              rao_blackwell: bool) -> Estimate:
    if reps < 100:
        raise ValueError("at least 100 replicas are required")
    if method == "naive":
        su, h1 = _naive_indicators(params, u, reps, seed, scheme, need_h1=(target == "h1"))
        return _proportion(su if target == "su" else h1)
    if method != "tilted_is":
        raise ValueError(f"unknown method {method!r}")
    theta = _tilt(params, u, theta, table)
    measure = Measure.tilted(theta)
    log_norm = log_normalizer_truncated(u, theta, params, scheme)
    parts = []
    for rng, batch in _batches(params, u, scheme, measure, reps, seed):
        if rao_blackwell:
            lw = _rao_blackwell(batch, theta, rng)
        else:
            s = batch.value_at_u()
            lw = np.where(s > 0, -theta * u * s, -np.inf)
        if target == "h1":
            hit, _ = batch.first_passage()
            lw = np.where(hit, -np.inf, lw)
        parts.append(lw)
    log_w = np.concatenate(parts)
    return estimate_from_log_weights(log_w, "tilted_is", log_norm, theta)


def estimate_su_positive(params: ModelParams, u: float, method: str = "tilted_is", reps: int = 10_000,
                         seed: int = 0, scheme: TruncationScheme = TruncationScheme(),
                         theta: Optional[float] = None, table: Optional[RateFunctionTable] = None,
                         rao_blackwell: bool = True) -> Estimate:
    """P(S_u > 0) by naive or exponentially tilted Monte Carlo."""
    return _estimate("su", params, u, method, reps, seed, scheme, theta, table, rao_blackwell)


def estimate_h1_tail(params: ModelParams, u: float, method: str = "tilted_is", reps: int = 10_000,
                     seed: int = 0, scheme: TruncationScheme = TruncationScheme(),
                     theta: Optional[float] = None, table: Optional[RateFunctionTable] = None,
                     rao_blackwell: bool = True) -> Estimate:
    """P(H_1(0) > u): the path stays positive on [0, u]."""
    return _estimate("h1", params, u, method, reps, seed, scheme, theta, table, rao_blackwell)


def estimate_both(params: ModelParams, u: float, reps: int, seed: int, scheme: TruncationScheme = TruncationScheme(),
                  theta: Optional[float] = None, table: Optional[RateFunctionTable] = None) -> tuple[Estimate, Estimate]:
    """Plain tilted estimates of P(S_u > 0) and P(H_1(0) > u) on shared replicas."""
    theta = _tilt(params, u, theta, table)
    log_norm = log_normalizer_truncated(u, theta, params, scheme)
    su, h1 = [], []
    for _, batch in _batches(params, u, scheme, Measure.tilted(theta), reps, seed):
        s = batch.value_at_u()
        hit, _ = batch.first_passage()
        lw = np.where(s > 0, -theta * u * s, -np.inf)
        su.append(lw)
        h1.append(np.where(hit, -np.inf, lw))
    return (estimate_from_log_weights(np.concatenate(su), "tilted_is", log_norm, theta),
            estimate_from_log_weights(np.concatenate(h1), "tilted_is", log_norm, theta))


def estimate_naive_both(params: ModelParams, u: float, reps: int, seed: int,
                        scheme: TruncationScheme = TruncationScheme()) -> tuple[Estimate, Estimate]:
    """Naive estimates of P(S_u > 0) and P(H_1(0) > u) on shared replicas."""
    if reps < 100:
        raise ValueError("at least 100 replicas are required")
    su, h1 = _naive_indicators(params, u, reps, seed, scheme)
    return _proportion(su), _proportion(h1)


def empirical_mgf(params: ModelParams, u: float, theta: float, reps: int, seed: int,
                  scheme: TruncationScheme = TruncationScheme()) -> Estimate:
    """E[exp(theta u S_u)] under the original measure."""
    parts = [theta * u * batch.value_at_u()
             for _, batch in _batches(params, u, scheme, Measure.original(), reps, seed)]
    return estimate_from_log_weights(np.concatenate(parts), "naive")


# ---------------------------------------------------------------------------
# conditioned trajectories


@dataclass(frozen=True)
class Profile:
    p: np.ndarray
    mean_path: np.ndarray
    predicted: np.ndarray
    scale: float
    effective_sample_size: float
    reps: int

    @property
    def max_scaled_deviation(self) -> float:
        return float(np.max(np.abs(self.mean_path - self.predicted)) / self.scale)


def conditioned_profile(params: ModelParams, u: float, p_grid, reps: int, seed: int,
                        scheme: TruncationScheme = TruncationScheme(), table: Optional[RateFunctionTable] = None,
                        theta: Optional[float] = None) -> Profile:
    """Self-normalised estimate of E[S_{pu} | H_1(0) > u] on ``p_grid``."""
    table = table or solve_theta_star(params)
    theta = _tilt(params, u, theta, table)
    p = np.asarray(p_grid, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p_grid must lie in [0, 1]")
    order = np.argsort(p)
    times = p[order] * u
    sums = np.zeros(p.size)
    total_w = total_w2 = 0.0
    shift = None
    for rng, batch in _batches(params, u, scheme, Measure.tilted(theta), reps, seed):
        lw = _rao_blackwell(batch, theta, rng)
        hit, _ = batch.first_passage()
        lw = np.where(hit, -np.inf, lw)
        if not np.isfinite(lw).any():
            continue
        top = float(np.max(lw[np.isfinite(lw)]))
        if shift is None:
            shift = top
        elif top > shift:
            scale = math.exp(shift - top)
            sums *= scale
            total_w *= scale
            total_w2 *= scale * scale
            shift = top
        w = np.exp(lw - shift)
        vals = batch.values_at(times)
        sums[order] += w @ vals
        total_w += float(w.sum())
        total_w2 += float((w * w).sum())
    if total_w <= 0:
        raise ZeroDivisionError("no surviving path was sampled")
    mean = sums / total_w
    mean[p == 0] = 1.0
    scale = u ** (params.tau - 2.0)
    predicted = np.array([scale * i_e(float(q), table) for q in p])
    return Profile(p, mean, predicted, scale, total_w**2 / total_w2, reps)


# ---------------------------------------------------------------------------
# reversed end game


@dataclass(frozen=True)
class EndgameStats:
    slope: float
    slope_se: float
    increment_variance: float
    increment_variance_se: float
    conditioned: int
    s_grid: np.ndarray
    mean_ramp: np.ndarray


def _expm1_minus(z):
    """expm1(z) - z without cancellation."""
    z = np.asarray(z, dtype=float)
    small = z < 1e-3
    zs = np.where(small, z, 0.0)
    series = zs * zs * (0.5 + zs * (1.0 / 6.0 + zs * (1.0 / 24.0 + zs / 120.0)))
    return np.where(small, series, np.expm1(z) - z)


def _late_terms(c, u, t):
    """q = P(T > u - t | T <= u) and c (u q - t), shapes (clocks, times)."""
    c = c[:, None]
    t = t[None, :]
    e_u = np.expm1(c * u)
    q = np.expm1(c * t) / e_u
    ramp = -c * (u * _expm1_minus(c * t) - t * _expm1_minus(c * u)) / e_u
    return q, ramp


def _endgame_clock_terms(c, u, theta, t):
    """Fire probability times the A_u ramp, and times the B_u increment variances, per clock."""
    fire = fire_probability(c, u, Measure.tilted(theta))[:, None]
    q, ramp = _late_terms(c, u, t)
    d = np.diff(q, axis=1)
    return fire * ramp, fire * (u * c[:, None]) ** 2 * d * (1.0 - fire * d)


def _tail_endgame_terms(params, scheme, u, theta, t):
    """Mean A_u ramp and B_u increment variances of the clocks i > N.

    Tail clocks are individually negligible, so A_u is replaced by its
    mean.  Direct sum to 16N, then the integral in y = c_i.
    """
    if scheme.tail_mode == "none":
        return np.zeros(t.size), np.zeros(t.size - 1)
    N, K, alpha, tau = scheme.N, 16 * scheme.N, params.alpha, params.tau
    ramp = np.zeros(t.size)
    inc = np.zeros(t.size - 1)
    for start in range(N + 1, K + 1, 200_000):
        c = np.arange(start, min(K, start + 199_999) + 1, dtype=float) ** (-alpha)
        r, v = _endgame_clock_terms(c, u, theta, t)
        ramp += r.sum(axis=0)
        inc += v.sum(axis=0)
    y = np.geomspace(1e-12, K ** (-alpha), 4000)
    r, v = _endgame_clock_terms(y, u, theta, t)
    jac = (tau - 1.0) * y ** (-tau)
    ramp += integrate.trapezoid(r * jac[:, None], y, axis=0)
    inc += integrate.trapezoid(v * jac[:, None], y, axis=0)
    return ramp, inc


def reversed_endgame_stats(params: ModelParams, u: float, T: float, reps: int, seed: int,
                           window: float = 5.0, scheme: TruncationScheme = TruncationScheme(),
                           table: Optional[RateFunctionTable] = None, points: int = 21) -> EndgameStats:
    """Ramp slope of A_u and increment variance of B_u near the horizon.

    Only tilted replicas with |u S_u| <= window are used.  Time is measured
    backwards from u in units of u^{-(tau-2)}.
    """
    if u < 5:
        raise ValueError("reversed_endgame_stats needs u >= 5")
    table = table or solve_theta_star(params)
    theta = theta_star_u(u, table)
    unit = u ** (-(params.tau - 2.0))
    s = np.linspace(0.0, T, points)
    t = s * unit
    ramps, incs = [], []
    for _, batch in _batches(params, u, scheme, Measure.tilted(theta), reps, seed):
        keep = np.abs(u * batch.value_at_u()) <= window
        if not keep.any():
            continue
        sel = keep[batch.rep]
        rep = batch.rep[sel]
        c = batch.weight[sel]
        tt = batch.time[sel]
        R = batch.R
        # P(T > u - t | T <= u) for each fired clock and each t
        late, ramp = _late_terms(c, u, t)
        A = np.zeros((R, t.size))
        np.add.at(A, rep, ramp)
        fired_late = (tt[:, None] > u - t[None, :]).astype(float)
        Bm = np.zeros((R, t.size))
        np.add.at(Bm, rep, u * c[:, None] * (fired_late - late))
        ramps.append(A[keep])
        incs.append(np.diff(Bm[keep], axis=1))
    if not ramps:
        raise ZeroDivisionError("no replica landed in the conditioning window")
    tail_ramp, tail_inc_var = _tail_endgame_terms(params, scheme, u, theta, t)
    A = np.concatenate(ramps) + tail_ramp
    dB = np.concatenate(incs)
    n = A.shape[0]
    if n < 10:
        raise ZeroDivisionError(f"only {n} replicas in the conditioning window")
    mean_ramp = A.mean(axis=0)
    # least squares through the origin, per replica, then averaged
    per_rep = (A @ s) / float(s @ s)
    slope = float(per_rep.mean())
    slope_se = float(per_rep.std(ddof=1) / math.sqrt(n))
    ds = s[1] - s[0]
    per_unit = dB.ravel() ** 2 / ds
    var = float(np.mean(dB.ravel() ** 2) / ds - (np.mean(dB) ** 2) / ds + np.mean(tail_inc_var) / ds)
    var_se = float(np.std(per_unit, ddof=1) / math.sqrt(per_unit.size))
    return EndgameStats(slope, slope_se, var, var_se, n, s, mean_ramp)


# ---------------------------------------------------------------------------
# Brownian benchmark


@dataclass(frozen=True)
class BMBenchmark:
    longest_excursion: Estimate
    endpoint_positive: Estimate
    pittel: float
    log_phi: float
    theta_u: float
    per_path_violations: int


def pittel_tail(u: float, lam: float) -> float:
    """Large-u tail of the longest excursion of the reflected parabolic BM."""
    return math.exp(-u * (u - 2 * lam) ** 2 / 8.0) / (math.sqrt(2 * math.pi) * u**1.5)


def bm_pittel_benchmark(lam: float, u: float, reps: int, dt: float = 1e-3, seed: int = 0,
                        horizon: Optional[float] = None, batch: int = 500) -> BMBenchmark:
    """Euler simulation of W_t + lam t - t^2/2, reflected at its running minimum."""
    if dt > 1e-3:
        raise ValueError("dt must be at most 1e-3")
    horizon = horizon or max(u + 8.0 + 2 * max(lam, 0.0), 3 * u)
    n = int(round(horizon / dt))
    t = dt * np.arange(1, n + 1)
    drift = lam * t - 0.5 * t * t
    k_u = int(round(u / dt)) - 1
    longest, positive = [], []
    for b, start in enumerate(range(0, reps, batch)):
        R = min(batch, reps - start)
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(b,)))
        W = np.cumsum(rng.standard_normal((R, n)) * math.sqrt(dt), axis=1) + drift
        W = np.concatenate([np.zeros((R, 1)), W], axis=1)
        low = np.minimum.accumulate(W, axis=1)
        at_min = W <= low
        at_min[:, -1] = True
        best = np.zeros(R)
        for r in range(R):
            idx = np.flatnonzero(at_min[r])
            best[r] = np.max(np.diff(idx)) * dt if idx.size > 1 else 0.0
        longest.append(best > u)
        positive.append(W[:, k_u + 1] > 0)
    gl = np.concatenate(longest).astype(float)
    wp = np.concatenate(positive).astype(float)

    def est(x):
        p = float(x.mean())
        se = math.sqrt(max(p * (1 - p), 0.0) / x.size)
        return Estimate(p, se, x.size, "naive", float(x.size),
                        math.log(p) if p > 0 else -math.inf, math.log(se) if se > 0 else -math.inf)

    theta_u = 0.5 - lam / u
    return BMBenchmark(est(gl), est(wp), pittel_tail(u, lam), -u * (u - 2 * lam) ** 2 / 8.0, theta_u,
                       int(np.sum((gl > 0) & (wp == 0))))
