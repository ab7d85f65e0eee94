"""End-game limit objects.

Near the horizon the reversed, rescaled process is a deterministic ramp
with slope kappa plus a spectrally negative Levy process X with Levy
density pi(y) on jump sizes -y < 0.  Its Laplace exponent psi determines
the scale function W through int e^{-a x} W(x) dx = 1/psi(a), and the
survival probability g(v) = kappa W(v) of the end game.
"""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import mpmath as mp
import numpy as np
from scipy import integrate

from .numerics import InversionConfig, NumericalError, QuadratureSpec, integrate_improper, laplace_invert_gs
from .ratefn import RateFunctionTable, log_phi


def _spec(tau: float, order: float = 3.0) -> QuadratureSpec:
    return QuadratureSpec(abs_tol=1e-13, rel_tol=1e-11, transform="power_substitution",
                          exponent=1.0 / (order + 1.0 - tau))


def _jump_density(y, theta: float, tau: float):
    """pi(y) for jump size y > 0 (vectorised)."""
    y = np.asarray(y, dtype=float)
    denom = -np.expm1(-y) + np.exp(-(1.0 + theta) * y)
    return (tau - 1.0) * y ** (1.0 - tau) * np.exp(-y) / denom


def levy_measure_density(z, theta_star: float, tau: float = 3.5):
    """Density of the Levy measure at z < 0."""
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr >= 0):
        raise ValueError("levy_measure_density is defined for z < 0")
    out = _jump_density(-z_arr, theta_star, tau)
    return float(out) if out.ndim == 0 else out


def _one_minus_one_plus_y_exp(y: float) -> float:
    # 1 - (1+y) e^{-y}
    if y < 0.05:
        term, total, k = y * y / 2.0, 0.0, 2
        while abs(term) > 1e-18 * abs(total) or k < 4:
            total += term * (k - 1)
            k += 1
            term *= -y / k
        return total
    return -math.expm1(-y) - y * math.exp(-y)


def kappa(theta_star: float, tau: float = 3.5) -> float:
    """Slope of the deterministic end-game ramp."""
    if not theta_star > 0:
        raise ValueError("kappa needs theta* > 0")

    def denom(y):
        return -math.expm1(-y) + math.exp(-(1.0 + theta_star) * y)

    near, _ = integrate_improper(lambda y: _one_minus_one_plus_y_exp(y) / denom(y) * y ** (1.0 - tau),
                                 (0.0, 1.0), _spec(tau))
    far, _ = integrate_improper(lambda y: (_one_minus_one_plus_y_exp(y) / denom(y) - 1.0) * y ** (1.0 - tau),
                                (1.0, math.inf), QuadratureSpec(abs_tol=1e-13, rel_tol=1e-11),
                                breakpoints=[10.0, 50.0])
    return (tau - 1.0) * (near + far + 1.0 / (tau - 2.0))


def _exp_minus_one_plus(x: float) -> float:
    # e^{-x} - 1 + x
    if x < 1e-3:
        return x * x * (0.5 + x * (-1.0 / 6.0 + x / 24.0))
    return math.expm1(-x) + x


def _psi_float(a: float, k: float, theta: float, tau: float) -> float:
    if a == 0.0:
        return 0.0

    def f(y):
        return _exp_minus_one_plus(a * y) * float(_jump_density(y, theta, tau))

    val, _ = integrate_improper(f, (0.0, math.inf), _spec(tau), breakpoints=[1.0, 10.0, 60.0])
    return k * a + val


def _mp_series_exp(y, sign_terms):
    """sum_{k>=2} coef(k) y^k/k! evaluated termwise, for small y."""
    total = mp.mpf(0)
    term = y * y / 2
    k = 2
    while True:
        add = sign_terms(k) * term
        total += add
        if abs(add) < mp.eps * abs(total) and k > 4:
            return total
        k += 1
        term *= y / k


@functools.lru_cache(maxsize=8)
def _kappa_mp(theta: float, tau: float, dps: int):
    with mp.workdps(dps):
        th, t = mp.mpf(theta), mp.mpf(tau)

        def g(y):
            if y < mp.mpf("0.1"):
                num = _mp_series_exp(y, lambda k: (-1) ** k * (k - 1))
            else:
                num = 1 - (1 + y) * mp.exp(-y)
            return num / (-mp.expm1(-y) + mp.exp(-(1 + th) * y)) * y ** (1 - t)

        return (t - 1) * mp.quad(g, [0, mp.mpf("0.1"), 1, 10, mp.inf])


def _psi_mp(a, theta: float, tau: float, dps: int):
    with mp.workdps(dps):
        a = mp.mpf(a)
        th, t = mp.mpf(theta), mp.mpf(tau)
        k = _kappa_mp(theta, tau, dps)
        cut = min(mp.mpf("0.1"), mp.mpf("0.1") / a)

        def h(y):
            ay = a * y
            if ay < mp.mpf("0.1"):
                core = _mp_series_exp(ay, lambda j: (-1) ** j)
            else:
                core = mp.expm1(-ay) + ay
            dens = (t - 1) * y ** (1 - t) * mp.exp(-y) / (-mp.expm1(-y) + mp.exp(-(1 + th) * y))
            return core * dens

        pts = sorted(set([mp.mpf(0), cut, mp.mpf(1), mp.mpf(10), mp.inf]))
        return k * a + mp.quad(h, pts)


@dataclass(frozen=True)
class EndgameConstants:
    tau: float
    theta_star: float
    kappa: float
    B: float
    A: float
    D: float
    inversion: InversionConfig = InversionConfig()
    jumps: bool = True

    def psi(self, a: float) -> float:
        if a < 0:
            raise ValueError("psi is evaluated for a >= 0")
        if not self.jumps:
            return self.kappa * a
        return _psi_float(float(a), self.kappa, self.theta_star, self.tau)

    def pi(self, y):
        """Jump-size density on y > 0 (zero when jumps are switched off)."""
        return _jump_density(y, self.theta_star, self.tau) if self.jumps else np.zeros_like(np.asarray(y, float))

    def W(self, v: float) -> float:
        return g_scale(v, self)[0]

    def g(self, v: float) -> float:
        return g_scale(v, self)[1]

    def without_jumps(self) -> "EndgameConstants":
        return EndgameConstants(self.tau, self.theta_star, self.kappa, self.B, self.A, self.D,
                                self.inversion, False)


def psi(a: float, constants: EndgameConstants) -> float:
    return constants.psi(a)


def g_scale(v: float, constants: EndgameConstants, inv_cfg: InversionConfig | None = None) -> tuple[float, float]:
    """(W(v), kappa W(v)); g is clipped to [0, 1]."""
    if v < 0:
        raise ValueError("g_scale needs v >= 0")
    if v == 0:
        return 0.0, 0.0
    cfg = inv_cfg or constants.inversion
    return _g_scale_cached(float(v), constants, cfg)


@functools.lru_cache(maxsize=1024)
def _g_scale_cached(v: float, constants: EndgameConstants, cfg: InversionConfig) -> tuple[float, float]:
    dps = cfg.working_precision
    if constants.jumps:
        def F(a):
            return 1 / _psi_mp(a, constants.theta_star, constants.tau, dps)
    else:
        def F(a):
            return 1 / (mp.mpf(constants.kappa) * a)
    W = laplace_invert_gs(F, v, cfg)
    g = W * constants.kappa
    if g < -1e-3 or g > 1 + 1e-3:
        warnings.warn(f"g({v}) = {g} outside [0, 1] beyond 1e-3; clipped", RuntimeWarning, stacklevel=3)
    return W, min(max(g, 0.0), 1.0)


def tail_constants(table: RateFunctionTable, k: float, psi_theta: float) -> tuple[float, float]:
    """(A, D) = (B kappa / psi(theta*), B / theta*)."""
    if not psi_theta > 0:
        raise NumericalError(f"tail_constants: psi(theta*) = {psi_theta} is not positive")
    A = table.B * k / psi_theta
    D = table.B / table.theta_star
    if not 0 < A < D:
        raise NumericalError(f"tail_constants: expected 0 < A < D, got A={A}, D={D}")
    return A, D


def build_endgame(table: RateFunctionTable, inversion: InversionConfig = InversionConfig()) -> EndgameConstants:
    tau, theta = table.params.tau, table.theta_star
    k = kappa(theta, tau)
    psi_theta = _psi_float(theta, k, theta, tau)
    A, D = tail_constants(table, k, psi_theta)
    return EndgameConstants(tau, theta, k, table.B, A, D, inversion)


def predict_log_tails(u: float, table: RateFunctionTable, constants: EndgameConstants) -> tuple[float, float]:
    """Natural logs of the predicted P(S_u > 0) and P(H_1(0) > u)."""
    base = -(table.params.tau - 1.0) / 2.0 * math.log(u) + log_phi(u, table)
    return math.log(constants.D) + base, math.log(constants.A) + base


def predict_tails(u: float, table: RateFunctionTable, constants: EndgameConstants) -> tuple[float, float]:
    lsu, lh1 = predict_log_tails(u, table, constants)
    return math.exp(lsu), math.exp(lh1)


# ---------------------------------------------------------------------------
# simulation of X_t = kappa t - L_t


@dataclass(frozen=True)
class LevySimConfig:
    T: float = 50.0
    epsilon: float = 0.05
    grid_step: float = 0.5

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if not 0 < self.epsilon < 1:
            raise ValueError("small-jump cutoff must lie in (0, 1)")
        if not self.grid_step > 0:
            raise ValueError("grid_step must be positive")


@dataclass(frozen=True)
class JumpTable:
    rate: float        # Pi of jumps larger than epsilon
    drift: float       # kappa plus the compensator of the large jumps
    sigma2: float      # variance rate of the small-jump surrogate
    log_sizes: np.ndarray
    cdf: np.ndarray

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.exp(np.interp(rng.random(n), self.cdf, self.log_sizes))


@functools.lru_cache(maxsize=16)
def jump_table(constants: EndgameConstants, epsilon: float) -> JumpTable:
    tau, theta = constants.tau, constants.theta_star
    if not constants.jumps:
        return JumpTable(0.0, constants.kappa, 0.0, np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    y_max = 60.0
    log_y = np.linspace(math.log(epsilon), math.log(y_max), 40001)
    y = np.exp(log_y)
    dens = _jump_density(y, theta, tau) * y
    cum = integrate.cumulative_trapezoid(dens, log_y, initial=0.0)
    spec = QuadratureSpec(abs_tol=1e-13, rel_tol=1e-11)
    rate, _ = integrate_improper(lambda s: float(_jump_density(s, theta, tau)), (epsilon, math.inf), spec,
                                 breakpoints=[1.0, 10.0])
    mean_big, _ = integrate_improper(lambda s: s * float(_jump_density(s, theta, tau)), (epsilon, math.inf), spec,
                                     breakpoints=[1.0, 10.0])
    sigma2, _ = integrate_improper(lambda s: s * s * float(_jump_density(s, theta, tau)), (0.0, epsilon),
                                   _spec(tau, order=3.0))
    return JumpTable(rate, constants.kappa + mean_big, sigma2, log_y, cum / cum[-1])


@dataclass(frozen=True)
class LevySupSample:
    sup: np.ndarray   # sup_{s<=T} (L_s - kappa s)
    inf: np.ndarray   # inf_{s<=T} (kappa s - L_s)
    end: np.ndarray   # kappa T - L_T


def simulate_levy_sup(constants: EndgameConstants, cfg: LevySimConfig = LevySimConfig(), reps: int = 10_000,
                      seed: int = 0, batch: int = 500) -> LevySupSample:
    """Running extremes of X_t = kappa t - L_t on [0, T].

    Jumps larger than epsilon arrive as a compound Poisson process; smaller
    ones are replaced by Brownian motion with the same variance rate.
    Between jumps the minimum of the Brownian bridge is drawn exactly.
    Replicas are processed in fixed batches, each with its own stream.
    """
    table = jump_table(constants, cfg.epsilon)
    mu, s2, T = table.drift, table.sigma2, cfg.T
    infs, ends = [], []
    for b, start in enumerate(range(0, reps, batch)):
        R = min(batch, reps - start)
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(b,)))
        counts = rng.poisson(table.rate * T, size=R)
        n = int(counts.sum())
        rep = np.repeat(np.arange(R), counts)
        times = rng.random(n) * T
        order = np.lexsort((times, rep))
        times = times[order]
        sizes = table.sample(n, rng)
        # one interval per jump plus a closing interval to T per replica
        ends_idx = np.cumsum(counts + 1) - 1
        m = n + R
        is_close = np.zeros(m, bool)
        is_close[ends_idx] = True
        t_end = np.empty(m)
        t_end[~is_close] = times
        t_end[is_close] = T
        jump = np.zeros(m)
        jump[~is_close] = sizes
        first = np.ones(m, bool)
        first[1:] = is_close[:-1]
        t_start = np.where(first, 0.0, np.roll(t_end, 1))
        h = t_end - t_start
        cont = mu * h + math.sqrt(s2) * np.sqrt(h) * rng.standard_normal(m)
        step = cont - jump
        csum = np.cumsum(step)
        seg_first = np.maximum.accumulate(np.where(first, np.arange(m), 0))
        offset = (csum - step)[seg_first]
        x_after = csum - offset
        x_start = np.where(first, 0.0, np.roll(x_after, 1))
        x_pre = x_start + cont
        if s2 > 0:
            spread = (x_pre - x_start) ** 2 - 2.0 * s2 * h * np.log(rng.random(m))
            low = 0.5 * (x_start + x_pre - np.sqrt(spread))
        else:
            low = np.minimum(x_start, x_pre)
        inf = np.minimum(np.minimum.reduceat(low, np.flatnonzero(first)), 0.0)
        infs.append(inf)
        ends.append(x_after[is_close])
    inf = np.concatenate(infs)
    return LevySupSample(-inf, inf, np.concatenate(ends))
