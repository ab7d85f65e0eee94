"""Large-deviation rate functions of the thinned Levy process.

Every integral is written in the coordinate y = x^{-alpha}, where the
measure becomes (tau-1) y^{-tau} dy.  Near y = 0 the integrands cancel to
third order; those regions use series or a rearranged closed form, and
the algebraic tails at infinity are integrated analytically.
"""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .numerics import (BracketError, NumericalError, QuadratureSpec, ZetaConfig,
                       integrate_improper, minimize_scalar, zeta_em)
from .process import (Measure, ModelParams, TruncationScheme, clock_log_mgf, clock_set, fire_probability,
                      sampling_tail_mean, tail_log_mgf, tail_mean_var_on_grid)

_SERIES_CUT = 1e-3
_TIGHT = QuadratureSpec(abs_tol=1e-13, rel_tol=1e-11, max_subdivisions=2048)


def _power_spec(tau: float, order: float = 3.0) -> QuadratureSpec:
    # integrand ~ y^{order-tau} at 0 becomes smooth in s with y = s^m
    return QuadratureSpec(abs_tol=1e-13, rel_tol=1e-11, max_subdivisions=2048,
                          transform="power_substitution", exponent=1.0 / (order + 1.0 - tau))


def _f_y(y: float, theta: float) -> float:
    if y < _SERIES_CUT:
        t = theta
        c3 = t * (t - 1) / 2
        c4 = t * (2 * t * t - 9 * t + 2) / 12
        c5 = t * (t - 1) * (t * t - 13 * t + 1) / 24
        c6 = t * (6 * t**4 - 225 * t**3 + 620 * t * t - 225 * t + 6) / 720
        return y**3 * (c3 + y * (c4 + y * (c5 + y * c6)))
    return math.log1p(math.exp(-y) * math.expm1(-theta * y)) + theta * y - theta * y * y


def f_tail(x, theta: float, params: ModelParams = ModelParams()):
    """log(1 + e^{-y}(e^{-theta y} - 1)) + theta y - theta y^2 at y = x^{-alpha}."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr <= 0):
        raise ValueError("f_tail needs x > 0")
    y = x_arr ** (-params.alpha)
    out = np.vectorize(_f_y, otypes=[float])(y, theta)
    return float(out) if out.ndim == 0 else out


def rate_lambda(theta: float, params: ModelParams = ModelParams()) -> float:
    """Lambda(theta) = (tau-1) int_0^inf f(y; theta) y^{-tau} dy."""
    if theta < 0:
        raise ValueError("rate_lambda is defined for theta >= 0")
    if theta == 0.0:
        return 0.0
    return _rate_lambda_cached(float(theta), params)


@functools.lru_cache(maxsize=4096)
def _rate_lambda_cached(theta: float, params: ModelParams) -> float:
    tau = params.tau
    near, _ = integrate_improper(lambda y: _f_y(y, theta) * y ** (-tau), (0.0, 1.0), _power_spec(tau))

    def far_integrand(y):
        return math.log1p(math.exp(-y) * math.expm1(-theta * y)) * y ** (-tau)

    far, _ = integrate_improper(far_integrand, (1.0, math.inf), _TIGHT, breakpoints=[10.0, 50.0])
    # int_1^inf (theta y - theta y^2) y^{-tau} dy
    algebraic = theta / (tau - 2.0) - theta / (tau - 3.0)
    return (tau - 1.0) * (near + far + algebraic)


# ---------------------------------------------------------------------------
# trajectory and variance integrands


def _denominator(v: float, theta: float) -> float:
    # e^{theta v}(1-e^{-v}) + e^{-v}, divided by e^{theta v}
    return 1.0 + math.exp(-v) * math.expm1(-theta * v)


def _q_minus_pv(v: float, p: float, theta: float) -> float:
    """q(v) - p v with the leading terms cancelled analytically."""
    pv = p * v
    if pv < _SERIES_CUT:
        e1 = pv * pv * (-0.5 + pv * (1.0 / 6.0 - pv / 24.0))
    else:
        e1 = -math.expm1(-pv) - pv
    return (e1 - pv * math.exp(-v) * math.expm1(-theta * v)) / _denominator(v, theta)


def _i_e(p: float, theta: float, params: ModelParams) -> float:
    tau = params.tau
    if p == 0.0:
        return 0.0
    near, _ = integrate_improper(lambda v: _q_minus_pv(v, p, theta) * v ** (1.0 - tau),
                                 (0.0, 1.0), _power_spec(tau))

    def q_minus_one(v):
        return (math.exp(-v) - math.exp(-p * v) - math.exp(-(1.0 + theta) * v)) / _denominator(v, theta)

    scale = 1.0 / p
    far, _ = integrate_improper(lambda v: q_minus_one(v) * v ** (1.0 - tau), (1.0, math.inf), _TIGHT,
                                breakpoints=[2 * scale, 10 * scale, 50 * scale])
    return (tau - 1.0) * (near + far + 1.0 / (tau - 2.0) - p / (tau - 3.0))


def _q_r(v: float, p: float, theta: float) -> tuple[float, float]:
    d = _denominator(v, theta)
    q = -math.expm1(-p * v) / d
    r = math.exp(-p * v) * -math.expm1(-(1.0 - p) * v) / d
    return q, r


def _variance_fns(p: float, theta: float, params: ModelParams) -> tuple[float, float, float]:
    tau = params.tau
    spec = _power_spec(tau)
    bps = [1.0, 5.0, 30.0]
    if 0 < p < 1:
        bps += [1.0 / p, 10.0 / p, 50.0 / p, 1.0 / (1.0 - p), 10.0 / (1.0 - p)]
    bps = sorted(set(b for b in bps if b < 1e7))

    def integ(kind):
        def f(v):
            q, r = _q_r(v, p, theta)
            if kind == 0:
                val = q * (1.0 - q)
            elif kind == 1:
                val = r * (1.0 - r)
            else:
                val = q * r
            return val * v ** (2.0 - tau)
        if (kind == 0 and p == 0.0) or (kind in (1, 2) and p == 1.0) or (kind == 2 and p == 0.0):
            return 0.0
        return (tau - 1.0) * integrate_improper(f, (0.0, math.inf), spec, breakpoints=bps)[0]

    return integ(0), integ(1), integ(2)


# ---------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class DensityModel:
    B: float
    I_V1: float

    @classmethod
    def from_variance(cls, I_V1: float) -> "DensityModel":
        return cls((2.0 * math.pi * I_V1) ** -0.5, I_V1)


@dataclass(frozen=True)
class RateFunctionTable:
    params: ModelParams
    theta_star: float
    I: float
    zeta_alpha: float
    zeta_2alpha: float
    zeta_cfg: ZetaConfig = field(default=ZetaConfig(), compare=False)

    def lam(self, theta: float) -> float:
        return rate_lambda(theta, self.params)

    def i_e(self, p: float) -> float:
        return i_e(p, self)

    def variance_fns(self, p: float) -> tuple[float, float, float]:
        return variance_fns(p, self)

    @functools.cached_property
    def density(self) -> DensityModel:
        return DensityModel.from_variance(self.variance_fns(1.0)[0])

    @property
    def B(self) -> float:
        return self.density.B

    def drift_coefficient(self) -> float:
        """beta_tilde - zeta(2 alpha) + 1, the coefficient of u in the correction."""
        return self.params.beta_tilde - self.zeta_2alpha + 1.0

    def objective(self, theta: float, u: float) -> float:
        """Finite-u exponent u^{tau-1} Lambda(theta) + theta u (zeta(alpha) + (...) u)."""
        tau = self.params.tau
        return (u ** (tau - 1.0) * self.lam(theta)
                + theta * u * (self.zeta_alpha + self.drift_coefficient() * u))


def _expanding_minimum(g, lo: float, hi: float, hi_cap: float = 200.0):
    while True:
        try:
            return minimize_scalar(g, (lo, hi), tol=1e-11)
        except BracketError as exc:
            if exc.side == "upper" and hi < hi_cap:
                hi *= 2.0
                continue
            raise


def solve_theta_star(params: ModelParams = ModelParams(), zeta_cfg: ZetaConfig = ZetaConfig()) -> RateFunctionTable:
    """Minimise Lambda; theta* is polished by solving I_E(1; theta) = 0."""
    return _solve_cached(params, zeta_cfg)


@functools.lru_cache(maxsize=16)
def _solve_cached(params: ModelParams, zeta_cfg: ZetaConfig) -> RateFunctionTable:
    try:
        theta, _ = _expanding_minimum(lambda t: rate_lambda(t, params), 1e-3, 10.0)
    except BracketError as exc:
        raise NumericalError(f"solve_theta_star: Lambda has no interior minimum ({exc})") from exc
    # Lambda'(theta) equals I_E(1; theta); its root is sharper than the flat minimum
    def slope(t):
        return _i_e(1.0, t, params)

    lo, hi = theta * 0.98, theta * 1.02
    if slope(lo) < 0 < slope(hi):
        theta = optimize.brentq(slope, lo, hi, xtol=1e-14, rtol=1e-14)
    I = -rate_lambda(theta, params)
    if not (theta > 0 and I > 0):
        raise NumericalError(f"solve_theta_star: theta*={theta}, I={I} violate theta* > 0 and I > 0")
    za, _ = zeta_em(params.alpha, zeta_cfg)
    z2a, _ = zeta_em(2.0 * params.alpha, zeta_cfg)
    return RateFunctionTable(params, theta, I, za, z2a, zeta_cfg)


def theta_star_u(u: float, table: RateFunctionTable) -> float:
    return _theta_u(float(u), table)[0]


def log_phi(u: float, table: RateFunctionTable) -> float:
    return _theta_u(float(u), table)[1]


@functools.lru_cache(maxsize=256)
def _theta_u(u: float, table: RateFunctionTable) -> tuple[float, float]:
    if not u > 0:
        raise ValueError("u must be positive")
    try:
        theta, value = _expanding_minimum(lambda t: table.objective(t, u), 1e-6, 4.0 * table.theta_star + 2.0)
    except BracketError as exc:
        raise NumericalError(f"theta_star_u: no interior minimum at u={u} ({exc})") from exc
    return theta, value


def i_e(p: float, table: RateFunctionTable) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return _i_e(float(p), table.theta_star, table.params)


def variance_fns(p: float, table: RateFunctionTable) -> tuple[float, float, float]:
    """(I_V(p), J_V(p), G_V(p)) at theta*."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return _variance_fns(float(p), table.theta_star, table.params)


def small_p_variance_constant(params: ModelParams) -> float:
    """Limit of I_V(p)/p^{tau-3} as p -> 0."""
    tau = params.tau
    return (tau - 1.0) * special.gamma(3.0 - tau) * (1.0 - 2.0 ** (tau - 3.0))


# ---------------------------------------------------------------------------
# characteristic function and density of S_u


@functools.lru_cache(maxsize=32)
def _charfn_inputs(params: ModelParams, u: float, measure: Measure, scheme: TruncationScheme):
    _, c = clock_set(params, scheme.N, 1)
    P = fire_probability(c, u, measure)
    grid = np.array([0.0, u])
    m, v = sampling_tail_mean(params, scheme, u, measure, grid)
    mean, var = m[-1], v[-1]
    if scheme.tail_mode != "gaussian":
        var = 0.0
    drift = 1.0 + params.beta_tilde * u - u * float(np.sum(c * c))
    return c, P, drift + mean, var


def su_log_charfn(k, u: float, measure: Measure = Measure.original(),
                  scheme: TruncationScheme = TruncationScheme(), params: ModelParams = ModelParams()):
    """log E[exp(i k S_u)]; the real part stays finite where the modulus underflows."""
    c, P, shift, var = _charfn_inputs(params, float(u), measure, scheme)
    k_arr = np.atleast_1d(np.asarray(k, dtype=float))
    out = np.empty(k_arr.shape, dtype=complex)
    for j, kk in enumerate(k_arr):
        out[j] = 1j * kk * shift - 0.5 * kk * kk * var + np.sum(np.log1p(P * np.expm1(1j * kk * c)))
    return out[0] if np.ndim(k) == 0 else out


def su_charfn(k, u: float, measure: Measure = Measure.original(), scheme: TruncationScheme = TruncationScheme(),
              params: ModelParams = ModelParams()):
    """E[exp(i k S_u)] for the simulated model, tail included as a Gaussian factor."""
    return np.exp(su_log_charfn(k, u, measure, scheme, params))


def _charfn_cutoff(u, measure, scheme, params, tol=1e-13):
    K = 1.0
    while abs(su_charfn(K, u, measure, scheme, params)) > tol and K < 1e4:
        K *= 1.5
    return K


def su_density(s, u: float, measure: Measure = Measure.original(), scheme: TruncationScheme = TruncationScheme(),
               params: ModelParams = ModelParams(), tol: float = 1e-8):
    """Density of S_u by Fourier inversion of :func:`su_charfn`.

    The k-integral runs over [0, K] where |charfn| has fallen below 1e-13,
    with composite Gauss-Legendre panels doubled until the result settles.
    """
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    K = _charfn_cutoff(u, measure, scheme, params)
    nodes, weights = np.polynomial.legendre.leggauss(16)

    def evaluate(panels):
        edges = np.linspace(0.0, K, panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        k = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        w = (half[:, None] * weights[None, :]).ravel()
        phi = su_charfn(k, u, measure, scheme, params)
        return (np.real(np.exp(-1j * np.outer(s_arr, k)) * phi[None, :]) @ w) / math.pi

    panels = 16
    prev = evaluate(panels)
    while True:
        panels *= 2
        cur = evaluate(panels)
        if np.max(np.abs(cur - prev)) < tol or panels >= 4096:
            break
        prev = cur
    if np.max(np.abs(cur - prev)) >= tol:
        raise NumericalError(f"su_density: inversion did not settle to {tol} at u={u}")
    if np.any(cur < -tol):
        warnings.warn("su_density: inversion dipped below zero; clipped", RuntimeWarning, stacklevel=2)
    cur = np.maximum(cur, 0.0)
    return float(cur[0]) if np.ndim(s) == 0 else cur


# ---------------------------------------------------------------------------
# exact normalizer of the truncated model


def log_normalizer_truncated(u: float, theta: float, params: ModelParams, scheme: TruncationScheme) -> float:
    """log E[exp(theta u S_u)] with the head clocks and the tail clocks summed exactly.

    A deterministic tail (``mean_only``) contributes theta*u*m_N(u).
    """
    _, c = clock_set(params, scheme.N, 1)
    head = float(np.sum(clock_log_mgf(c * u, theta)))
    if scheme.tail_mode == "gaussian":
        tail = tail_log_mgf(params, scheme, u, theta)
    elif scheme.tail_mode == "mean_only":
        m, _ = tail_mean_var_on_grid(params, scheme, u, Measure.original(), np.array([0.0, u]))
        tail = theta * u * float(m[-1])
    else:
        tail = 0.0
    return theta * u * (1.0 + params.beta_tilde * u) + head + tail
