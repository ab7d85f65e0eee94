"""Shared numerical kernels.

Improper-integral quadrature, bracketed scalar minimization, the
Euler-Maclaurin zeta function, Gaver-Stehfest inversion on the real axis
and the power-sum helper ``sum_ci_exp``.  Everything here is a pure
function of its arguments.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import mpmath as mp
import numpy as np
from scipy import integrate, optimize, special


class NumericalError(RuntimeError):
    """Base class for numerical failures raised by this package."""


class QuadratureError(NumericalError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message: str, value: float, err_est: float):
        super().__init__(f"{message} (partial value={value!r}, err_est={err_est:.3g})")
        self.value = value
        self.err_est = err_est


class BracketError(NumericalError):
    """The minimization bracket has no interior minimum."""

    def __init__(self, side: str, message: str):
        super().__init__(message)
        self.side = side


@dataclass(frozen=True)
class QuadratureSpec:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    max_subdivisions: int = 2048
    transform: str = "none"
    exponent: Optional[float] = None

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("quadrature tolerances must be positive")
        if self.max_subdivisions < 16:
            raise ValueError("max_subdivisions must be >= 16")
        if self.transform not in ("none", "power_substitution"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.transform == "power_substitution" and not (self.exponent and self.exponent > 0):
            raise ValueError("power_substitution needs a positive exponent")


@dataclass(frozen=True)
class ZetaConfig:
    N: int = 10_000
    refinement: str = "richardson"

    def __post_init__(self):
        if self.N < 100:
            raise ValueError("zeta truncation N must be >= 100")
        if self.refinement not in ("plain", "richardson"):
            raise ValueError(f"unknown refinement {self.refinement!r}")


@dataclass(frozen=True)
class InversionConfig:
    order: int = 14
    working_precision: int = 30

    def __post_init__(self):
        if self.order not in (8, 10, 12, 14, 16):
            raise ValueError("Gaver-Stehfest order must be one of 8, 10, 12, 14, 16")
        if self.order >= 12 and self.working_precision < 30:
            raise ValueError("orders >= 12 need at least 30 digits of working precision")


# ---------------------------------------------------------------------------
# zeta


def _zeta_partial(s: float, N: int) -> float:
    n = np.arange(1, N + 1, dtype=float)
    head = math.fsum(np.sort(n ** (-s)))
    if s == 0.0:
        # sum of N ones minus N minus 1/2, kept exact
        return float(N) - float(N) - 0.5
    return head - N ** (1.0 - s) / (1.0 - s) - 0.5 * N ** (-s)


def zeta_em(s: float, cfg: ZetaConfig = ZetaConfig()) -> tuple[float, float]:
    """Riemann zeta on s > -1, s != 1, from the Euler-Maclaurin truncation.

    Returns ``(value, err_est)``.  The truncated expression at ``N`` misses
    ``-s N^{-s-1}/12`` to leading order; ``richardson`` removes that term
    by combining ``N`` and ``2N``.
    """
    if s == 1.0:
        raise ValueError("zeta_em: pole at s = 1")
    if s <= -1.0:
        raise ValueError("zeta_em: requires s > -1")
    N = cfg.N
    if s == 0.0:
        return -0.5, 0.0
    z1 = _zeta_partial(s, N)
    roundoff = 8 * np.finfo(float).eps * max(1.0, (2 * N) ** (1.0 - s))
    if cfg.refinement == "plain":
        return z1, abs(s) * N ** (-s - 1.0) / 12.0 + roundoff
    z2 = _zeta_partial(s, 2 * N)
    r = 2.0 ** (s + 1.0)
    value = (r * z2 - z1) / (r - 1.0)
    # next Euler-Maclaurin term, B4/4! * f'''(N)
    err = abs(s * (s + 1.0) * (s + 2.0)) * N ** (-s - 3.0) / 720.0 + roundoff
    return value, err


# ---------------------------------------------------------------------------
# quadrature


def _quad(f, a, b, spec: QuadratureSpec, points=None):
    kw = dict(epsabs=spec.abs_tol, epsrel=spec.rel_tol, limit=spec.max_subdivisions, full_output=1)
    if points is not None and np.isfinite(b):
        kw["points"] = points
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        out = integrate.quad(f, a, b, **kw)
    value, err = out[0], out[1]
    ier = 0 if len(out) == 3 else out[3]
    return value, err, ier


def integrate_improper(
    f: Callable[[float], float],
    domain: tuple[float, float] = (0.0, math.inf),
    spec: QuadratureSpec = QuadratureSpec(),
    breakpoints: Optional[list[float]] = None,
) -> tuple[float, float]:
    """Adaptive quadrature of ``f`` over ``domain``; returns ``(value, err_est)``.

    With ``transform="power_substitution"`` the piece next to a zero lower
    endpoint is integrated in ``s`` with ``x = s**exponent`` so that an
    algebraic singularity ``x**g`` becomes ``s**(exponent*(1+g)-1)``.
    ``breakpoints`` split the domain so that features far from the origin
    are not missed.
    """
    a, b = domain
    if not a < b:
        raise ValueError("integrate_improper: empty domain")
    cuts = [a]
    for p in sorted(breakpoints or []):
        if a < p < b:
            cuts.append(p)
    if math.isinf(b) and len(cuts) == 1:
        cuts.append(a + 1.0 if a > 0 else 1.0)
    cuts.append(b)

    total, total_err, bad = 0.0, 0.0, False
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if lo == 0.0 and spec.transform == "power_substitution" and math.isfinite(hi):
            m = spec.exponent
            smax = hi ** (1.0 / m)

            def g(s, m=m):
                return f(s**m) * m * s ** (m - 1.0) if s > 0 else 0.0

            v, e, ier = _quad(g, 0.0, smax, spec)
        else:
            v, e, ier = _quad(f, lo, hi, spec)
        total += v
        total_err += e
        if ier not in (0,) and e > max(spec.abs_tol, spec.rel_tol * abs(v)):
            bad = True
    if bad or not math.isfinite(total):
        raise QuadratureError("integrate_improper did not converge", total, total_err)
    return total, total_err


# ---------------------------------------------------------------------------
# minimization


def minimize_scalar(g: Callable[[float], float], bracket: tuple[float, float], tol: float = 1e-10):
    """Bounded Brent minimization; returns ``(x_star, g_star)``.

    Raises :class:`BracketError` when the minimum sits on an endpoint of
    ``bracket``, i.e. ``g`` is monotone there.
    """
    lo, hi = bracket
    if not lo < hi:
        raise ValueError("minimize_scalar: bracket must satisfy lo < hi")
    res = optimize.minimize_scalar(g, bounds=(lo, hi), method="bounded",
                                   options={"xatol": tol, "maxiter": 500})
    x = float(res.x)
    gx = float(g(x))
    edge = max(100 * tol, 1e-6 * (hi - lo))
    if x - lo <= edge and g(lo) <= gx + 1e-15 * max(1.0, abs(gx)):
        raise BracketError("lower", f"no interior minimum: g is increasing near the lower end {lo}")
    if hi - x <= edge and g(hi) <= gx + 1e-15 * max(1.0, abs(gx)):
        raise BracketError("upper", f"no interior minimum: g is decreasing up to the upper end {hi}")
    return x, gx


# ---------------------------------------------------------------------------
# Gaver-Stehfest


def stehfest_weights(order: int, dps: int) -> list:
    """Stehfest coefficients V_1..V_order as mpf numbers."""
    if order % 2:
        raise ValueError("Stehfest order must be even")
    half = order // 2
    with mp.workdps(dps):
        V = []
        for k in range(1, order + 1):
            acc = mp.mpf(0)
            for j in range((k + 1) // 2, min(k, half) + 1):
                acc += (mp.mpf(j) ** half * mp.factorial(2 * j)
                        / (mp.factorial(half - j) * mp.factorial(j) * mp.factorial(j - 1)
                           * mp.factorial(k - j) * mp.factorial(2 * j - k)))
            V.append((-1) ** (k + half) * acc)
    return V


def laplace_invert_gs(F: Callable, x: float, cfg: InversionConfig = InversionConfig()) -> float:
    """Gaver-Stehfest inverse of the Laplace transform ``F`` at ``x > 0``.

    ``F`` is called with mpf arguments ``k ln2 / x`` and should return a
    value accurate to roughly the working precision.  A warning is issued
    when orders ``order`` and ``order - 2`` disagree by more than 1%.
    """
    if not x > 0:
        raise ValueError("laplace_invert_gs needs x > 0")
    dps = cfg.working_precision
    with mp.workdps(dps):
        xm = mp.mpf(x)
        ln2 = mp.log(2)
        vals = [mp.mpf(F(k * ln2 / xm)) for k in range(1, cfg.order + 1)]

        def combine(order):
            V = stehfest_weights(order, dps)
            return ln2 / xm * mp.fsum(V[k] * vals[k] for k in range(order))

        main = combine(cfg.order)
        coarse = combine(cfg.order - 2)
        if abs(main - coarse) > 0.01 * abs(main):
            warnings.warn(f"Gaver-Stehfest orders {cfg.order} and {cfg.order - 2} disagree "
                          f"by more than 1% at x={x}: {float(main)!r} vs {float(coarse)!r}",
                          RuntimeWarning, stacklevel=2)
        return float(main)


# ---------------------------------------------------------------------------
# power sums of the clock weights


def ci_exp_constant(a: float, b: float, tau: float) -> float:
    """c(a,b) = int_0^inf x^{-a alpha} exp(-b x^{-alpha}) dx in closed form."""
    if not a > tau - 1:
        raise ValueError("c(a,b) requires a > tau - 1")
    if math.isinf(b):
        return 0.0
    k = a - tau + 1.0
    return (tau - 1.0) * special.gamma(k) * b ** (-k)


def sum_ci_exp(a: float, b: float, u: float, tau: float) -> tuple[float, float]:
    """Sum over i >= 2 of c_i^a exp(-b c_i u), and the scaling constant c(a,b).

    The sum is taken directly up to a cutoff well past the scale
    ``u^{tau-1}`` and the remainder is the Euler-Maclaurin corrected
    integral tail (an incomplete gamma function).
    """
    if not a > tau - 1:
        raise ValueError("sum_ci_exp diverges unless a > tau - 1")
    if not (b > 0 and u > 0):
        raise ValueError("sum_ci_exp needs b > 0 and u > 0")
    c_ab = ci_exp_constant(a, b, tau)
    if math.isinf(b):
        return 0.0, 0.0
    alpha = 1.0 / (tau - 1.0)
    K = int(min(max(64 * u ** (tau - 1.0), 1e5), 2e7))
    lam = b * u
    total = 0.0
    start = 2
    while start <= K:
        stop = min(K, start + 4_000_000 - 1)
        i = np.arange(start, stop + 1, dtype=float)
        c = i ** (-alpha)
        total += float(np.sum(np.exp(a * np.log(c) - lam * c)))
        start = stop + 1
    # tail sum over i > K: integral minus g(K)/2 minus g'(K)/12
    s = a * alpha
    yK = K ** (-alpha)
    k = a - tau + 1.0
    integral = (tau - 1.0) * lam ** (-k) * special.gamma(k) * special.gammainc(k, lam * yK)
    gK = K ** (-s) * math.exp(-lam * yK)
    dgK = gK * (-s / K + lam * alpha * K ** (-alpha - 1.0))
    total += integral - 0.5 * gK - dgK / 12.0
    return total, c_ab
