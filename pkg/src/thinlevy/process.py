"""The thinned Levy process and its truncated simulation.

    S_t = start + drift*t + sum_i c_i (1{T_i <= t} - c_i t),    c_i = i^{-alpha}

Clocks i <= N (the head) are simulated exactly.  The tail i > N enters
through its compensated mean m_N(t) and, optionally, a Gaussian
independent-increment surrogate with variance function v_N(t).

Two sampling interfaces are provided.  :func:`sample_clocks` produces one
self-contained :class:`ClockSample` (serialisable, used for replay and
fixtures).  :func:`sample_batch` produces many replicas at once in a sparse
layout and is what the Monte Carlo estimators use.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numpy.polynomial import Chebyshev

from .numerics import QuadratureSpec, integrate_improper


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ModelParams:
    tau: float = 3.5
    beta_tilde: float = 0.0

    def __post_init__(self):
        if not 3.0 < self.tau < 4.0:
            raise ValueError(f"tau must lie in (3, 4), got {self.tau}")
        if not math.isfinite(self.beta_tilde):
            raise ValueError("beta_tilde must be finite")

    @property
    def alpha(self) -> float:
        return 1.0 / (self.tau - 1.0)

    @property
    def rho(self) -> float:
        return (self.tau - 2.0) / (self.tau - 1.0)

    @property
    def eta(self) -> float:
        return (self.tau - 3.0) / (self.tau - 1.0)


@dataclass(frozen=True)
class Measure:
    """Law of the clocks: ``original`` or exponentially ``tilted`` by theta."""

    kind: str = "original"
    theta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("original", "tilted"):
            raise ValueError(f"unknown measure {self.kind!r}")
        if self.kind == "tilted" and not self.theta > 0:
            raise ValueError(f"tilted measure needs theta > 0, got {self.theta}")
        if self.kind == "original" and self.theta != 0.0:
            raise ValueError("the original measure carries no theta")

    @classmethod
    def original(cls) -> "Measure":
        return cls("original", 0.0)

    @classmethod
    def tilted(cls, theta: float) -> "Measure":
        return cls("tilted", float(theta))

    @property
    def is_tilted(self) -> bool:
        return self.kind == "tilted"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "theta": self.theta}


@dataclass(frozen=True)
class TruncationScheme:
    N: int = 100_000
    tail_mode: str = "gaussian"
    tail_grid_step: Optional[float] = None  # None means horizon/1024

    def __post_init__(self):
        if self.tail_mode not in ("gaussian", "mean_only", "none"):
            raise ValueError(f"unknown tail_mode {self.tail_mode!r}")
        if self.tail_mode != "none" and self.N < 1000:
            raise ValueError("head cutoff N must be >= 1000 when a tail is modelled")
        if self.N < 1:
            raise ValueError("head cutoff N must be positive")
        if self.tail_grid_step is not None and not self.tail_grid_step > 0:
            raise ValueError("tail_grid_step must be positive")

    def grid(self, u: float) -> np.ndarray:
        step = u / 1024.0 if self.tail_grid_step is None else self.tail_grid_step
        cells = max(1, int(math.ceil(u / step - 1e-9)))
        return np.linspace(0.0, u, cells + 1)


def clock_weight(i, params: ModelParams):
    """c_i = i^{-alpha}; accepts scalars or integer arrays."""
    i_arr = np.asarray(i)
    if np.any(i_arr < 1):
        raise ValueError("clock index must be >= 1")
    out = i_arr.astype(float) ** (-params.alpha)
    return float(out) if out.ndim == 0 else out


def make_vertex_process(params: ModelParams, i: int) -> tuple[float, float]:
    """(start, drift) of the process exploring the cluster of vertex i."""
    if i < 1:
        raise ValueError("vertex index must be >= 1")
    if i == 1:
        return 1.0, params.beta_tilde
    c = clock_weight(i, params)
    return c, params.beta_tilde + 1.0 - c * c


def clock_set(params: ModelParams, N: int, vertex: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Indices and weights of the head clocks for the vertex-``vertex`` process."""
    idx = np.arange(1, N + 1, dtype=np.int64)
    idx = idx[idx != vertex]
    return idx, idx.astype(float) ** (-params.alpha)


# ---------------------------------------------------------------------------
# clock laws


def fire_probability(c, u: float, measure: Measure):
    """P(T <= u) for clocks of weight ``c`` under ``measure``."""
    c = np.asarray(c, dtype=float)
    x = c * u
    if not measure.is_tilted:
        return -np.expm1(-x)
    with np.errstate(divide="ignore", over="ignore"):
        ratio = np.exp(-(1.0 + measure.theta) * x) / -np.expm1(-x)
    return 1.0 / (1.0 + ratio)


def clock_cdf(c, t, u: float, measure: Measure):
    """P(T <= t) for 0 <= t <= u; the tilted law depends on the horizon u."""
    c = np.asarray(c, dtype=float)
    t = np.asarray(t, dtype=float)
    base = -np.expm1(-c * t)
    if not measure.is_tilted:
        return base
    x = c * u
    norm = 1.0 + np.exp(-x) * np.expm1(-measure.theta * x)
    return base / norm


def _expm1_plus(x):
    """-expm1(-x) - x without cancellation, for x >= 0."""
    x = np.asarray(x, dtype=float)
    out = -np.expm1(-x) - x
    small = x < 1e-3
    if np.any(small):
        xs = x[small]
        out[small] = xs * xs * (-0.5 + xs * (1.0 / 6.0 - xs / 24.0))
    return out


def _moment_terms(c, t, u, measure):
    """Per-clock compensated mean and variance contributions."""
    p = clock_cdf(c, t, u, measure)
    if measure.is_tilted:
        x = c * u
        shift = np.exp(-x) * np.expm1(-measure.theta * x)
        mean = c * (_expm1_plus(c * t) - c * t * shift) / (1.0 + shift)
    else:
        mean = c * _expm1_plus(c * t)
    return mean, c * c * p * (1.0 - p)


class TailMoments(NamedTuple):
    mean: float
    var: float
    err: float


def tail_moments(params: ModelParams, scheme: TruncationScheme, t: float, measure: Measure,
                 u: Optional[float] = None) -> TailMoments:
    """Compensated mean and variance of the clocks i > N at time t.

    Summed directly for N < i <= 16N; beyond that the Euler-Maclaurin
    corrected integral is used.  ``u`` is the horizon of the tilted law
    (defaults to ``t``); it is ignored under the original measure.
    """
    if t < 0:
        raise ValueError("tail_moments needs t >= 0")
    u = t if u is None else u
    if measure.is_tilted and not 0 <= t <= u:
        raise ValueError("tail_moments needs 0 <= t <= u")
    if t == 0.0:
        return TailMoments(0.0, 0.0, 0.0)
    N = scheme.N
    K = 16 * N
    alpha = params.alpha
    tau = params.tau
    m_direct = v_direct = 0.0
    start = N + 1
    while start <= K:
        stop = min(K, start + 2_000_000 - 1)
        c = np.arange(start, stop + 1, dtype=float) ** (-alpha)
        mt, vt = _moment_terms(c, t, u, measure)
        m_direct += float(np.sum(mt))
        v_direct += float(np.sum(vt))
        start = stop + 1

    yK = K ** (-alpha)
    spec = QuadratureSpec(abs_tol=1e-15, rel_tol=1e-11, transform="power_substitution",
                          exponent=1.0 / (4.0 - tau))

    def integral(which):
        def f(y):
            terms = _moment_terms(np.array([y]), t, u, measure)[which]
            return (tau - 1.0) * float(terms[0]) * y ** (-tau)
        return integrate_improper(f, (0.0, yK), spec)

    def g(x, which):
        return float(_moment_terms(np.array([x ** (-alpha)]), t, u, measure)[which][0])

    out, errs = [], []
    for which, direct in ((0, m_direct), (1, v_direct)):
        val, err = integral(which)
        h = 1e-3 * K
        dg = (g(K + h, which) - g(K - h, which)) / (2 * h)
        gK = g(K, which)
        out.append(direct + val - 0.5 * gK - dg / 12.0)
        errs.append(err + abs(dg) / 12.0 * 1e-2 + 1e-14 * abs(direct))
    return TailMoments(out[0], out[1], max(errs))


@functools.lru_cache(maxsize=64)
def _tail_table(params: ModelParams, N: int, u: float, measure: Measure):
    """Chebyshev interpolants of (m_N, v_N) on [0, u], original and measure-specific."""
    scheme = TruncationScheme(N=max(N, 1000))
    deg = 24

    nodes = Chebyshev.basis(deg + 1, domain=[0.0, u]).roots()
    vals = np.array([tail_moments(params, scheme, float(min(max(x, 0.0), u)), measure, u)[:2]
                     for x in nodes])
    return (Chebyshev.fit(nodes, vals[:, 0], deg, domain=[0.0, u]),
            Chebyshev.fit(nodes, vals[:, 1], deg, domain=[0.0, u]))


def tail_mean_var_on_grid(params: ModelParams, scheme: TruncationScheme, u: float,
                          measure: Measure, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(m_N, v_N) on ``grid``; exactly zero at t=0."""
    if scheme.tail_mode == "none":
        z = np.zeros_like(grid)
        return z, z.copy()
    m_fn, v_fn = _tail_table(params, scheme.N, float(u), measure)
    m = m_fn(grid)
    v = np.maximum.accumulate(np.maximum(v_fn(grid), 0.0))
    m[grid == 0.0] = 0.0
    v[grid == 0.0] = 0.0
    return m, v


def sampling_tail_mean(params: ModelParams, scheme: TruncationScheme, u: float,
                       measure: Measure, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance functions of the simulated tail under ``measure``.

    The Gaussian surrogate takes the exact moments of the tail clocks under
    ``measure``.  A deterministic tail (``mean_only``) is not tilted.
    """
    if scheme.tail_mode != "gaussian":
        measure = Measure.original()
    return tail_mean_var_on_grid(params, scheme, u, measure, grid)


# Taylor coefficients of the per-clock log-mgf in x = c u, orders 3..10,
# each a polynomial in theta (highest power first)
_CGF_SERIES = tuple(np.array(row, dtype=float) for row in (
    [1 / 2, -1 / 2, 0],
    [1 / 6, -3 / 4, 1 / 6, 0],
    [1 / 24, -7 / 12, 7 / 12, -1 / 24, 0],
    [1 / 120, -5 / 16, 31 / 36, -5 / 16, 1 / 120, 0],
    [1 / 720, -31 / 240, 115 / 144, -115 / 144, 31 / 240, -1 / 720, 0],
    [1 / 5040, -7 / 160, 391 / 720, -75 / 64, 391 / 720, -7 / 160, 1 / 5040, 0],
    [1 / 40320, -127 / 10080, 1267 / 4320, -3451 / 2880, 3451 / 2880, -1267 / 4320, 127 / 10080,
     -1 / 40320, 0],
    [1 / 362880, -17 / 5376, 3991 / 30240, -1085 / 1152, 25231 / 14400, -1085 / 1152, 3991 / 30240,
     -17 / 5376, 1 / 362880, 0],
))


def clock_log_mgf(x, theta: float):
    """log E[exp(theta u c (1{T <= u} - c u))] for one clock, as a function of x = c u."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        out = theta * x - theta * x * x + np.log1p(np.exp(-x) * np.expm1(-theta * x))
    small = x < 2e-2
    if np.any(small):
        xs = x[small]
        acc = np.zeros_like(xs)
        for coef in reversed(_CGF_SERIES):
            acc = (acc + np.polyval(coef, theta)) * xs
        out[small] = acc * xs * xs
    return out


def tail_log_mgf(params: ModelParams, scheme: TruncationScheme, u: float, theta: float) -> float:
    """log E[exp(theta u R_u)] for the exact tail R_u = sum over i > N.

    Direct summation for N < i <= 16N, then the Euler-Maclaurin corrected
    integral.
    """
    if scheme.tail_mode == "none":
        return 0.0
    N = scheme.N
    K = 16 * N
    alpha, tau = params.alpha, params.tau
    total = 0.0
    start = N + 1
    while start <= K:
        stop = min(K, start + 2_000_000 - 1)
        c = np.arange(start, stop + 1, dtype=float) ** (-alpha)
        total += float(np.sum(clock_log_mgf(c * u, theta)))
        start = stop + 1
    yK = K ** (-alpha)
    spec = QuadratureSpec(abs_tol=1e-15, rel_tol=1e-11, transform="power_substitution",
                          exponent=1.0 / (4.0 - tau))
    val, _ = integrate_improper(
        lambda y: (tau - 1.0) * float(clock_log_mgf(np.array([u * y]), theta)[0]) * y ** (-tau),
        (0.0, yK), spec)

    def g(i):
        return float(clock_log_mgf(np.array([u * i ** (-alpha)]), theta)[0])

    h = 1e-3 * K
    return total + val - 0.5 * g(K) - (g(K + h) - g(K - h)) / (2 * h) / 12.0


# ---------------------------------------------------------------------------
# single samples


def replica_rng(seed: int, replica: int) -> np.random.Generator:
    """Stream for replica ``replica`` of run ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(replica),)))


def _truncated_exponential(c, u, v):
    """Inverse CDF of Exp(rate c) conditioned on [0, u], at uniforms v."""
    return -np.log1p(v * np.expm1(-c * u)) / c


@dataclass
class ClockSample:
    """One realization of the truncated process on [0, horizon].

    ``head_times[k]`` is the jump time of the clock with weight
    ``weights[k]``; ``inf`` means no jump in [0, horizon].  The tail is
    stored as its mean and centred noise on ``tail_grid``.
    """

    params: ModelParams
    horizon: float
    measure: Measure
    scheme: TruncationScheme
    seed: int
    weights: np.ndarray
    head_times: np.ndarray
    tail_grid: np.ndarray
    tail_mean: np.ndarray
    tail_noise: np.ndarray
    vertex: int = 1
    start: float = 1.0
    drift: float = 0.0
    custom_weights: bool = False
    _order: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def compensator(self) -> float:
        return float(np.sum(self.weights * self.weights))

    @property
    def tail_increments(self) -> np.ndarray:
        return np.diff(self.tail_noise)

    # -- serialisation -----------------------------------------------------

    def to_json(self) -> str:
        def enc(a):
            return [None if not math.isfinite(x) else float(x) for x in np.asarray(a, dtype=float)]

        doc = {
            "format": "thinlevy.ClockSample/1",
            "params": {"tau": self.params.tau, "beta_tilde": self.params.beta_tilde},
            "seed": int(self.seed),
            "N": self.scheme.N,
            "tail_mode": self.scheme.tail_mode,
            "tail_grid_step": self.scheme.tail_grid_step,
            "measure": self.measure.to_dict(),
            "horizon": self.horizon,
            "vertex": self.vertex,
            "start": self.start,
            "drift": self.drift,
            "head_times": enc(self.head_times),
            "tail_grid": enc(self.tail_grid),
            "tail_mean": enc(self.tail_mean),
            "tail_increments": enc(self.tail_increments),
        }
        if self.custom_weights:
            doc["weights"] = enc(self.weights)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ClockSample":
        doc = json.loads(text)
        params = ModelParams(**doc["params"])
        scheme = TruncationScheme(doc["N"], doc["tail_mode"], doc["tail_grid_step"])
        measure = Measure(**doc["measure"])

        def dec(a):
            return np.array([math.inf if x is None else x for x in a], dtype=float)

        if "weights" in doc:
            weights, custom = dec(doc["weights"]), True
        else:
            weights, custom = clock_set(params, scheme.N, doc["vertex"])[1], False
        noise = np.concatenate([[0.0], np.cumsum(dec(doc["tail_increments"]))])
        return cls(params, doc["horizon"], measure, scheme, doc["seed"], weights,
                   dec(doc["head_times"]), dec(doc["tail_grid"]), dec(doc["tail_mean"]), noise,
                   doc["vertex"], doc["start"], doc["drift"], custom)

    @classmethod
    def from_jumps(cls, params: ModelParams, horizon: float, weights, times,
                   start: float = 1.0, drift: Optional[float] = None) -> "ClockSample":
        """Hand-built fixture without tail: clocks of given weights and times."""
        weights = np.asarray(weights, dtype=float)
        times = np.asarray(times, dtype=float)
        if weights.shape != times.shape:
            raise ValueError("weights and times must have the same shape")
        grid = np.array([0.0, horizon])
        drift = params.beta_tilde if drift is None else drift
        return cls(params, float(horizon), Measure.original(), TruncationScheme(N=max(1, len(weights)), tail_mode="none"),
                   0, weights, times, grid, np.zeros(2), np.zeros(2), 1, float(start), float(drift), True)

    def without_jump(self, k: int) -> "ClockSample":
        """Copy in which clock ``k`` never fires (compensation unchanged)."""
        times = self.head_times.copy()
        times[k] = math.inf
        return ClockSample(self.params, self.horizon, self.measure, self.scheme, self.seed,
                           self.weights, times, self.tail_grid, self.tail_mean, self.tail_noise,
                           self.vertex, self.start, self.drift, self.custom_weights)

    def sorted_jumps(self) -> tuple[np.ndarray, np.ndarray]:
        if self._order is None:
            fired = np.flatnonzero(self.head_times <= self.horizon)
            self._order = fired[np.argsort(self.head_times[fired], kind="stable")]
        return self.head_times[self._order], self.weights[self._order]


def sample_clocks(params: ModelParams, u: float, scheme: TruncationScheme = TruncationScheme(),
                  measure: Measure = Measure.original(), seed: int = 0, replica: int = 0,
                  vertex: int = 1) -> ClockSample:
    """Draw one :class:`ClockSample` on [0, u] from the stream (seed, replica)."""
    if not u > 0:
        raise ValueError("horizon u must be positive")
    if measure.is_tilted and vertex != 1:
        raise ValueError("tilted sampling is defined for the vertex-1 process only")
    rng = replica_rng(seed, replica)
    _, c = clock_set(params, scheme.N, vertex)
    if measure.is_tilted:
        p = fire_probability(c, u, measure)
        fire = rng.random(c.size) < p
        v = rng.random(c.size)
        times = np.full(c.size, math.inf)
        times[fire] = _truncated_exponential(c[fire], u, v[fire])
    else:
        times = rng.exponential(1.0 / c)
    grid = scheme.grid(u)
    mean, var = sampling_tail_mean(params, scheme, u, measure, grid)
    noise = np.zeros_like(grid)
    if scheme.tail_mode == "gaussian":
        noise[1:] = np.cumsum(rng.standard_normal(grid.size - 1) * np.sqrt(np.diff(var)))
    start, drift = make_vertex_process(params, vertex)
    return ClockSample(params, float(u), measure, scheme, int(seed), c, times, grid, mean, noise,
                       vertex, start, drift)


def extend_clocks(sample: ClockSample, new_N: int, seed: int) -> ClockSample:
    """Refine ``sample`` to head cutoff ``new_N`` > N, keeping its randomness.

    Clocks N < i <= new_N are drawn from a fresh stream; the new tail noise
    is drawn conditionally on the old one so that the old tail equals the
    new tail plus an independent Gaussian standing in for the added clocks.
    """
    if sample.measure.is_tilted or sample.vertex != 1 or sample.custom_weights:
        raise ValueError("extend_clocks supports original-measure vertex-1 samples")
    old = sample.scheme
    if new_N <= old.N:
        raise ValueError("new_N must exceed the current head cutoff")
    params, u = sample.params, sample.horizon
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0x45585445, old.N, new_N)))
    c_new = np.arange(old.N + 1, new_N + 1, dtype=float) ** (-params.alpha)
    t_new = rng.exponential(1.0 / c_new)
    scheme = TruncationScheme(new_N, old.tail_mode, old.tail_grid_step)
    grid = sample.tail_grid
    mean, var_new = sampling_tail_mean(params, scheme, u, sample.measure, grid)
    noise = np.zeros_like(grid)
    if old.tail_mode == "gaussian":
        _, var_old = sampling_tail_mean(params, old, u, sample.measure, grid)
        dv_old, dv_new = np.diff(var_old), np.diff(var_new)
        share = np.divide(dv_new, dv_old, out=np.zeros_like(dv_new), where=dv_old > 0)
        share = np.clip(share, 0.0, 1.0)
        inc = share * np.diff(sample.tail_noise)
        inc += np.sqrt(np.maximum(dv_new * (1.0 - share), 0.0)) * rng.standard_normal(inc.size)
        noise[1:] = np.cumsum(inc)
    return ClockSample(params, u, sample.measure, scheme, sample.seed,
                       np.concatenate([sample.weights, c_new]),
                       np.concatenate([sample.head_times, t_new]),
                       grid, mean, noise, 1, sample.start, sample.drift)


# ---------------------------------------------------------------------------
# path evaluation


@dataclass(frozen=True)
class PathValue:
    t: float
    value: float
    head_part: float
    tail_mean_part: float
    tail_noise_part: float
    start: float
    drift: float

    @staticmethod
    def combine(start, drift, t, head, mean, noise) -> float:
        return start + drift * t + head + mean + noise


def eval_path(sample: ClockSample, t: float, start: Optional[float] = None,
              drift: Optional[float] = None) -> PathValue:
    """S_t split into its head, tail-mean and tail-noise parts."""
    if not 0.0 <= t <= sample.horizon:
        raise ValueError(f"t={t} outside [0, {sample.horizon}]")
    start = sample.start if start is None else start
    drift = sample.drift if drift is None else drift
    fired = sample.head_times <= t
    head = float(np.sum(sample.weights[fired])) - t * sample.compensator
    mean = float(np.interp(t, sample.tail_grid, sample.tail_mean))
    noise = float(np.interp(t, sample.tail_grid, sample.tail_noise))
    value = PathValue.combine(start, drift, t, head, mean, noise)
    return PathValue(float(t), value, head, mean, noise, start, drift)


def hitting_time(sample: ClockSample, horizon: Optional[float] = None,
                 start: Optional[float] = None, drift: Optional[float] = None) -> float:
    """First t <= horizon with S_t <= 0; returns ``horizon`` when none.

    Between consecutive breakpoints (jump times and tail-grid nodes) the
    path is linear, so each piece is solved exactly.  A left limit that
    equals 0 at a jump time counts as a hit.
    """
    u = sample.horizon if horizon is None else horizon
    if not 0 < u <= sample.horizon:
        raise ValueError("horizon must lie in (0, sample horizon]")
    start = sample.start if start is None else start
    drift = sample.drift if drift is None else drift
    if start <= 0:
        return 0.0
    jt, jw = sample.sorted_jumps()
    keep = jt <= u
    jt, jw = jt[keep], jw[keep]
    grid = sample.tail_grid
    nodes = np.union1d(grid[grid < u], np.append(jt, u))
    cont = drift * nodes - sample.compensator * nodes + np.interp(nodes, grid, sample.tail_mean) \
        + np.interp(nodes, grid, sample.tail_noise)
    # cumulative jumps strictly before each node, and the jump landing on it
    before = np.concatenate([[0.0], np.cumsum(jw)])[np.searchsorted(jt, nodes, side="left")]
    at = np.concatenate([[0.0], np.cumsum(jw)])[np.searchsorted(jt, nodes, side="right")] - before
    left = start + cont + before
    right = left + at
    hit = np.flatnonzero(left[1:] <= 0.0)
    if right[0] <= 0.0:
        return float(nodes[0])
    if hit.size == 0:
        return float(u)
    k = hit[0]
    a, b = right[k], left[k + 1]
    if a <= 0.0:
        return float(nodes[k])
    return float(nodes[k] + a / (a - b) * (nodes[k + 1] - nodes[k]))


# ---------------------------------------------------------------------------
# batched sampling


_DENSE_P = 0.5


def _fired_dense(p, R, rng):
    hits = rng.random((R, p.size)) < p
    rep, pos = np.nonzero(hits)
    return rep, pos


def _fired_sparse(p, R, rng, offset):
    """Bernoulli(p_j) for a decreasing block p by geometric skipping and thinning."""
    L = p.size
    pmax = float(p[0])
    mean = L * pmax
    cols = int(mean + 6.0 * math.sqrt(mean + 1.0) + 10)
    gaps = rng.geometric(pmax, size=(R, cols))
    pos = np.cumsum(gaps, axis=1) - 1
    while np.any(pos[:, -1] < L):
        more = rng.geometric(pmax, size=(R, cols))
        pos = np.concatenate([pos, pos[:, -1:] + np.cumsum(more, axis=1)], axis=1)
    rep, col = np.nonzero(pos < L)
    at = pos[rep, col]
    accept = rng.random(at.size) * pmax < p[at]
    return rep[accept], at[accept] + offset


def _sample_fired(p, R, rng):
    """Replica and clock positions of the clocks that fire, p decreasing."""
    n = p.size
    dense_end = int(np.searchsorted(-p, -_DENSE_P, side="right"))
    dense_end = max(dense_end, min(n, 64))
    reps, poss = [], []
    if dense_end:
        r, q = _fired_dense(p[:dense_end], R, rng)
        reps.append(r)
        poss.append(q)
    start = dense_end
    while start < n:
        # block where p stays within a factor 0.8 of its first value
        stop = int(np.searchsorted(-p, -0.8 * p[start], side="left"))
        stop = min(n, max(stop, start + 256))
        r, q = _fired_sparse(p[start:stop], R, rng, start)
        reps.append(r)
        poss.append(q)
        start = stop
    rep = np.concatenate(reps) if reps else np.zeros(0, np.int64)
    pos = np.concatenate(poss) if poss else np.zeros(0, np.int64)
    return rep, pos


@dataclass
class PathBatch:
    """R independent replicas of the vertex-1 path on [0, u], sparse layout.

    Only clocks that fire in [0, u] are stored, as flat arrays ``rep``,
    ``weight`` and ``time``.  The tail is ``tail_mean`` (shared) plus
    centred Gaussian noise ``tail_noise`` of shape (R, len(grid)).
    """

    params: ModelParams
    u: float
    scheme: TruncationScheme
    measure: Measure
    R: int
    rep: np.ndarray
    weight: np.ndarray
    time: np.ndarray
    compensator: float
    grid: np.ndarray
    tail_mean: np.ndarray
    tail_var: np.ndarray
    tail_noise: np.ndarray
    start: float = 1.0
    drift: float = 0.0

    @property
    def head_sum(self) -> np.ndarray:
        return np.bincount(self.rep, weights=self.weight, minlength=self.R)

    def deterministic_at_u(self) -> np.ndarray:
        """S_u minus the tail noise at u."""
        u = self.u
        return (self.start + (self.drift - self.compensator) * u + self.head_sum
                + self.tail_mean[-1])

    def value_at_u(self) -> np.ndarray:
        return self.deterministic_at_u() + self.tail_noise[:, -1]

    def set_noise_endpoint(self, z_end: np.ndarray) -> None:
        """Replace the tail noise by its Gaussian bridge to ``z_end`` at u."""
        v = self.tail_var
        if v[-1] <= 0:
            return
        frac = v / v[-1]
        self.tail_noise = self.tail_noise + np.outer(z_end - self.tail_noise[:, -1], frac)

    def replica(self, r: int) -> ClockSample:
        """Replica ``r`` as a :class:`ClockSample` (fired clocks only)."""
        sel = self.rep == r
        w = np.append(self.weight[sel], math.sqrt(max(self.compensator - float(np.sum(self.weight[sel] ** 2)), 0.0)))
        t = np.append(self.time[sel], math.inf)
        return ClockSample(self.params, self.u, self.measure, self.scheme, 0, w, t, self.grid,
                           self.tail_mean.copy(), self.tail_noise[r].copy(), 1, self.start, self.drift, True)

    def values_at(self, times) -> np.ndarray:
        """S at each of the sorted ``times``, shape (R, len(times))."""
        times = np.asarray(times, dtype=float)
        k = times.size
        slot = np.searchsorted(times, self.time, side="left")
        inside = slot < k
        jumps = np.bincount(self.rep[inside] * (k + 1) + slot[inside], weights=self.weight[inside],
                            minlength=self.R * (k + 1)).reshape(self.R, k + 1)
        head = np.cumsum(jumps[:, :k], axis=1)
        mean = np.interp(times, self.grid, self.tail_mean)
        noise = self._noise_at(times)
        return self.start + (self.drift - self.compensator) * times + head + mean + noise

    def _noise_at(self, times):
        g = self.grid
        j = np.clip(np.searchsorted(g, times, side="right") - 1, 0, g.size - 2)
        w = (times - g[j]) / (g[j + 1] - g[j])
        return self.tail_noise[:, j] * (1.0 - w) + self.tail_noise[:, j + 1] * w

    def first_passage(self, cells_per_round: int = 8) -> tuple[np.ndarray, np.ndarray]:
        """(hit, time): whether each replica reaches 0 on [0, u], and when.

        Cells of the tail grid are screened with the bound
        S(t_k) + min(0, continuous increment).  Flagged cells are then swept
        jump by jump in time order, a few per replica at a time, solving
        each linear piece exactly.
        """
        R, g = self.R, self.grid
        K = g.size - 1
        dt = np.diff(g)
        hit = np.zeros(R, dtype=bool)
        when = np.full(R, self.u)
        if self.start <= 0:
            return np.ones(R, bool), np.zeros(R)
        cell = np.clip(np.searchsorted(g, self.time, side="right") - 1, 0, K - 1)
        flat = self.rep * K + cell
        J = np.bincount(flat, weights=self.weight, minlength=R * K).reshape(R, K)
        cont = (self.drift - self.compensator) * g + self.tail_mean + self.tail_noise
        dcont = np.diff(cont, axis=1)
        S_left = np.cumsum(J, axis=1)
        S_left -= J
        S_left += self.start + cont[:, :-1]
        flagged = S_left + np.minimum(0.0, dcont) <= 0.0
        rank = np.cumsum(flagged, axis=1)
        n_flag = rank[:, -1]
        done_rank = np.zeros(R, dtype=np.int64)
        while True:
            active = (~hit) & (done_rank < n_flag)
            if not active.any():
                return hit, when
            hi = done_rank + cells_per_round
            window = flagged & (rank > done_rank[:, None]) & (rank <= hi[:, None]) & active[:, None]
            done_rank = np.where(active, hi, done_rank)
            fr, fk = np.nonzero(window)
            sel = window.ravel()[flat]
            jr, jk, jt, jw = self.rep[sel], cell[sel], self.time[sel], self.weight[sel]
            er = np.concatenate([jr, fr])
            ek = np.concatenate([jk, fk])
            et = np.concatenate([jt, g[fk + 1]])
            ew = np.concatenate([jw, np.zeros(fr.size)])
            is_end = np.concatenate([np.zeros(jr.size, bool), np.ones(fr.size, bool)])
            order = np.lexsort((is_end, et, ek, er))
            er, ek, et, ew = er[order], ek[order], et[order], ew[order]
            seg_start = np.ones(er.size, dtype=bool)
            seg_start[1:] = (er[1:] != er[:-1]) | (ek[1:] != ek[:-1])
            csum = np.cumsum(ew)
            seg_first = np.maximum.accumulate(np.where(seg_start, np.arange(er.size), 0))
            before = csum - ew - (csum - ew)[seg_first]
            slope = dcont[er, ek] / dt[ek]
            t0 = g[ek]
            base = S_left[er, ek]
            left = base + slope * (et - t0) + before
            prev_t = np.where(seg_start, t0, np.roll(et, 1))
            prev_v = np.where(seg_start, base, np.roll(left + ew, 1))
            idx = np.flatnonzero(left <= 0.0)
            if idx.size == 0:
                continue
            first = idx[np.unique(er[idx], return_index=True)[1]]
            a, b = prev_v[first], left[first]
            frac = np.where(a > 0, a / np.where(a - b > 0, a - b, 1.0), 0.0)
            t_hit = prev_t[first] + frac * (et[first] - prev_t[first])
            hit[er[first]] = True
            when[er[first]] = np.minimum(t_hit, self.u)


def sample_batch(params: ModelParams, u: float, scheme: TruncationScheme, measure: Measure,
                 R: int, rng: np.random.Generator, need_noise: bool = True) -> PathBatch:
    """Draw R replicas of the vertex-1 path on [0, u] into a :class:`PathBatch`."""
    if not u > 0:
        raise ValueError("horizon u must be positive")
    _, c = clock_set(params, scheme.N, 1)
    p = fire_probability(c, u, measure)
    rep, pos = _sample_fired(p, R, rng)
    w = c[pos]
    # given a jump in [0, u] both laws are exponential truncated to [0, u]
    t = _truncated_exponential(w, u, rng.random(w.size))
    grid = scheme.grid(u)
    mean, var = sampling_tail_mean(params, scheme, u, measure, grid)
    noise = np.zeros((R, grid.size))
    if scheme.tail_mode == "gaussian" and need_noise:
        noise[:, 1:] = np.cumsum(rng.standard_normal((R, grid.size - 1)) * np.sqrt(np.diff(var)), axis=1)
    return PathBatch(params, float(u), scheme, measure, R, rep.astype(np.int64), w, t,
                     float(np.sum(c * c)), grid, mean, var, noise, 1.0, params.beta_tilde)


def expected_fires(params: ModelParams, u: float, scheme: TruncationScheme, measure: Measure) -> float:
    _, c = clock_set(params, scheme.N, 1)
    return float(np.sum(fire_probability(c, u, measure)))


def batch_size(params: ModelParams, u: float, scheme: TruncationScheme, measure: Measure,
               budget: int = 3_000_000) -> int:
    """Replicas per batch keeping the sparse arrays near ``budget`` entries."""
    per = expected_fires(params, u, scheme, measure) + 2 * (scheme.grid(u).size + 64)
    return int(min(4096, max(16, budget // max(per, 1.0))))


def analytic_mean(params: ModelParams, t: float) -> float:
    """E[S_t] under the original measure for the untruncated process."""
    if t == 0:
        return 1.0
    head = TruncationScheme(N=1000, tail_mode="mean_only")
    _, c = clock_set(params, head.N, 1)
    m_head = float(np.sum(c * _expm1_plus(c * t)))
    return 1.0 + params.beta_tilde * t + m_head + tail_moments(params, head, t, Measure.original()).mean
