"""Critical rank-1 random graphs with Pareto weights.

The Norros-Reittu graph joins i and j with probability 1 - exp(-w_i w_j / l_n).
It is generated as a Poisson multigraph: M ~ Poisson(l_n / 2) candidate
edges with both endpoints drawn proportionally to w, so that each pair
receives Poisson(w_i w_j / l_n) candidates.  Self-loops are dropped and
parallel edges collapsed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import mpmath as mp
import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

KERNELS = ("nr", "cl", "grg")
PAIRWISE_LIMIT = 20_000


@dataclass(frozen=True)
class WeightModel:
    n: int
    tau: float
    lam: float
    x0: float
    c_F: float
    w: np.ndarray = field(repr=False, compare=False)
    # w_n = x0 from the Pareto form, where the generalized inverse would give 0
    convention: str = "w_n = x0 (Pareto form at i = n)"

    @property
    def alpha(self) -> float:
        return 1.0 / (self.tau - 1.0)

    @property
    def rho(self) -> float:
        return (self.tau - 2.0) / (self.tau - 1.0)

    @property
    def eta(self) -> float:
        return (self.tau - 3.0) / (self.tau - 1.0)

    @property
    def ell(self) -> float:
        return float(np.sum(self.w))

    @property
    def nu(self) -> float:
        return float(np.sum(self.w**2) / np.sum(self.w))

    @property
    def mean_weight(self) -> float:
        """E[W] of the Pareto law, without the scaling-window factor."""
        return self.x0 * (self.tau - 1.0) / (self.tau - 2.0)


def pareto_x0(tau: float) -> float:
    """Lower endpoint making E[W^2]/E[W] = 1 for Pareto(tau - 1, x0)."""
    return (tau - 3.0) / (tau - 2.0)


def build_weights(n: int, tau: float, lam: float = 0.0) -> WeightModel:
    """w_i = x0 (n/i)^alpha (1 + lam n^{-eta}), i = 1..n."""
    if n < 2:
        raise ValueError("build_weights needs n >= 2")
    if not 3.0 < tau < 4.0:
        raise ValueError("tau must lie in (3, 4)")
    eta = (tau - 3.0) / (tau - 1.0)
    factor = 1.0 + lam * n ** (-eta)
    if factor < 0:
        raise ValueError(f"lambda={lam} too negative for n={n}: 1 + lambda n^(-eta) = {factor} < 0")
    x0 = pareto_x0(tau)
    i = np.arange(1, n + 1, dtype=float)
    w = x0 * (n / i) ** (1.0 / (tau - 1.0)) * factor
    return WeightModel(n, tau, lam, x0, x0 ** (tau - 1.0), w)


def model_from_weights(w: Sequence[float], tau: float = 3.5) -> WeightModel:
    """Wrap an arbitrary weight vector (fixtures, degenerate cases)."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size < 2 or np.any(w < 0):
        raise ValueError("weights must be a vector of at least two non-negative numbers")
    x0 = pareto_x0(tau)
    return WeightModel(w.size, tau, 0.0, x0, x0 ** (tau - 1.0), w, convention="custom weights")


@dataclass(frozen=True)
class Graph:
    n: int
    adjacency: sparse.csr_matrix = field(repr=False)

    @property
    def m(self) -> int:
        return int(self.adjacency.nnz // 2)

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def has_edge(self, i: int, j: int) -> bool:
        return bool(np.any(self.neighbors(i) == j))

    @classmethod
    def from_edges(cls, n: int, i: np.ndarray, j: np.ndarray) -> "Graph":
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        keep = i != j
        lo, hi = np.minimum(i[keep], j[keep]), np.maximum(i[keep], j[keep])
        key = np.unique(lo * n + hi)
        lo, hi = key // n, key % n
        data = np.ones(2 * key.size, dtype=np.int8)
        adj = sparse.csr_matrix((data, (np.concatenate([lo, hi]), np.concatenate([hi, lo]))), shape=(n, n))
        adj.sort_indices()
        return cls(n, adj)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(int(seed))


def _pairwise(model: WeightModel, rng: np.random.Generator, kernel: str) -> Graph:
    n = model.n
    if n > PAIRWISE_LIMIT:
        raise ValueError(f"kernel {kernel!r} uses per-pair trials; n must be <= {PAIRWISE_LIMIT}")
    w, ell = model.w, model.ell
    rows, cols = [], []
    for i in range(n - 1):
        x = w[i] * w[i + 1:] / ell
        p = np.minimum(x, 1.0) if kernel == "cl" else x / (1.0 + x)
        hit = np.flatnonzero(rng.random(p.size) < p) + i + 1
        rows.append(np.full(hit.size, i))
        cols.append(hit)
    if not rows:
        return Graph.from_edges(n, np.empty(0, int), np.empty(0, int))
    return Graph.from_edges(n, np.concatenate(rows), np.concatenate(cols))


def generate_graph(model: WeightModel, seed, kernel: str = "nr") -> Graph:
    """One graph from ``model``; deterministic given ``seed``.

    ``nr`` is generated in O(n + m); ``cl`` (min(w_i w_j / l_n, 1)) and
    ``grg`` (w_i w_j / (l_n + w_i w_j)) use per-pair trials.
    """
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")
    rng = _rng(seed)
    if kernel != "nr":
        return _pairwise(model, rng, kernel)
    ell = model.ell
    if ell <= 0:
        return Graph.from_edges(model.n, np.empty(0, int), np.empty(0, int))
    M = int(rng.poisson(ell / 2.0))
    cdf = np.cumsum(model.w)
    cdf /= cdf[-1]
    ends = np.searchsorted(cdf, rng.random(2 * M), side="right")
    # zero-weight vertices have zero-width cdf cells and are never drawn
    ends = np.minimum(ends, model.n - 1)
    return Graph.from_edges(model.n, ends[:M], ends[M:])


@dataclass(frozen=True)
class ComponentStats:
    ordered_sizes: np.ndarray
    c_vertex1: int
    labels: np.ndarray = field(repr=False)

    @property
    def largest(self) -> int:
        return int(self.ordered_sizes[0])


def component_stats(g: Graph) -> ComponentStats:
    """Component sizes in decreasing order and the component of vertex 1 (index 0)."""
    _, labels = csgraph.connected_components(g.adjacency, directed=False)
    sizes = np.bincount(labels)
    return ComponentStats(np.sort(sizes)[::-1], int(sizes[labels[0]]), labels)


def mixed_poisson_pmf(k_max: int, tau: float, x0: Optional[float] = None, scale: float = 1.0) -> np.ndarray:
    """P(Poi(W) = k), k = 0..k_max, for W = scale * Pareto(tau - 1, x0).

    E[e^{-W} W^k / k!] = (tau-1) (s x0)^{tau-1} Gamma(k+1-tau, s x0) / k!,
    with the upper incomplete gamma evaluated at a possibly negative order.
    """
    x0 = pareto_x0(tau) if x0 is None else x0
    if scale == 0.0:
        out = np.zeros(k_max + 1)
        out[0] = 1.0
        return out
    a = scale * x0
    with mp.workdps(30):
        vals = [(tau - 1.0) * mp.power(a, tau - 1.0) * mp.gammainc(k + 1.0 - tau, a) / mp.factorial(k)
                for k in range(k_max + 1)]
    return np.array([float(v) for v in vals])


def degree_histogram(g: Graph) -> np.ndarray:
    return np.bincount(g.degrees())


def degree_check(g: Graph, model: WeightModel, k_max: int = 50) -> float:
    """Total-variation distance between N_k/n and the mixed-Poisson law.

    Masses for k > k_max are lumped into one cell on both sides.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if np.all(model.w == 0):
        pmf = np.zeros(k_max + 1)
        pmf[0] = 1.0
    else:
        scale = 1.0 + model.lam * model.n ** (-model.eta)
        pmf = mixed_poisson_pmf(k_max, model.tau, model.x0, scale)
    hist = degree_histogram(g).astype(float) / g.n
    emp = np.zeros(k_max + 1)
    emp[:min(hist.size, k_max + 1)] = hist[:k_max + 1]
    emp_rest = max(0.0, 1.0 - emp.sum())
    pmf_rest = max(0.0, 1.0 - pmf.sum())
    return 0.5 * (float(np.abs(emp - pmf).sum()) + abs(emp_rest - pmf_rest))


@dataclass
class GraphEnsembleResult:
    n: int
    tau: float
    lam: float
    seed: int
    kernel: str
    ordered_sizes: np.ndarray      # (reps, keep) leading component sizes, zero padded
    c_vertex1: np.ndarray          # (reps,)
    edges: np.ndarray              # (reps,)
    degree_hist: np.ndarray        # summed over replicas
    nu_n: float

    @property
    def rho(self) -> float:
        return (self.tau - 2.0) / (self.tau - 1.0)

    @property
    def scaled_largest(self) -> np.ndarray:
        return self.ordered_sizes[:, 0] / self.n**self.rho

    @property
    def scaled_vertex1(self) -> np.ndarray:
        return self.c_vertex1 / self.n**self.rho

    def rows(self) -> list[dict]:
        return [{"n": self.n, "replica": r, "c1_ordered": int(self.ordered_sizes[r, 0]),
                 "c_vertex1": int(self.c_vertex1[r]), "m": int(self.edges[r]), "nu_n": self.nu_n}
                for r in range(self.c_vertex1.size)]


def graph_ensemble(n: int, tau: float, lam: float, reps: int, seed: int, kernel: str = "nr",
                   keep: int = 10) -> GraphEnsembleResult:
    """``reps`` independent graphs; replica r uses stream (seed, n, r)."""
    model = build_weights(n, tau, lam)
    sizes = np.zeros((reps, keep), dtype=np.int64)
    c1 = np.zeros(reps, dtype=np.int64)
    edges = np.zeros(reps, dtype=np.int64)
    hist = np.zeros(1, dtype=np.int64)
    for r in range(reps):
        g = generate_graph(model, np.random.SeedSequence(int(seed), spawn_key=(int(n), r)), kernel)
        st = component_stats(g)
        k = min(keep, st.ordered_sizes.size)
        sizes[r, :k] = st.ordered_sizes[:k]
        c1[r] = st.c_vertex1
        edges[r] = g.m
        h = degree_histogram(g)
        if h.size > hist.size:
            hist = np.pad(hist, (0, h.size - hist.size))
        hist[:h.size] += h
    return GraphEnsembleResult(n, tau, lam, int(seed), kernel, sizes, c1, edges, hist, model.nu)


def scaling_ensemble(tau: float, lam: float, n_list: Sequence[int], reps: int, seed: int,
                     kernel: str = "nr") -> dict[int, GraphEnsembleResult]:
    """Ensembles over a ladder of sizes, for n^{-rho}-rescaled component statistics."""
    for n in n_list:
        if n < 1000:
            raise ValueError("scaling_ensemble needs every n >= 1000")
    return {int(n): graph_ensemble(int(n), tau, lam, reps, seed, kernel) for n in n_list}


def ks_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    from scipy import stats
    return float(stats.ks_2samp(a, b).statistic)


def process_time_unit(model: WeightModel) -> float:
    """a = c_F^alpha / E[W]: graph cluster sizes correspond to a H_1(0) in the process."""
    return model.c_F ** model.alpha / model.mean_weight
