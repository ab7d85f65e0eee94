"""Clusters of the critical Norros-Reittu graph.

With Pareto weights tuned so that nu = E[W^2]/E[W] = 1, the largest
clusters grow like n^rho with rho = (tau-2)/(tau-1). Rescaled sizes
should therefore look alike across n. The cluster of the heaviest
vertex is the one that the thinned Levy process describes.
"""
import numpy as np

from thinlevy.graphsim import build_weights, degree_check, generate_graph, ks_distance, scaling_ensemble

tau = 3.5
model = build_weights(100_000, tau)
g = generate_graph(model, seed=1)
print(f"n = {model.n}: nu_n = {model.nu:.4f}, edges = {g.m}, "
      f"degree TV to mixed Poisson = {degree_check(g, model):.4f}\n")

ens = scaling_ensemble(tau, 0.0, [10_000, 100_000], reps=40, seed=7)
for n, res in ens.items():
    q = np.quantile(res.scaled_vertex1, [0.25, 0.5, 0.75])
    print(f"n = {n:>7}: |C(1)|/n^rho quartiles {np.round(q, 3)}, "
          f"largest/n^rho median {np.median(res.scaled_largest):.3f}")
a, b = (ens[n].scaled_vertex1 for n in (10_000, 100_000))
print(f"\nKS distance between the two rescaled |C(1)| samples: {ks_distance(a, b):.3f}")
