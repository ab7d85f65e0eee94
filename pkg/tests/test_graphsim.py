import math

import numpy as np
import pytest

from thinlevy.graphsim import (Graph, build_weights, component_stats, degree_check, generate_graph,
                               graph_ensemble, ks_distance, mixed_poisson_pmf, model_from_weights, pareto_x0,
                               process_time_unit, scaling_ensemble)


@pytest.fixture
def path_plus_isolated():
    # 1-2-3 plus an isolated vertex 4 (indices 0..3)
    return Graph.from_edges(4, np.array([0, 1]), np.array([1, 2]))


def test_pareto_endpoint_gives_criticality():
    x0 = pareto_x0(3.5)
    assert x0 == pytest.approx(1 / 3, abs=1e-15)
    tau = 3.5
    mean = x0 * (tau - 1) / (tau - 2)
    second = x0 * x0 * (tau - 1) / (tau - 3)
    assert second / mean == pytest.approx(1.0, abs=1e-14)


def test_weights_shape_and_last_vertex():
    m = build_weights(1000, 3.5)
    assert m.w[-1] == pytest.approx(m.x0, abs=1e-15)
    assert np.all(np.diff(m.w) < 0)
    assert m.c_F == pytest.approx(m.x0 ** 2.5)
    assert m.rho == pytest.approx(0.6)
    assert m.eta == pytest.approx(0.2)


def test_window_factor():
    base, shifted = build_weights(500, 3.5), build_weights(500, 3.5, lam=2.0)
    assert np.allclose(shifted.w / base.w, 1 + 2.0 * 500 ** -0.2)
    with pytest.raises(ValueError):
        build_weights(500, 3.5, lam=-10.0)
    with pytest.raises(ValueError):
        build_weights(1, 3.5)


def test_nu_approaches_one():
    gaps = [abs(build_weights(n, 3.5).nu - 1) for n in (10**4, 10**5, 10**6)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_two_vertex_edge_probability():
    m = model_from_weights([1.0, 1.0])
    reps = 100_000
    hits = sum(generate_graph(m, s).m for s in range(reps))
    p = 1 - math.exp(-0.5)
    se = math.sqrt(p * (1 - p) / reps)
    assert abs(hits / reps - p) < 3 * se


def test_edge_count_mean_at_thousand():
    m = build_weights(1000, 3.5)
    counts = np.array([generate_graph(m, np.random.SeedSequence(s)).m for s in range(1000)])
    x = np.outer(m.w, m.w) / m.ell
    expected = float(np.sum(np.triu(-np.expm1(-x), 1)))
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - expected) < 3 * se


def test_zero_weight_vertices_are_isolated():
    m = model_from_weights([2.0, 0.0, 1.5, 0.0, 1.0])
    for s in range(200):
        d = generate_graph(m, s).degrees()
        assert d[1] == 0 and d[3] == 0


def test_generation_is_deterministic():
    m = build_weights(5000, 3.5)
    a, b = generate_graph(m, 17), generate_graph(m, 17)
    assert (a.adjacency != b.adjacency).nnz == 0


def test_simple_graph_invariants():
    g = generate_graph(build_weights(3000, 3.5), 5)
    a = g.adjacency
    assert (a != a.T).nnz == 0
    assert a.diagonal().sum() == 0
    assert a.max() == 1


def test_from_edges_collapses_and_drops_loops():
    g = Graph.from_edges(3, np.array([0, 1, 0, 2]), np.array([1, 0, 0, 2]))
    assert g.m == 1 and g.has_edge(0, 1) and g.has_edge(1, 0) and not g.has_edge(0, 2)


def test_unknown_kernel_rejected():
    with pytest.raises(ValueError):
        generate_graph(build_weights(10, 3.5), 0, kernel="er")


def test_chung_lu_kernel_is_capped():
    # w_1 w_2 / l > 1 makes the Chung-Lu edge certain
    m = model_from_weights([10.0, 10.0, 0.1, 0.1])
    assert all(generate_graph(m, s, kernel="cl").has_edge(0, 1) for s in range(50))


def test_kernels_agree_on_mean_degree():
    m = build_weights(2000, 3.5)
    means = {k: np.mean([generate_graph(m, s, kernel=k).m for s in range(5)]) for k in ("nr", "cl", "grg")}
    assert abs(means["cl"] / means["nr"] - 1) < 0.05
    assert abs(means["grg"] / means["nr"] - 1) < 0.05


def test_edgeless_components():
    st = component_stats(Graph.from_edges(5, np.empty(0, int), np.empty(0, int)))
    assert list(st.ordered_sizes) == [1] * 5 and st.c_vertex1 == 1


def test_path_fixture_components(path_plus_isolated):
    st = component_stats(path_plus_isolated)
    assert list(st.ordered_sizes) == [3, 1]
    assert st.c_vertex1 == 3 and st.largest == 3


def test_component_sizes_partition():
    for s in range(3):
        g = generate_graph(build_weights(10_000, 3.5), s)
        st = component_stats(g)
        assert st.ordered_sizes.sum() == g.n
        assert st.c_vertex1 <= st.largest


def test_mixed_poisson_normalizes():
    pmf = mixed_poisson_pmf(400, 3.5)
    # P(Poi(W) > 400) is below the Pareto tail P(W > 200) + Poisson deviations, ~1e-7 here
    assert np.all(pmf >= 0)
    assert abs(pmf.sum() - 1) < 1e-6
    mean = float(np.sum(np.arange(pmf.size) * pmf))
    assert mean == pytest.approx(pareto_x0(3.5) * 2.5 / 1.5, rel=1e-3)


def test_mixed_poisson_degenerate_scale():
    pmf = mixed_poisson_pmf(5, 3.5, scale=0.0)
    assert list(pmf) == [1, 0, 0, 0, 0, 0]


def test_degree_check_degenerate_weights():
    m = model_from_weights(np.zeros(10))
    g = generate_graph(m, 0)
    assert degree_check(g, m) == 0.0
    # a planted edge moves two vertices off zero: deficit 2/10
    g2 = Graph.from_edges(10, np.array([0]), np.array([1]))
    assert degree_check(g2, m) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        degree_check(g, m, k_max=0)


def test_degree_law_at_hundred_thousand():
    m = build_weights(100_000, 3.5)
    assert degree_check(generate_graph(m, 2024), m) < 0.01


def test_ensemble_layout_and_reproducibility():
    a = graph_ensemble(2000, 3.5, 0.0, reps=4, seed=3)
    b = graph_ensemble(2000, 3.5, 0.0, reps=4, seed=3)
    assert a.ordered_sizes.shape == (4, 10)
    assert np.array_equal(a.ordered_sizes, b.ordered_sizes)
    assert np.all(a.c_vertex1 <= a.ordered_sizes[:, 0])
    assert np.all(a.scaled_largest >= a.scaled_vertex1)
    assert len(a.rows()) == 4 and a.rows()[0]["n"] == 2000
    assert a.degree_hist.sum() == 4 * 2000


def test_scaling_ensemble_rejects_small_n():
    with pytest.raises(ValueError):
        scaling_ensemble(3.5, 0.0, [500], reps=2, seed=0)


def test_ks_distance_basic():
    x = np.arange(100.0)
    assert ks_distance(x, x) == 0.0
    assert ks_distance(x, x + 1000) == 1.0


def test_process_time_unit():
    m = build_weights(100, 3.5)
    assert process_time_unit(m) == pytest.approx(m.c_F ** (1 / 2.5) / m.mean_weight)
