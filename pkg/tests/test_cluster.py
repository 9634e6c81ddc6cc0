import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrlinv import cluster as cl
from ctrlinv.errors import ParameterError, PlanError


def _random_partition(n, r, rng):
    labels = np.concatenate([np.arange(r), rng.integers(0, r, n - r)])
    rng.shuffle(labels)
    return labels


def test_weight_is_unit_and_proportional_to_sqrt_mass():
    w = cl.clustering_weight(np.array([1.0, 4.0, 9.0]))
    assert np.linalg.norm(w) == pytest.approx(1.0)
    assert np.allclose(w / w[0], [1, 2, 3])
    with pytest.raises(ParameterError):
        cl.clustering_weight(np.array([1.0, 0.0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_projection_is_coisometry(n, r, seed):
    r = min(r, n)
    rng = np.random.default_rng(seed)
    w = cl.clustering_weight(rng.uniform(0.5, 5, n))
    plan = cl.build_projection(cl.labels_to_clusters(_random_partition(n, r, rng), r), w)
    assert np.allclose(plan.P @ plan.P.T, np.eye(r), atol=1e-13)
    # the weight lies in the range of P^T, so P^T P w = w
    assert np.allclose(plan.P.T @ (plan.P @ w), w, atol=1e-13)
    F = rng.standard_normal((4 * n, 3))
    assert np.allclose(plan.apply(F), plan.Pi() @ F)
    G = rng.standard_normal((4 * r, 2))
    assert np.allclose(plan.apply_T(G), plan.Pi().T @ G)


@pytest.mark.parametrize(
    "clusters,msg",
    [(((0, 1), ()), "empty"), (((0, 1), (1, 2)), "more than one"), (((0,), (1,)), "not covered"), (((0, 5), (1, 2)), "out-of-range")],
)
def test_projection_rejects_bad_plans(clusters, msg):
    with pytest.raises(PlanError, match=msg):
        cl.build_projection(clusters, np.ones(3) / np.sqrt(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(1, 5), st.integers(1, 6), st.integers(0, 10_000))
def test_projection_residual_equals_kmeans_objective(n, r, k, seed):
    r = min(r, n)
    rng = np.random.default_rng(seed)
    w = cl.clustering_weight(rng.uniform(0.5, 5, n))
    F = rng.standard_normal((4 * n, k))
    labels = _random_partition(n, r, rng)
    plan = cl.build_projection(cl.labels_to_clusters(labels, r), w)
    psi = cl.build_psi(F, w)
    lhs = cl.xi_full(plan, F) ** 2
    rhs = cl.kmeans_objective(psi.Psi, w, labels, r)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, lhs)
    assert cl.xi_kappa(plan, psi) == pytest.approx(np.sqrt(lhs), rel=1e-10, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 20), st.integers(1, 5), st.integers(0, 10_000), st.sampled_from(["kmeans++", "random"]))
def test_lloyd_trace_monotone_and_labels_canonical(n, r, seed, init):
    r = min(r, n)
    rng = np.random.default_rng(seed)
    w = cl.clustering_weight(rng.uniform(0.5, 5, n))
    Psi = rng.standard_normal((n, 5))
    res = cl.lloyd_cluster(Psi, w, r, seed=seed, restarts=3, init=init)
    assert np.all(np.diff(res.trace) <= 1e-12 * max(1.0, res.trace[0]))
    assert res.objective == pytest.approx(cl.kmeans_objective(Psi, w, res.labels, r))
    assert set(res.labels.tolist()) == set(range(r))
    _, first = np.unique(res.labels, return_index=True)
    assert np.all(np.diff(first) > 0)  # cluster i first appears before cluster i+1
    assert min(res.restart_objectives) == pytest.approx(res.objective)


def test_lloyd_is_seed_reproducible():
    rng = np.random.default_rng(0)
    Psi, w = rng.standard_normal((15, 4)), cl.clustering_weight(rng.uniform(1, 2, 15))
    a = cl.lloyd_cluster(Psi, w, 4, seed=9)
    b = cl.lloyd_cluster(Psi, w, 4, seed=9)
    assert np.array_equal(a.labels, b.labels) and a.trace == b.trace


def test_lloyd_with_duplicate_points_keeps_clusters_nonempty():
    Psi = np.zeros((6, 2))
    Psi[3:] = 1.0
    res = cl.lloyd_cluster(Psi, np.ones(6) / np.sqrt(6), 4, seed=0)
    assert np.bincount(res.labels, minlength=4).min() >= 1


def test_lloyd_argument_checks():
    Psi, w = np.zeros((3, 1)), np.ones(3)
    for kw in ({"r": 0}, {"r": 4}, {"r": 2, "restarts": 0}, {"r": 2, "init": "x"}):
        with pytest.raises(ParameterError):
            cl.lloyd_cluster(Psi, w, **kw)


def test_r_equals_n_gives_zero_objective():
    rng = np.random.default_rng(1)
    Psi = rng.standard_normal((5, 3))
    res = cl.lloyd_cluster(Psi, np.ones(5), 5)
    assert res.objective == pytest.approx(0.0, abs=1e-14)


def test_set_partitions_count_stirling():
    # Stirling numbers of the second kind S(6, k)
    for r, expected in [(1, 1), (2, 31), (3, 90), (4, 65), (6, 1)]:
        assert sum(1 for _ in cl._set_partitions(6, r)) == expected


def test_brute_force_limit():
    with pytest.raises(ParameterError):
        cl.brute_force_partition(np.zeros((11, 1)), np.ones(11), 2)


def test_plan_dict_is_one_based(tmp_path):
    plan = cl.build_projection(((0, 2), (1,)), np.ones(3) / np.sqrt(3))
    d = cl.plan_to_dict(plan, objective=1.5)
    assert d["clusters"] == [[1, 3], [2]] and d["r"] == 2
    cl.save_plan(plan, tmp_path / "p.json")
    assert (tmp_path / "p.json").exists()
