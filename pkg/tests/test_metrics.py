import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg

from fastdual.blocks import gather
from fastdual.metrics import (BlockDiagonalMetric, DiagonalMetric, InfeasibleMetric,
                              PowerIterationError, ScalarMetric, SparseFactoredMetric,
                              block_feasible_closed_form, check_local_choice, default_eps,
                              distributed_init, exact_metric, gram_sparse, local_gram,
                              local_metric_sdp, mu_diagonal, neighborhood_block_sizes,
                              power_iteration, scalar_metric, verify_feasible)
from fastdual.testing import random_problem

seeds = st.integers(0, 2**32 - 1)


def _psd(rng, n, rank=None):
    V = rng.standard_normal((n, rank or n))
    return V @ V.T


def _min_eig_gap(blocks, G):
    return np.linalg.eigvalsh(linalg.block_diag(*blocks) - G).min()


def _sdp_oracle(G, sizes):
    import cvxpy as cp
    Ls = [cp.Variable((s, s), symmetric=True) for s in sizes]
    Lfull = cp.bmat([[Ls[a] if a == b else np.zeros((sizes[a], sizes[b]))
                      for b in range(len(sizes))] for a in range(len(sizes))])
    prob = cp.Problem(cp.Minimize(sum(cp.trace(L) for L in Ls)), [Lfull - G >> 0])
    prob.solve(solver="CLARABEL")
    assert prob.status == "optimal"
    return prob.value


@given(seeds)
def test_metric_apply_solve_roundtrip(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(seed, M=4)
    v = rng.standard_normal(prob.dual_dim)
    metrics = [ScalarMetric(2.5, prob.dual_dim), DiagonalMetric(rng.uniform(0.5, 3, prob.dual_dim)),
               BlockDiagonalMetric([_psd(rng, q) + np.eye(q) for q in prob.partition.q_sizes]),
               exact_metric(prob)]
    for L in metrics:
        assert np.linalg.norm(L.apply(L.solve(v)) - v) <= 1e-10 * np.linalg.norm(v)
        assert np.allclose(L.dense() @ v, L.apply(v), atol=1e-12)


@given(seeds)
def test_exact_metric_is_the_gram_matrix(seed):
    prob = random_problem(seed, M=5, dense_hessian=seed % 2 == 0)
    L = exact_metric(prob)
    G = prob.gram_dense()
    assert np.allclose(L.dense(), G, atol=1e-12)
    assert sorted(L.perm) == list(range(prob.dual_dim))
    v = np.random.default_rng(seed).standard_normal(prob.dual_dim)
    assert np.allclose(L.solve(v), np.linalg.solve(G, v), rtol=1e-9, atol=1e-9)
    assert verify_feasible(L, prob).feasible


def test_exact_metric_rejects_coupling():
    with pytest.raises(ValueError):
        exact_metric(random_problem(1, M=3, p_range=(1, 1)))


def test_sparse_factored_indefinite():
    with pytest.raises(InfeasibleMetric):
        SparseFactoredMetric(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_pattern_hash_depends_on_pattern_only():
    a = SparseFactoredMetric(np.array([[2.0, 1.0], [1.0, 2.0]]))
    b = SparseFactoredMetric(np.array([[3.0, 0.5], [0.5, 3.0]]))
    c = SparseFactoredMetric(np.eye(2))
    assert a.pattern_hash() == b.pattern_hash() != c.pattern_hash()


@given(seeds)
def test_power_iteration_matches_eigvalsh(seed):
    rng = np.random.default_rng(seed)
    G = _psd(rng, 12)
    rho = power_iteration(lambda v: G @ v, 12, tol=1e-12)
    assert rho == pytest.approx(np.linalg.eigvalsh(G)[-1], rel=1e-10)


def test_power_iteration_zero_operator():
    assert power_iteration(lambda v: 0 * v, 3) == 0.0


def test_power_iteration_rejects_negative():
    with pytest.raises(PowerIterationError):
        power_iteration(lambda v: -v, 3)


@given(seeds)
def test_scalar_metrics_feasible_and_ordered(seed):
    prob = random_problem(seed, M=4, p_range=(0, 1))
    two = scalar_metric(prob, "two_norm")
    one = scalar_metric(prob, "one_norm")
    assert verify_feasible(two, prob).feasible
    assert verify_feasible(one, prob).feasible
    assert one.alpha >= two.alpha * (1 - 1e-9)
    assert two.alpha == pytest.approx(np.linalg.eigvalsh(prob.gram_dense())[-1], rel=1e-8)


@given(seeds, st.lists(st.integers(1, 4), min_size=1, max_size=5))
def test_closed_form_is_feasible(seed, sizes):
    rng = np.random.default_rng(seed)
    dim = sum(sizes)
    G = _psd(rng, dim, rank=max(1, dim // 2))
    blocks = block_feasible_closed_form(G, sizes)
    assert _min_eig_gap(blocks, G) >= default_eps(G) * (1 - 1e-6) - 1e-12


def test_sdp_two_by_two_optimum():
    res = local_metric_sdp(np.array([[2.0, 1.0], [1.0, 2.0]]), [1, 1])
    assert not res.fallback
    assert res.trace == pytest.approx(6.0, abs=1e-4)


def test_sdp_diagonal_gram_is_tight():
    G = np.diag([1.0, 2.0, 3.0])
    res = local_metric_sdp(G, [1, 2], eps=1e-6)
    assert res.trace == pytest.approx(6.0 + 3e-6, abs=1e-5)


def test_sdp_single_block():
    rng = np.random.default_rng(0)
    G = _psd(rng, 4)
    res = local_metric_sdp(G, [4], eps=1e-3)
    assert np.allclose(res.blocks[0], G + 1e-3 * np.eye(4))


@pytest.mark.parametrize("seed", range(6))
def test_sdp_dominates_closed_form_and_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    sizes = list(rng.integers(1, 4, size=rng.integers(2, 5)))
    dim = sum(sizes)
    G = _psd(rng, dim, rank=max(1, dim - 2))
    eps = 1e-7
    res = local_metric_sdp(G, sizes, eps=eps)
    closed = block_feasible_closed_form(G, sizes, eps)
    assert res.trace <= sum(np.trace(b) for b in closed) + 1e-12
    assert _min_eig_gap(res.blocks, G + eps * np.eye(dim)) >= -1e-9
    ref = _sdp_oracle(G + eps * np.eye(dim), sizes)
    assert res.trace == pytest.approx(ref, rel=1e-4, abs=1e-6)


@given(seeds)
def test_distributed_init_feasible(seed):
    prob = random_problem(seed, M=5, p_range=(0, 1))
    for chooser in ("closed_form", "sdp"):
        L = distributed_init(prob, chooser)
        assert verify_feasible(L, prob).feasible


@given(seeds)
def test_quadratic_form_summation_identity(seed):
    prob = random_problem(seed, M=5, p_range=(0, 1))
    from fastdual.metrics import closed_form_chooser

    choices = {i: closed_form_chooser(prob, i) for i in range(prob.M)}
    L = distributed_init(prob, "closed_form")
    nu = np.random.default_rng(seed).standard_normal(prob.dual_dim)
    total = 0.0
    for i in range(prob.M):
        Lloc = linalg.block_diag(*[choices[i][j] for j in prob.neighbor_sets.M[i]])
        v = gather(nu, i, prob)
        total += v @ Lloc @ v
    assert total == pytest.approx(nu @ L.apply(nu), rel=1e-12, abs=1e-12)


@given(seeds)
def test_metric_mu_part_stays_diagonal(seed):
    prob = random_problem(seed, M=4, p_range=(1, 2))
    L = distributed_init(prob, "sdp")
    d = mu_diagonal(prob, L)
    D = L.dense()
    assert np.array_equal(np.diag(D)[prob.mu_index], d)
    mu = prob.mu_index
    off = D[mu].copy()
    off[np.arange(mu.size), mu] = 0
    assert np.all(off == 0)


def test_mu_diagonal_rejects_coupled_blocks():
    prob = random_problem(2, M=2, p_range=(1, 1))
    blocks = [np.ones((q, q)) + q * np.eye(q) for q in prob.partition.q_sizes]
    with pytest.raises(ValueError):
        mu_diagonal(prob, BlockDiagonalMetric(blocks))


def test_check_local_choice_detects_violation():
    prob = random_problem(3, M=3)
    from fastdual.metrics import closed_form_chooser
    choice = closed_form_chooser(prob, 0)
    check_local_choice(prob, 0, choice)
    bad = {j: 0.01 * b for j, b in choice.items()}
    with pytest.raises(InfeasibleMetric):
        check_local_choice(prob, 0, bad)


def test_local_gram_matches_dense_slice():
    prob = random_problem(7, M=5, p_range=(0, 1), dense_hessian=True)
    from fastdual.blocks import local_rows
    P = prob.partition
    i = 2
    rows = local_rows(prob, i)
    Ci = prob.C_dense()[rows][:, P.n_offsets[i]:P.n_offsets[i + 1]]
    ref = Ci @ np.linalg.inv(prob.costs[i].H) @ Ci.T
    assert np.allclose(local_gram(prob, i), ref, atol=1e-12)
    assert sum(neighborhood_block_sizes(prob, i)) == rows.size


def test_gram_sparse_symmetric():
    prob = random_problem(9, M=6)
    G = gram_sparse(prob)
    assert (abs(G - G.T) > 0).nnz == 0
