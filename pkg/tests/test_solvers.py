import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastdual.metrics import (DiagonalMetric, ScalarMetric, distributed_init, exact_metric,
                              scalar_metric)
from fastdual.prox import SeparableFunction, dual_objective
from fastdual.solvers import (SolveOptions, combine_metrics, fast_dual_gradient, fast_gradient,
                              momentum_coefficient, next_t, parallel_fast_dual_gradient,
                              stopping_check)
from fastdual.testing import random_problem


def test_momentum_sequence():
    t2 = next_t(1.0)
    assert t2 == pytest.approx((1 + math.sqrt(5)) / 2)
    assert momentum_coefficient(1.0, t2) == 0.0
    t3 = next_t(t2)
    assert momentum_coefficient(t2, t3) == pytest.approx((t2 - 1) / t3)


def test_stopping_check():
    opts = SolveOptions(max_iter=10, tol=1e-3)
    assert stopping_check(1, 1e-4, 1e-4, 0.0, opts) == "converged"
    assert stopping_check(1, 1e-2, 1e-4, 0.0, opts) == "continue"
    assert stopping_check(10, 1e-2, 1e-4, 0.0, opts) == "max_iter"
    strict = SolveOptions(max_iter=10, tol=1e-3, tol_dual_progress=1e-6)
    assert stopping_check(1, 1e-4, 1e-4, 1e-3, strict) == "continue"


def test_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(tol=0.0)
    with pytest.raises(ValueError):
        SolveOptions(max_iter=-1)


@pytest.mark.parametrize("accelerate", [True, False])
def test_fast_gradient_lasso_against_oracle(accelerate):
    import cvxpy as cp
    rng = np.random.default_rng(1)
    A = rng.standard_normal((15, 8))
    b = rng.standard_normal(15)
    w = 0.7 * np.ones(8)
    L = ScalarMetric(np.linalg.eigvalsh(A.T @ A)[-1], 8)
    rep = fast_gradient(lambda x: A.T @ (A @ x - b), SeparableFunction.one_norm(w), L,
                        np.zeros(8), SolveOptions(max_iter=50_000, tol=1e-13, accelerate=accelerate))
    assert rep.converged
    x = cp.Variable(8)
    cp.Problem(cp.Minimize(0.5 * cp.sum_squares(A @ x - b) + w @ cp.abs(x))).solve(
        solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    assert np.max(np.abs(rep.x - x.value)) < 1e-6


def test_fast_gradient_diagonal_metric_box():
    rng = np.random.default_rng(2)
    Q = np.diag(rng.uniform(1, 10, 6))
    q = rng.standard_normal(6) * 5
    rep = fast_gradient(lambda x: Q @ x + q, SeparableFunction.box(-np.ones(6), np.ones(6)),
                        DiagonalMetric(np.diag(Q)), np.zeros(6), SolveOptions(max_iter=100, tol=1e-14))
    # a diagonal quadratic with its own Hessian as metric is solved in one step
    assert np.allclose(rep.x, np.clip(-q / np.diag(Q), -1, 1), atol=1e-14)
    assert rep.iterations <= 3


@pytest.mark.parametrize("kind", ["plain", "box", "one_norm", "dense"])
def test_fast_dual_gradient_matches_oracle(kind, oracle):
    seed = {"plain": 0, "box": 1, "one_norm": 2, "dense": 3}[kind]
    prob = random_problem(seed, M=4, p_range=(0, 0) if kind in ("plain", "dense") else (1, 2),
                          coupling="one_norm" if kind == "one_norm" else "box",
                          dense_hessian=kind == "dense")
    L = distributed_init(prob, "sdp")
    rep = fast_dual_gradient(prob, L, opts=SolveOptions(max_iter=200_000, tol=1e-11))
    assert rep.converged
    assert np.max(np.abs(rep.x - oracle(prob))) < 1e-6


def test_parallel_matches_centralized_with_exact_metric():
    prob = random_problem(4, M=5)
    L = exact_metric(prob)
    opts = SolveOptions(max_iter=300, tol=1e-300, record_iterates=True)
    a = parallel_fast_dual_gradient(prob, L, opts=opts)
    b = fast_dual_gradient(prob, L, opts=opts)
    for u, v in zip(a.iterates, b.iterates):
        assert np.allclose(u["nu"], v["nu"], rtol=1e-10, atol=1e-10)
    assert a.counters == {"global_rounds": 600, "local_rounds": 0}


def test_parallel_independent_of_order_and_executor():
    prob = random_problem(5, M=6, dense_hessian=True)
    L = exact_metric(prob)
    opts = SolveOptions(max_iter=50, tol=1e-300)
    ref = parallel_fast_dual_gradient(prob, L, opts=opts)
    with ThreadPoolExecutor(3) as ex:
        other = parallel_fast_dual_gradient(prob, L, opts=opts, block_order=[5, 3, 1, 0, 2, 4],
                                            executor=ex)
    assert np.array_equal(ref.nu, other.nu)
    assert np.array_equal(ref.x, other.x)


def test_parallel_rejects_coupled_problems():
    with pytest.raises(ValueError):
        parallel_fast_dual_gradient(random_problem(1, M=3, p_range=(1, 1)),
                                    ScalarMetric(1.0, 1))


def test_split_metrics_equal_combined():
    prob = random_problem(6, M=4, p_range=(1, 1))
    alpha = scalar_metric(prob, "two_norm").alpha
    opts = SolveOptions(max_iter=100, tol=1e-300)
    a = fast_dual_gradient(prob, ScalarMetric(alpha, prob.partition.m), opts=opts,
                           L_mu=ScalarMetric(alpha, prob.partition.p))
    b = fast_dual_gradient(prob, ScalarMetric(alpha, prob.dual_dim), opts=opts)
    assert np.allclose(a.nu, b.nu, rtol=1e-12, atol=1e-12)
    d = combine_metrics(prob, ScalarMetric(2.0, 1), ScalarMetric(3.0, 1)).d
    assert np.all(d[prob.lam_index] == 2.0) and np.all(d[prob.mu_index] == 3.0)


def test_max_iter_zero_and_status():
    prob = random_problem(7, M=3)
    L = scalar_metric(prob)
    rep = fast_dual_gradient(prob, L, opts=SolveOptions(max_iter=0))
    assert rep.iterations == 0 and rep.status == "max_iter"
    rep = fast_dual_gradient(prob, L, opts=SolveOptions(max_iter=3, tol=1e-300))
    assert rep.iterations == 3 and not rep.converged


def test_unaccelerated_has_zero_momentum():
    prob = random_problem(8, M=3)
    L = scalar_metric(prob)
    rep = fast_dual_gradient(prob, L, opts=SolveOptions(max_iter=5, tol=1e-300, accelerate=False,
                                                        record_iterates=True))
    for it, nxt in zip(rep.iterates, rep.iterates[1:]):
        assert np.array_equal(nxt["z"], it["nu"])


@settings(max_examples=8)
@given(st.integers(0, 2**32 - 1))
def test_rate_envelope_small(seed):
    prob = random_problem(seed, M=3, p_range=(0, 1))
    L = distributed_init(prob, "closed_form")
    ref = fast_dual_gradient(prob, L, opts=SolveOptions(max_iter=20_000, tol=1e-12))
    D_star = dual_objective(prob, ref.nu)
    rep = fast_dual_gradient(prob, L, opts=SolveOptions(max_iter=200, tol=1e-300,
                                                        record_iterates=True))
    r0 = ref.nu @ L.apply(ref.nu)
    for k, it in enumerate(rep.iterates, start=1):
        gap = D_star - dual_objective(prob, it["nu"])
        assert gap <= 2 * r0 / (k + 1) ** 2 + 1e-9 * (1 + abs(D_star))


def test_trajectory_recording():
    prob = random_problem(9, M=3, p_range=(1, 1))
    rep = fast_dual_gradient(prob, scalar_metric(prob), opts=SolveOptions(
        max_iter=7, tol=1e-300, record_trajectory=True, record_dual_objective=True))
    assert len(rep.residuals) == 7 and len(rep.dual_objective) == 7
    assert rep.residuals[-1] == (rep.primal_residual, rep.coupling_residual)
