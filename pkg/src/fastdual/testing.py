"""Random problem instances for tests, examples and benchmarks.

Instances are feasible by construction: a point strictly inside the local
boxes is drawn first and ``b`` is set to ``A`` times that point.
"""

from __future__ import annotations

import numpy as np

from .blocks import Box, BlockPartition, LocalCost, OneNorm, ProblemInstance, SparseBlockMatrix


def _spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.exp(rng.uniform(0.0, np.log(cond), n))
    H = (Q * ev) @ Q.T
    return 0.5 * (H + H.T)


def random_problem(rng, M=4, n_range=(2, 4), m_range=(1, 2), p_range=(0, 0),
                   density=0.4, dense_hessian=False, box=True, coupling="box",
                   interior=False):
    """A random block-sparse instance.

    ``coupling`` picks the coupled term when some ``p_i > 0``: ``"box"`` or
    ``"one_norm"``. With ``interior=True`` the boxes are wide enough that the
    unconstrained inner minimizers at small duals stay strictly inside.
    """
    rng = np.random.default_rng(rng)
    n_sizes = [int(rng.integers(n_range[0], n_range[1] + 1)) for _ in range(M)]
    m_sizes = [int(rng.integers(m_range[0], min(m_range[1], n) + 1)) for n in n_sizes]
    p_sizes = [int(rng.integers(p_range[0], p_range[1] + 1)) for _ in range(M)]
    part = BlockPartition(n_sizes, m_sizes, p_sizes)
    x_feas = [rng.uniform(-0.5, 0.5, n) for n in n_sizes]

    A_blocks = {}
    for i in range(M):
        # a dominant diagonal block keeps A of full row rank
        A_blocks[(i, i)] = rng.standard_normal((m_sizes[i], n_sizes[i])) + \
            3.0 * np.eye(m_sizes[i], n_sizes[i])
        for j in range(M):
            if j != i and rng.random() < density:
                A_blocks[(i, j)] = 0.3 * rng.standard_normal((m_sizes[i], n_sizes[j]))
    A = SparseBlockMatrix(part.m_sizes, part.n_sizes, A_blocks)
    b = A.matvec(np.concatenate(x_feas))

    B = None
    Bx = None
    if part.p > 0:
        B_blocks = {}
        for i in range(M):
            if not p_sizes[i]:
                continue
            B_blocks[(i, i)] = rng.standard_normal((p_sizes[i], n_sizes[i]))
            for j in range(M):
                if j != i and rng.random() < density:
                    B_blocks[(i, j)] = 0.5 * rng.standard_normal((p_sizes[i], n_sizes[j]))
        B = SparseBlockMatrix(part.p_sizes, part.n_sizes, B_blocks)
        Bx = B.matvec(np.concatenate(x_feas))

    costs = []
    width = 50.0 if interior else 1.0
    for i in range(M):
        n = n_sizes[i]
        H = _spd(rng, n) if dense_hessian else rng.uniform(0.5, 5.0, n)
        zeta = rng.standard_normal(n)
        h = Box(-width * np.ones(n), width * np.ones(n)) if box else None
        g = None
        if p_sizes[i]:
            rows = slice(part.p_offsets[i], part.p_offsets[i + 1])
            if coupling == "box":
                g = Box(Bx[rows] - rng.uniform(0.1, 1.0, p_sizes[i]),
                        Bx[rows] + rng.uniform(0.1, 1.0, p_sizes[i]))
            elif coupling == "one_norm":
                g = OneNorm(rng.uniform(0.1, 2.0, p_sizes[i]))
            else:
                raise ValueError(f"unknown coupling {coupling!r}")
        costs.append(LocalCost(H, zeta, h, g))
    return ProblemInstance(part, costs, A, b, B)
