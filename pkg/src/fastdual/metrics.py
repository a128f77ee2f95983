"""Dual metrics ``L`` with ``L >= C H^-1 C'`` and ways to construct them.

All metrics act on the interleaved dual vector (see :mod:`fastdual.blocks`).
Kinds: ``scalar`` (``alpha I``), ``diagonal``, ``block_diagonal`` (one dense
block per subsystem) and ``sparse_factored`` (a permuted sparse Cholesky
factor of a general ``L``).
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import kernels
from .blocks import local_rows

logger = logging.getLogger(__name__)


class InfeasibleMetric(ValueError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class PowerIterationError(RuntimeError):
    pass


# -- metric kinds ------------------------------------------------------------------

class Metric:
    kind = None
    dim = 0

    def apply(self, v):
        raise NotImplementedError

    def solve(self, v):
        raise NotImplementedError

    def dense(self):
        raise NotImplementedError

    def node_blocks(self, problem):
        """Dense ``q_i x q_i`` diagonal blocks, one per subsystem."""
        raise NotImplementedError(f"{self.kind} metric is not block diagonal")

    def trace(self):
        return float(np.trace(self.dense()))

    def quad(self, v):
        return float(v @ self.apply(v))


class ScalarMetric(Metric):
    kind = "scalar"

    def __init__(self, alpha, dim):
        if not alpha > 0:
            raise InfeasibleMetric("scalar metric must be positive")
        self.alpha = float(alpha)
        self.dim = int(dim)

    def apply(self, v):
        return self.alpha * v

    def solve(self, v):
        return v / self.alpha

    def dense(self):
        return self.alpha * np.eye(self.dim)

    def node_blocks(self, problem):
        return [self.alpha * np.eye(q) for q in problem.partition.q_sizes]

    def trace(self):
        return self.alpha * self.dim


class DiagonalMetric(Metric):
    kind = "diagonal"

    def __init__(self, d):
        self.d = np.asarray(d, dtype=float).ravel()
        if np.any(~(self.d > 0)):
            raise InfeasibleMetric("diagonal metric must be positive")
        self.dim = self.d.shape[0]

    def apply(self, v):
        return self.d * v

    def solve(self, v):
        return v / self.d

    def dense(self):
        return np.diag(self.d)

    def node_blocks(self, problem):
        o = problem.partition.q_offsets
        return [np.diag(self.d[o[i]:o[i + 1]]) for i in range(problem.M)]

    def trace(self):
        return float(self.d.sum())


class BlockDiagonalMetric(Metric):
    kind = "block_diagonal"

    def __init__(self, blocks):
        self.blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
        self.sizes = tuple(b.shape[0] for b in self.blocks)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)
        self.dim = int(self.offsets[-1])
        self._factors = []
        for k, b in enumerate(self.blocks):
            if b.shape[0] == 0:
                self._factors.append(b)
                continue
            try:
                self._factors.append(np.linalg.cholesky(b))
            except np.linalg.LinAlgError as exc:
                raise InfeasibleMetric(f"block {k} is not positive definite", node=k) from exc

    def factors(self):
        return list(self._factors)

    def apply(self, v):
        out = np.empty_like(v, dtype=float)
        for k, b in enumerate(self.blocks):
            s = slice(self.offsets[k], self.offsets[k + 1])
            out[s] = b @ v[s]
        return out

    def solve(self, v):
        out = np.empty_like(v, dtype=float)
        for k, F in enumerate(self._factors):
            s = slice(self.offsets[k], self.offsets[k + 1])
            if F.shape[0]:
                out[s] = linalg.cho_solve((F, True), v[s])
        return out

    def dense(self):
        return linalg.block_diag(*self.blocks) if self.blocks else np.zeros((0, 0))

    def node_blocks(self, problem):
        if self.sizes != problem.partition.q_sizes:
            raise ValueError("block sizes do not match the subsystem dual sizes")
        return [b.copy() for b in self.blocks]

    def trace(self):
        return float(sum(np.trace(b) for b in self.blocks))


class SparseFactoredMetric(Metric):
    """``L = P' F F' P`` stored as a sparse lower factor of the permuted matrix."""

    kind = "sparse_factored"

    def __init__(self, L, perm=None):
        L = sparse.csr_matrix(L, dtype=float)
        n = L.shape[0]
        self.dim = n
        self.L = L
        self.perm = np.arange(n, dtype=np.int64) if perm is None else np.asarray(perm, dtype=np.int64)
        Lperm = L[self.perm][:, self.perm]
        upper = sparse.triu(Lperm, format="csc")
        upper.sort_indices()
        try:
            self.Lp, self.Li, self.Lx = kernels.backend().cholesky_csc(
                n, upper.indptr.astype(np.int64), upper.indices.astype(np.int64),
                np.ascontiguousarray(upper.data, dtype=float))
        except np.linalg.LinAlgError as exc:
            raise InfeasibleMetric(f"metric is not positive definite ({exc})") from exc

    @classmethod
    def from_factor(cls, L, perm, Lp, Li, Lx):
        """Rebuild from stored factor arrays without refactoring."""
        self = cls.__new__(cls)
        self.L = sparse.csr_matrix(L, dtype=float)
        self.dim = self.L.shape[0]
        self.perm = np.asarray(perm, dtype=np.int64)
        self.Lp = np.ascontiguousarray(Lp, dtype=np.int64)
        self.Li = np.ascontiguousarray(Li, dtype=np.int64)
        self.Lx = np.ascontiguousarray(Lx, dtype=float)
        return self

    @property
    def factor_nnz(self):
        return int(self.Lp[-1])

    def pattern_hash(self):
        h = hashlib.sha256()
        h.update(np.asarray(self.L.indptr, dtype=np.int64).tobytes())
        h.update(np.asarray(self.L.indices, dtype=np.int64).tobytes())
        return h.hexdigest()

    def apply(self, v):
        return self.L @ v

    def solve(self, v):
        w = np.ascontiguousarray(np.asarray(v, dtype=float)[self.perm])
        x = kernels.backend().chol_solve_csc(self.Lp, self.Li, self.Lx, w)
        out = np.empty_like(x)
        out[self.perm] = x
        return out

    def dense(self):
        return self.L.toarray()

    def trace(self):
        return float(self.L.diagonal().sum())


# -- Gram matrices -----------------------------------------------------------------

def _hinv_blocks(problem):
    out = []
    for cost in problem.costs:
        if cost.is_diagonal:
            out.append(sparse.diags(1.0 / cost.H))
        else:
            out.append(sparse.csr_matrix(np.linalg.inv(cost.H)))
    return sparse.block_diag(out, format="csr")


def gram_sparse(problem):
    """``C H^-1 C'`` as a sparse matrix (pattern follows the neighbor graph)."""
    C = problem.C_csr
    G = (C @ _hinv_blocks(problem) @ C.T).tocsr()
    G = 0.5 * (G + G.T)
    G.sort_indices()
    return G


def exact_metric(problem):
    """``L = A H^-1 A'``, reordered by reverse Cuthill-McKee and factored once."""
    if problem.has_coupling:
        raise ValueError("the exact metric needs a problem without coupled g terms")
    G = gram_sparse(problem)
    perm = reverse_cuthill_mckee(G, symmetric_mode=True).astype(np.int64)
    return SparseFactoredMetric(G, perm)


def neighborhood_block_sizes(problem, i):
    """Block partition of ``nu_{M_i}`` used by the local choosers.

    Each neighbor contributes its equality block whole and one 1x1 block per
    coupled multiplier, which keeps the ``mu`` part of the metric diagonal.
    """
    P = problem.partition
    sizes = []
    for j in problem.neighbor_sets.M[i]:
        if P.m_sizes[j]:
            sizes.append(P.m_sizes[j])
        sizes.extend([1] * P.p_sizes[j])
    return sizes


def local_gram(problem, i):
    """``G_i = C_{M_i} H_i^-1 C_{M_i}'`` over the rows of ``nu_{M_i}``."""
    rows = local_rows(problem, i)
    o = problem.partition.n_offsets
    Ci = problem.C_csr[rows][:, o[i]:o[i + 1]].toarray()
    cost = problem.costs[i]
    if cost.is_diagonal:
        G = (Ci / cost.H) @ Ci.T
    else:
        G = Ci @ linalg.cho_solve(linalg.cho_factor(cost.H), Ci.T)
    return 0.5 * (G + G.T)


def default_eps(G):
    dim = G.shape[0]
    tr = float(np.trace(G)) if dim else 0.0
    return 1e-8 * tr / dim if tr > 0 else 1e-8


def _block_slices(block_sizes):
    o = np.concatenate([[0], np.cumsum(block_sizes)]).astype(int)
    return [slice(o[k], o[k + 1]) for k in range(len(block_sizes))]


def block_feasible_closed_form(G, block_sizes, eps=None):
    """``L_b = q G_bb + eps I`` with ``q`` the number of nonzero diagonal blocks.

    Zero diagonal blocks of a PSD matrix have zero rows, so only the ``q``
    nonzero blocks enter the Cauchy-Schwarz splitting.
    """
    G = np.asarray(G, dtype=float)
    eps = default_eps(G) if eps is None else float(eps)
    slices = _block_slices(block_sizes)
    q = max(1, sum(1 for s in slices if np.any(G[s, s] != 0)))
    return [q * G[s, s] + eps * np.eye(s.stop - s.start) for s in slices]


@dataclass
class LocalMetricResult:
    blocks: list
    trace: float
    fallback: bool = False
    message: str = ""
    newton_steps: int = 0


def _assemble(blocks):
    return linalg.block_diag(*blocks)


def local_metric_sdp(G, block_sizes, eps=None, max_iter=400, tol=1e-6,
                     cg_max_iter=200, t_factor=20.0, center_tol=1e-6):
    """Minimize ``tr L`` over block-diagonal ``L >= G + eps I``.

    Log-det barrier path following: for increasing ``t`` minimize
    ``t tr L - log det(L - G - eps I)`` by Newton steps whose block-diagonal
    system is solved matrix-free with block-Jacobi preconditioned CG. The
    stopping gap is relative to ``tr G``. On any
    numerical failure the closed-form point is returned with ``fallback``
    set. ``max_iter`` caps the total number of Newton steps.
    """
    G = np.asarray(G, dtype=float)
    G = 0.5 * (G + G.T)
    eps = default_eps(G) if eps is None else float(eps)
    closed = block_feasible_closed_form(G, block_sizes, eps)
    closed_trace = float(sum(np.trace(b) for b in closed))
    dim = G.shape[0]
    if dim == 0:
        return LocalMetricResult(closed, 0.0)
    if len(block_sizes) == 1:
        return LocalMetricResult(closed, closed_trace)
    try:
        blocks, steps = _barrier_path(G, block_sizes, eps, max_iter, tol,
                                      cg_max_iter, t_factor, center_tol)
    except (np.linalg.LinAlgError, FloatingPointError, _BarrierFailure) as exc:
        logger.warning("local SDP fell back to the closed-form metric: %s", exc)
        return LocalMetricResult(closed, closed_trace, fallback=True, message=str(exc))
    trace = float(sum(np.trace(b) for b in blocks))
    if trace > closed_trace:
        return LocalMetricResult(closed, closed_trace, newton_steps=steps,
                                 message="closed form had the smaller trace")
    return LocalMetricResult(blocks, trace, newton_steps=steps)


class _BarrierFailure(RuntimeError):
    pass


def _barrier_path(G, block_sizes, eps, max_iter, tol, cg_max_iter, t_factor, center_tol):
    slices = _block_slices(block_sizes)
    dim = G.shape[0]
    shift = G + eps * np.eye(dim)
    # A scaled identity well above G keeps the early Newton systems well
    # conditioned; warm starts carry that along the path.
    top = float(np.linalg.eigvalsh(shift)[-1])
    blocks = [2.0 * max(top, eps) * np.eye(s.stop - s.start) for s in slices]
    cS = np.linalg.cholesky(_assemble(blocks) - shift)
    t = float(np.trace(linalg.cho_solve((cS, True), np.eye(dim)))) / dim
    trG = float(np.trace(G))
    gap_target = tol * (trG if trG > 0 else 1.0)
    steps = 0
    stage = 0
    while True:
        try:
            blocks, cS, steps = _center(blocks, cS, t, shift, slices, steps,
                                        max_iter, cg_max_iter, center_tol)
        except _BarrierFailure:
            # every accepted point is strictly feasible; late stalls are rounding
            if stage == 0:
                raise
            break
        stage += 1
        if dim / t < gap_target:
            break
        if steps >= max_iter:
            raise _BarrierFailure(f"no convergence within {max_iter} Newton steps")
        t *= t_factor
    return blocks, steps


def _bdot(X, Y):
    return float(sum(np.vdot(x, y) for x, y in zip(X, Y)))


def _center(blocks, cS, t, shift, slices, steps, max_iter, cg_max_iter, center_tol):
    """Newton steps on ``t tr L - log det(L - shift)`` at fixed ``t``.

    Block-diagonal iterates are kept as lists of blocks. The Newton operator
    ``D -> blkdiag(W D W)`` only needs the block rows of ``W``.
    """
    dim = shift.shape[0]
    eye = np.eye(dim)
    for _ in range(50):
        W = linalg.cho_solve((cS, True), eye)
        W = 0.5 * (W + W.T)
        cols = [W[:, s] for s in slices]
        grad = [t * np.eye(s.stop - s.start) - W[s, s] for s in slices]
        pre = [np.linalg.inv(W[s, s]) for s in slices]

        def hess(D):
            X = np.hstack([c @ d for c, d in zip(cols, D)])
            return [X[s, :] @ c for s, c in zip(slices, cols)]

        def precond(R):
            return [p @ r @ p for p, r in zip(pre, R)]

        step = _pcg(hess, precond, [-g for g in grad], cg_max_iter)
        step = [0.5 * (d + d.T) for d in step]
        dec = -_bdot(grad, step)
        if not dec > 0:
            break
        steps += 1
        phi0 = t * sum(np.trace(b) for b in blocks) - 2.0 * np.sum(np.log(np.diag(cS)))
        alpha = 1.0
        while True:
            trial = [b + alpha * d for b, d in zip(blocks, step)]
            try:
                c_trial = np.linalg.cholesky(_assemble(trial) - shift)
                phi = t * sum(np.trace(b) for b in trial) - 2.0 * np.sum(np.log(np.diag(c_trial)))
            except np.linalg.LinAlgError:
                phi = np.inf
            if phi <= phi0 - 0.25 * alpha * dec:
                break
            alpha *= 0.5
            if alpha < 1e-14:
                raise _BarrierFailure("line search stalled")
        blocks, cS = trial, c_trial
        if dec / 2.0 <= center_tol or steps >= max_iter:
            break
    return blocks, cS, steps


def _pcg(hess, precond, rhs, max_iter, rtol=1e-4):
    """Preconditioned CG on lists of blocks."""
    x = [np.zeros_like(r) for r in rhs]
    r = [v.copy() for v in rhs]
    z = precond(r)
    p = [v.copy() for v in z]
    rz = _bdot(r, z)
    r0 = np.sqrt(_bdot(r, r))
    for _ in range(max_iter):
        Hp = hess(p)
        pHp = _bdot(p, Hp)
        if not pHp > 0:
            break
        a = rz / pHp
        x = [xi + a * pi for xi, pi in zip(x, p)]
        r = [ri - a * hi for ri, hi in zip(r, Hp)]
        if np.sqrt(_bdot(r, r)) <= rtol * r0:
            break
        z = precond(r)
        rz_new = _bdot(r, z)
        beta = rz_new / rz
        p = [zi + beta * pi for zi, pi in zip(z, p)]
        rz = rz_new
    return x


# -- distributed initialization ------------------------------------------------------

def _node_level(problem, i, refined):
    """Merge the refined chooser blocks of node ``i`` into one block per neighbor."""
    P = problem.partition
    out = {}
    k = 0
    for j in problem.neighbor_sets.M[i]:
        parts = []
        if P.m_sizes[j]:
            parts.append(refined[k])
            k += 1
        for _ in range(P.p_sizes[j]):
            parts.append(refined[k])
            k += 1
        out[j] = _assemble(parts) if parts else np.zeros((0, 0))
    return out


def closed_form_chooser(problem, i, eps=None):
    G = local_gram(problem, i)
    return _node_level(problem, i, block_feasible_closed_form(G, neighborhood_block_sizes(problem, i), eps))


def sdp_chooser(problem, i, eps=None, **kw):
    G = local_gram(problem, i)
    res = local_metric_sdp(G, neighborhood_block_sizes(problem, i), eps=eps, **kw)
    if res.fallback:
        warnings.warn(f"node {i}: local SDP fell back to closed form ({res.message})")
    return _node_level(problem, i, res.blocks)


CHOOSERS = {"closed_form": closed_form_chooser, "sdp": sdp_chooser}


def check_local_choice(problem, i, choice, tol=1e-9):
    """Raise :class:`InfeasibleMetric` unless ``blkdiag(choice) >= G_i``."""
    G = local_gram(problem, i)
    Lm = _assemble([choice[j] for j in problem.neighbor_sets.M[i]])
    scale = max(1.0, float(np.abs(G).max()) if G.size else 1.0)
    emin = float(np.linalg.eigvalsh(Lm - G).min()) if G.size else 0.0
    if emin < -tol * scale:
        raise InfeasibleMetric(f"node {i}: local metric violates L >= G_i (min eig {emin:.3e})", node=i)
    return emin


def sum_node_blocks(problem, contributions, j):
    """``L_j = sum over i in N_j of L_{M_i,j}``, summed in ascending ``i``."""
    q = problem.partition.q_sizes[j]
    acc = np.zeros((q, q))
    for i in problem.neighbor_sets.N[j]:
        acc = acc + contributions[i][j]
    return acc


def distributed_init(problem, chooser="sdp", check=True):
    """Every node picks ``L_{M_i}``; node ``j`` then sums the blocks it receives."""
    rule = CHOOSERS[chooser] if isinstance(chooser, str) else chooser
    contributions = {}
    for i in range(problem.M):
        choice = rule(problem, i)
        if check:
            check_local_choice(problem, i, choice)
        contributions[i] = choice
    blocks = [sum_node_blocks(problem, contributions, j) for j in range(problem.M)]
    return BlockDiagonalMetric(blocks)


# -- scalar metrics -------------------------------------------------------------------

def power_iteration(matvec, dim, tol=1e-10, max_iter=100_000, seed=0):
    """Dominant eigenvalue of a symmetric PSD operator.

    Stops when the eigen-residual ``||Gv - rho v||`` drops below
    ``tol * rho``; the Rayleigh quotient is then accurate to second order.
    """
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.5, 1.5, size=dim)
    v /= np.linalg.norm(v)
    rho = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        rho = float(v @ w)
        if rho <= 0:
            if np.linalg.norm(w) == 0:
                return 0.0
            raise PowerIterationError("operator is not positive semidefinite")
        if np.linalg.norm(w - rho * v) <= tol * rho:
            return rho
        v = w / np.linalg.norm(w)
    raise PowerIterationError(f"power iteration did not converge in {max_iter} steps")


def scalar_metric(problem, norm="two_norm", tol=1e-10, max_iter=100_000):
    G = gram_sparse(problem)
    if norm == "two_norm":
        alpha = power_iteration(lambda v: G @ v, G.shape[0], tol=tol, max_iter=max_iter)
    elif norm == "one_norm":
        alpha = float(np.abs(G).sum(axis=0).max())
    else:
        raise ValueError(f"unknown norm {norm!r}")
    if alpha <= 0:
        alpha = 1.0
    return ScalarMetric(alpha, problem.dual_dim)


# -- verification ---------------------------------------------------------------------

@dataclass
class FeasibilityReport:
    feasible: bool
    min_eig: float


def verify_feasible(L, problem, tol=1e-8):
    """Smallest eigenvalue of ``L - C H^-1 C'`` (dense, desk scale)."""
    D = L.dense() - problem.gram_dense()
    emin = float(np.linalg.eigvalsh(0.5 * (D + D.T)).min()) if D.size else 0.0
    return FeasibilityReport(feasible=emin >= -tol, min_eig=emin)


def mu_diagonal(problem, L):
    """Diagonal of the ``mu`` part; errors if it is coupled to anything else."""
    if not problem.has_coupling:
        return np.zeros(0)
    if L.kind == "scalar":
        return np.full(problem.partition.p, L.alpha)
    if L.kind == "diagonal":
        return L.d[problem.mu_index]
    if L.kind != "block_diagonal":
        raise ValueError("coupled problems need a scalar, diagonal or block-diagonal metric")
    P = problem.partition
    out = []
    for i, blk in enumerate(L.node_blocks(problem)):
        m = P.m_sizes[i]
        mu_part = blk[m:, :]
        diag = np.diag(blk)[m:]
        off = mu_part.copy()
        off[np.arange(mu_part.shape[0]), m + np.arange(mu_part.shape[0])] = 0.0
        if np.any(off != 0):
            raise ValueError(f"metric block {i} couples mu to other dual entries")
        out.append(diag)
    return np.concatenate(out)
