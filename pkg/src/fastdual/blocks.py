"""Block-partitioned problem model.

A problem couples ``M`` subsystems through block-sparse matrices ``A`` (equality
rows, one row block per subsystem) and optionally ``B`` (rows fed to a coupled
convex term ``g``). Subsystem ``i`` owns primal block ``x_i`` of size ``n_i``,
equality multipliers ``lambda_i`` (``m_i``) and coupled multipliers ``mu_i``
(``p_i``). Block indices are 0-based throughout.

The dual vector is stored *interleaved*: ``nu = (lambda_0, mu_0, lambda_1,
mu_1, ...)``, so every subsystem's dual variables are contiguous. The stacked
coupling matrix ``C`` uses the same row order (row block ``i`` is ``A_i``
followed by ``B_i``), and ``c = (b_0, 0, b_1, 0, ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg, sparse


class DimensionError(ValueError):
    pass


class RankError(ValueError):
    """A coupling matrix lost full row rank; ``rows`` lists dependent rows."""

    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = list(rows)


# -- descriptors ---------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Indicator of ``lower <= x <= upper``; infinite sides are allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise DimensionError("box bounds differ in length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ValueError("box needs lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def size(self):
        return self.lower.shape[0]


@dataclass(frozen=True)
class OneNorm:
    """``sum_k weight_k |x_k|`` with nonnegative weights."""

    weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=float).ravel()
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError("one-norm weights must be finite and nonnegative")
        object.__setattr__(self, "weight", w)

    @property
    def size(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class LocalCost:
    """``0.5 y'Hy + zeta'y + h(y)`` plus a coupled term ``g`` on ``B_i``-rows.

    ``H`` may be passed as a vector (diagonal) or a dense symmetric matrix.
    """

    H: np.ndarray
    zeta: np.ndarray
    h: Box | None = None
    g: Box | OneNorm | None = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        zeta = np.asarray(self.zeta, dtype=float).ravel()
        n = zeta.shape[0]
        if H.ndim == 1:
            if H.shape[0] != n:
                raise DimensionError("H diagonal and zeta differ in length")
            if np.any(~(H > 0)):
                raise np.linalg.LinAlgError("H must be positive definite")
        elif H.shape == (n, n):
            if not np.allclose(H, H.T, rtol=0, atol=1e-12 * max(1.0, np.abs(H).max())):
                raise ValueError("H must be symmetric")
            np.linalg.cholesky(H)
        else:
            raise DimensionError(f"H has shape {H.shape}, expected ({n},) or ({n}, {n})")
        if self.h is not None and self.h.size != n:
            raise DimensionError("h box does not match the block size")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "zeta", zeta)

    @property
    def n(self):
        return self.zeta.shape[0]

    @property
    def is_diagonal(self):
        return self.H.ndim == 1

    def hessian(self):
        return np.diag(self.H) if self.is_diagonal else self.H

    def lower(self):
        return self.h.lower if self.h is not None else np.full(self.n, -np.inf)

    def upper(self):
        return self.h.upper if self.h is not None else np.full(self.n, np.inf)


# -- partition and block matrices ---------------------------------------------

def _offsets(sizes):
    out = np.zeros(len(sizes) + 1, dtype=np.int64)
    np.cumsum(sizes, out=out[1:])
    return out


@dataclass(frozen=True)
class BlockPartition:
    n_sizes: tuple
    m_sizes: tuple
    p_sizes: tuple = None

    def __post_init__(self):
        n = tuple(int(v) for v in self.n_sizes)
        m = tuple(int(v) for v in self.m_sizes)
        p = tuple(int(v) for v in self.p_sizes) if self.p_sizes is not None else (0,) * len(n)
        if not (len(n) == len(m) == len(p)) or len(n) == 0:
            raise DimensionError("partition needs one n, m and p size per subsystem")
        if min(n + m + p) < 0:
            raise DimensionError("block sizes must be nonnegative")
        object.__setattr__(self, "n_sizes", n)
        object.__setattr__(self, "m_sizes", m)
        object.__setattr__(self, "p_sizes", p)

    @property
    def M(self):
        return len(self.n_sizes)

    @property
    def n(self):
        return sum(self.n_sizes)

    @property
    def m(self):
        return sum(self.m_sizes)

    @property
    def p(self):
        return sum(self.p_sizes)

    @property
    def q_sizes(self):
        return tuple(a + b for a, b in zip(self.m_sizes, self.p_sizes))

    @cached_property
    def n_offsets(self):
        return _offsets(self.n_sizes)

    @cached_property
    def m_offsets(self):
        return _offsets(self.m_sizes)

    @cached_property
    def p_offsets(self):
        return _offsets(self.p_sizes)

    @cached_property
    def q_offsets(self):
        return _offsets(self.q_sizes)


class SparseBlockMatrix:
    """Block-sparse matrix storing only structurally nonzero dense blocks."""

    def __init__(self, row_sizes, col_sizes, blocks):
        self.row_sizes = tuple(int(v) for v in row_sizes)
        self.col_sizes = tuple(int(v) for v in col_sizes)
        self.row_offsets = _offsets(self.row_sizes)
        self.col_offsets = _offsets(self.col_sizes)
        self.blocks = {}
        for (i, j), blk in sorted(blocks.items()):
            blk = np.atleast_2d(np.asarray(blk, dtype=float))
            if not (0 <= i < len(self.row_sizes) and 0 <= j < len(self.col_sizes)):
                raise DimensionError(f"block ({i}, {j}) outside the partition")
            if blk.shape != (self.row_sizes[i], self.col_sizes[j]):
                raise DimensionError(
                    f"block ({i}, {j}) has shape {blk.shape}, "
                    f"expected {(self.row_sizes[i], self.col_sizes[j])}")
            self.blocks[(int(i), int(j))] = blk

    @property
    def shape(self):
        return int(self.row_offsets[-1]), int(self.col_offsets[-1])

    def pattern(self):
        return sorted(self.blocks)

    def to_dense(self):
        out = np.zeros(self.shape)
        for (i, j), blk in self.blocks.items():
            out[self.row_offsets[i]:self.row_offsets[i + 1],
                self.col_offsets[j]:self.col_offsets[j + 1]] = blk
        return out

    def matvec(self, x):
        out = np.zeros(self.shape[0])
        for (i, j), blk in self.blocks.items():
            out[self.row_offsets[i]:self.row_offsets[i + 1]] += (
                blk @ x[self.col_offsets[j]:self.col_offsets[j + 1]])
        return out

    def block(self, i, j):
        blk = self.blocks.get((i, j))
        if blk is None:
            return np.zeros((self.row_sizes[i], self.col_sizes[j]))
        return blk

    @classmethod
    def from_dense(cls, dense, row_sizes, col_sizes):
        dense = np.asarray(dense, dtype=float)
        ro, co = _offsets(row_sizes), _offsets(col_sizes)
        blocks = {}
        for i in range(len(row_sizes)):
            for j in range(len(col_sizes)):
                blk = dense[ro[i]:ro[i + 1], co[j]:co[j + 1]]
                if blk.size and np.any(blk != 0):
                    blocks[(i, j)] = blk.copy()
        return cls(row_sizes, col_sizes, blocks)


# -- neighbor structure --------------------------------------------------------

@dataclass(frozen=True)
class NeighborSets:
    """``N[i]``: blocks coupled on block-row ``i``; ``M[i]``: on block-column ``i``."""

    N: tuple
    M: tuple

    def __len__(self):
        return len(self.N)


def derive_neighbor_sets(A, B=None):
    """Union of the block patterns of ``A`` and ``B``, in sorted order."""
    if B is not None and (B.col_sizes != A.col_sizes or len(B.row_sizes) != len(A.row_sizes)):
        raise DimensionError("A and B must share their block partition")
    Mcount = len(A.col_sizes)
    if len(A.row_sizes) != Mcount:
        raise DimensionError("A needs one row block per subsystem")
    rows = [set() for _ in range(Mcount)]
    for mat in (A, B):
        if mat is None:
            continue
        for (i, j) in mat.blocks:
            rows[i].add(j)
    cols = [set() for _ in range(Mcount)]
    for i, js in enumerate(rows):
        for j in js:
            cols[j].add(i)
    return NeighborSets(N=tuple(tuple(sorted(s)) for s in rows),
                        M=tuple(tuple(sorted(s)) for s in cols))


def validate_full_row_rank(A, tol=1e-10):
    """Raise :class:`RankError` unless ``sigma_min(A) > tol * sigma_max(A)``.

    Dependent rows are found greedily: a row is dependent if it lies in the
    span of the rows before it (up to the same relative tolerance).
    """
    dense = A.to_dense() if isinstance(A, SparseBlockMatrix) else np.asarray(A, dtype=float)
    m = dense.shape[0]
    if m == 0:
        return True
    s = linalg.svdvals(dense) if dense.size else np.zeros(1)
    smax = s[0]
    if s.shape[0] == m and smax > 0 and s[-1] > tol * smax:
        return True
    basis = np.zeros((0, dense.shape[1]))
    dependent = []
    scale = max(smax, 1.0)
    for r in range(m):
        row = dense[r]
        resid = row - basis.T @ (basis @ row) if basis.shape[0] else row.copy()
        resid = resid - basis.T @ (basis @ resid) if basis.shape[0] else resid
        nr = np.linalg.norm(resid)
        if nr <= tol * scale:
            dependent.append(r)
        else:
            basis = np.vstack([basis, resid / nr])
    raise RankError(f"coupling matrix is rank deficient; dependent rows {dependent}", dependent)


# -- the problem ---------------------------------------------------------------

class ProblemInstance:
    """``min sum_i f_i(x_i) + h_i(x_i) + g(Bx)  s.t.  Ax = b``."""

    def __init__(self, partition, costs, A, b, B=None, check_rank=False):
        self.partition = partition
        self.costs = tuple(costs)
        self.A = A
        self.B = B
        self.b = np.asarray(b, dtype=float).ravel()
        P = partition
        if len(self.costs) != P.M:
            raise DimensionError("one LocalCost per subsystem required")
        for i, cost in enumerate(self.costs):
            if cost.n != P.n_sizes[i]:
                raise DimensionError(f"cost {i} has size {cost.n}, expected {P.n_sizes[i]}")
            has_g = cost.g is not None
            if has_g and cost.g.size != P.p_sizes[i]:
                raise DimensionError(f"g of block {i} must have size p_{i}={P.p_sizes[i]}")
            if not has_g and P.p_sizes[i] > 0:
                raise DimensionError(f"block {i} has p_{i}>0 rows but no g term")
        if A.row_sizes != P.m_sizes or A.col_sizes != P.n_sizes:
            raise DimensionError("A does not match the partition")
        if self.b.shape[0] != P.m:
            raise DimensionError("b does not match the number of equality rows")
        if P.p > 0:
            if B is None:
                raise DimensionError("g terms present but B is absent")
            if B.row_sizes != P.p_sizes or B.col_sizes != P.n_sizes:
                raise DimensionError("B does not match the partition")
        elif B is not None:
            raise DimensionError("B given but no block carries a g term")
        self.neighbor_sets = derive_neighbor_sets(A, B)
        if check_rank:
            validate_full_row_rank(A)

    # sizes
    @property
    def M(self):
        return self.partition.M

    @property
    def has_coupling(self):
        return self.B is not None

    @property
    def dual_dim(self):
        return self.partition.m + self.partition.p

    @property
    def all_diagonal(self):
        return all(c.is_diagonal for c in self.costs)

    # dual layout
    @cached_property
    def lam_index(self):
        P = self.partition
        return np.concatenate([np.arange(P.q_offsets[i], P.q_offsets[i] + P.m_sizes[i])
                               for i in range(P.M)]).astype(np.int64)

    @cached_property
    def mu_index(self):
        P = self.partition
        return np.concatenate([np.arange(P.q_offsets[i] + P.m_sizes[i], P.q_offsets[i + 1])
                               for i in range(P.M)]).astype(np.int64)

    def split_dual(self, nu):
        return nu[self.lam_index], nu[self.mu_index]

    def join_dual(self, lam, mu=None):
        nu = np.zeros(self.dual_dim)
        nu[self.lam_index] = lam
        if mu is not None:
            nu[self.mu_index] = mu
        return nu

    def dual_block(self, nu, i):
        o = self.partition.q_offsets
        return nu[o[i]:o[i + 1]]

    @cached_property
    def c(self):
        return self.join_dual(self.b)

    # coupling operator in interleaved row order
    def C_block(self, i, j):
        P = self.partition
        top = self.A.block(i, j)
        if P.p_sizes[i] == 0:
            return top
        return np.vstack([top, self.B.block(i, j)])

    def C_pattern(self):
        return sorted(set(self.A.blocks) | (set(self.B.blocks) if self.B is not None else set()))

    @cached_property
    def C_csr(self):
        """``C`` as CSR with sorted column indices and no stored zeros."""
        P = self.partition
        rows, cols, vals = [], [], []
        for (i, j) in self.C_pattern():
            blk = self.C_block(i, j)
            r, cc = np.nonzero(blk)
            rows.append(r + P.q_offsets[i])
            cols.append(cc + P.n_offsets[j])
            vals.append(blk[r, cc])
        if rows:
            rows, cols, vals = map(np.concatenate, (rows, cols, vals))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
        C = sparse.csr_matrix((vals, (rows, cols)), shape=(self.dual_dim, P.n))
        C.sort_indices()
        return _int64_csr(C)

    def C_dense(self):
        return self.C_csr.toarray()

    def H_dense(self):
        return linalg.block_diag(*[c.hessian() for c in self.costs])

    def Hinv_dense(self):
        return linalg.block_diag(*[np.linalg.inv(c.hessian()) for c in self.costs])

    def gram_dense(self):
        """Dense ``C H^-1 C'`` (desk-scale oracle and validation only)."""
        C = self.C_dense()
        return C @ self.Hinv_dense() @ C.T

    @cached_property
    def hdiag(self):
        if not self.all_diagonal:
            raise ValueError("problem has dense Hessian blocks")
        return np.concatenate([c.H for c in self.costs]) if self.M else np.zeros(0)

    @cached_property
    def zeta(self):
        return np.concatenate([c.zeta for c in self.costs])

    @cached_property
    def x_lower(self):
        return np.concatenate([c.lower() for c in self.costs])

    @cached_property
    def x_upper(self):
        return np.concatenate([c.upper() for c in self.costs])

    def primal_block(self, x, i):
        o = self.partition.n_offsets
        return x[o[i]:o[i + 1]]

    def objective(self, x):
        """``f(x) + g(Bx)``; ``inf`` when ``x`` violates a box."""
        total = 0.0
        for i, cost in enumerate(self.costs):
            xi = self.primal_block(x, i)
            Hx = cost.H * xi if cost.is_diagonal else cost.H @ xi
            total += 0.5 * xi @ Hx + cost.zeta @ xi
        if self.B is not None:
            Bx = self.B.matvec(x)
            po = self.partition.p_offsets
            for i, cost in enumerate(self.costs):
                seg = Bx[po[i]:po[i + 1]]
                if isinstance(cost.g, OneNorm):
                    total += cost.g.weight @ np.abs(seg)
                elif isinstance(cost.g, Box):
                    if np.any(seg < cost.g.lower - 1e-9) or np.any(seg > cost.g.upper + 1e-9):
                        return np.inf
        return total


def _int64_csr(C):
    C.indptr = C.indptr.astype(np.int64)
    C.indices = C.indices.astype(np.int64)
    C.data = np.ascontiguousarray(C.data, dtype=np.float64)
    return C


def gather(nu, i, problem):
    """Concatenate the dual blocks ``nu_j`` for ``j`` in ``M_i`` (sorted)."""
    return np.concatenate([problem.dual_block(nu, j) for j in problem.neighbor_sets.M[i]])


def scatter(local, i, problem):
    """Inverse of :func:`gather`: place ``local`` into a zero global dual vector."""
    out = np.zeros(problem.dual_dim)
    o = problem.partition.q_offsets
    pos = 0
    for j in problem.neighbor_sets.M[i]:
        size = o[j + 1] - o[j]
        out[o[j]:o[j + 1]] = local[pos:pos + size]
        pos += size
    if pos != local.shape[0]:
        raise DimensionError("local vector does not match the neighborhood size")
    return out


def local_rows(problem, i):
    """Global dual indices of the neighborhood ``M_i`` in gather order."""
    o = problem.partition.q_offsets
    return np.concatenate([np.arange(o[j], o[j + 1]) for j in problem.neighbor_sets.M[i]]).astype(np.int64)


# -- structural edits ------------------------------------------------------------

def remove_subsystem(problem, i):
    """The problem with subsystem ``i`` (its variables and rows) deleted."""
    keep = [k for k in range(problem.M) if k != i]
    if not keep:
        raise DimensionError("cannot remove the last subsystem")
    remap = {k: pos for pos, k in enumerate(keep)}
    P = problem.partition
    part = BlockPartition([P.n_sizes[k] for k in keep], [P.m_sizes[k] for k in keep],
                          [P.p_sizes[k] for k in keep])

    def sub(mat, sizes):
        if mat is None:
            return None
        blocks = {(remap[r], remap[c]): blk for (r, c), blk in mat.blocks.items()
                  if r != i and c != i}
        return SparseBlockMatrix(sizes, part.n_sizes, blocks)

    b = np.concatenate([problem.b[P.m_offsets[k]:P.m_offsets[k + 1]] for k in keep])
    B = sub(problem.B, part.p_sizes) if part.p > 0 else None
    return ProblemInstance(part, [problem.costs[k] for k in keep], sub(problem.A, part.m_sizes), b, B)


def append_subsystem(problem, cost, b_new, A_row, A_col=None, B_row=None, B_col=None):
    """The problem with one subsystem appended at index ``M``.

    ``A_row`` maps column blocks ``j`` (including the new index ``M``) to the
    new subsystem's row blocks; ``A_col`` maps existing row blocks ``k`` to
    blocks multiplying the new variables. ``B_row``/``B_col`` work the same
    way for coupled rows.
    """
    P = problem.partition
    new = P.M
    b_new = np.asarray(b_new, dtype=float).ravel()
    m_new = b_new.shape[0]
    p_new = cost.g.size if cost.g is not None else 0
    part = BlockPartition(P.n_sizes + (cost.n,), P.m_sizes + (m_new,), P.p_sizes + (p_new,))
    A_blocks = dict(problem.A.blocks)
    A_blocks.update({(new, j): blk for j, blk in A_row.items()})
    A_blocks.update({(k, new): blk for k, blk in (A_col or {}).items()})
    B = None
    if part.p > 0:
        B_blocks = dict(problem.B.blocks) if problem.B is not None else {}
        B_blocks.update({(new, j): blk for j, blk in (B_row or {}).items()})
        B_blocks.update({(k, new): blk for k, blk in (B_col or {}).items()})
        B = SparseBlockMatrix(part.p_sizes, part.n_sizes, B_blocks)
    A = SparseBlockMatrix(part.m_sizes, part.n_sizes, A_blocks)
    return ProblemInstance(part, problem.costs + (cost,), A, np.concatenate([problem.b, b_new]), B)
