"""Pure-Python/NumPy implementations of the hot kernels.

Every function here has a twin with an identical signature in the compiled
``_ckernels`` extension. Accumulation orders follow the compiled loops where
that is cheap to guarantee (CSR products go through SciPy's sparsetools,
which sum in the same row/column order).
"""

import numpy as np
from scipy import sparse
from scipy.linalg import solve_triangular

NAME = "python"

# Codes for the per-entry conjugate prox in ``conj_prox``.
G_NONE = 0
G_BOX = 1
G_ONE_NORM = 2


def csr_matvec(indptr, indices, data, x, nrows):
    A = sparse.csr_matrix((data, indices, indptr), shape=(nrows, x.shape[0]))
    return A @ x


def csr_rmatvec(indptr, indices, data, z, ncols):
    # Aᵀz through the CSC view of the same arrays: accumulates row by row.
    At = sparse.csc_matrix((data, indices, indptr), shape=(ncols, z.shape[0]))
    return At @ z


def inner_box(hdiag, zeta, offset, lo, hi):
    v = -(zeta + offset) / hdiag
    return np.minimum(np.maximum(v, lo), hi)


def block_chol_solve(bptr, fptr, fac, rhs):
    """Solve blkdiag(F_b F_bᵀ) x = rhs with row-major packed lower factors."""
    out = np.empty_like(rhs)
    for b in range(bptr.shape[0] - 1):
        lo, hi = bptr[b], bptr[b + 1]
        s = hi - lo
        if s == 0:
            continue
        F = fac[fptr[b]:fptr[b] + s * s].reshape(s, s)
        if s == 1:
            out[lo] = (rhs[lo] / F[0, 0]) / F[0, 0]
            continue
        w = solve_triangular(F, rhs[lo:hi], lower=True, check_finite=False)
        out[lo:hi] = solve_triangular(F, w, lower=True, trans="T", check_finite=False)
    return out


def conj_prox(w, ldiag, kind, glo, ghi):
    """Moreau-based prox of g* under a diagonal metric, entrywise.

    Returns ``(mu, zg)`` where ``zg = prox_g^{1/l}(l*w)`` and
    ``mu = w - zg/l``.
    """
    s = ldiag * w
    zg = np.empty_like(s)
    box = kind == G_BOX
    zg[box] = np.minimum(np.maximum(s[box], glo[box]), ghi[box])
    l1 = kind == G_ONE_NORM
    width = ghi[l1] * ldiag[l1]
    zg[l1] = np.sign(s[l1]) * np.maximum(np.abs(s[l1]) - width, 0.0)
    free = kind == G_NONE
    zg[free] = s[free]
    mu = w - zg / ldiag
    return mu, zg


def momentum(xi, xi_prev, coef):
    return xi + coef * (xi - xi_prev)


def fdg_step(Cp, Ci, Cx, c, hdiag, zeta, xlo, xhi, bptr, fptr, fac,
             lam_idx, mu_idx, ldiag_mu, gkind, glo, ghi, z, xi_prev, coef):
    """One iteration of the fast dual gradient method (closed-form inner step).

    Returns ``(y, grad, xi, z_next, primal_res, coupling_res)``.
    """
    n = hdiag.shape[0]
    offset = csr_rmatvec(Cp, Ci, Cx, z, n)
    y = inner_box(hdiag, zeta, offset, xlo, xhi)
    grad = csr_matvec(Cp, Ci, Cx, y, c.shape[0]) - c
    xi = z + block_chol_solve(bptr, fptr, fac, grad)
    primal_res = float(np.max(np.abs(grad[lam_idx]), initial=0.0))
    coupling_res = 0.0
    if mu_idx.shape[0]:
        mu, zg = conj_prox(xi[mu_idx], ldiag_mu, gkind, glo, ghi)
        xi[mu_idx] = mu
        coupling_res = float(np.max(np.abs(grad[mu_idx] - zg)))
    z_next = momentum(xi, xi_prev, coef)
    return y, grad, xi, z_next, primal_res, coupling_res


# -- sparse Cholesky (up-looking, elimination-tree driven) -------------------

def etree(n, Ap, Ai):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


def _ereach(Ap, Ai, k, parent, stack, mark):
    n = parent.shape[0]
    top = n
    mark[k] = True
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        ln = 0
        while not mark[i]:
            stack[ln] = i
            ln += 1
            mark[i] = True
            i = parent[i]
        while ln > 0:
            top -= 1
            ln -= 1
            stack[top] = stack[ln]
    for p in range(top, n):
        mark[stack[p]] = False
    mark[k] = False
    return top


def cholesky_csc(n, Ap, Ai, Ax):
    """Factor a symmetric positive definite matrix given by its upper triangle.

    ``(Ap, Ai, Ax)`` is CSC storage of the upper triangle (row index <= column).
    Returns CSC arrays of the lower factor with the diagonal first in each
    column. Raises ``np.linalg.LinAlgError`` if a pivot is not positive.
    """
    parent = etree(n, Ap, Ai)
    stack = np.empty(n, dtype=np.int64)
    mark = np.zeros(n, dtype=bool)
    counts = np.ones(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, stack, mark)
        for p in range(top, n):
            counts[stack[p]] += 1
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    Li = np.empty(Lp[n], dtype=np.int64)
    Lx = np.empty(Lp[n], dtype=np.float64)
    nxt = Lp[:-1].copy()
    x = np.zeros(n)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, stack, mark)
        x[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            if Ai[p] <= k:
                x[Ai[p]] = Ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = stack[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, nxt[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = nxt[i]
            nxt[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > 0.0:
            raise np.linalg.LinAlgError(f"matrix not positive definite at pivot {k}")
        p = nxt[k]
        nxt[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return Lp, Li, Lx


def chol_solve_csc(Lp, Li, Lx, b):
    """Solve (L Lᵀ) x = b: one forward and one backward substitution."""
    n = b.shape[0]
    x = np.array(b, dtype=np.float64)
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        lo, hi = Lp[j] + 1, Lp[j + 1]
        if hi > lo:
            x[Li[lo:hi]] -= Lx[lo:hi] * x[j]
    for j in range(n - 1, -1, -1):
        lo, hi = Lp[j] + 1, Lp[j + 1]
        if hi > lo:
            x[j] -= Lx[lo:hi] @ x[Li[lo:hi]]
        x[j] /= Lx[Lp[j]]
    return x
