# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same signatures and loop orders as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()

NAME = "cython"

G_NONE = 0
G_BOX = 1
G_ONE_NORM = 2

ctypedef cnp.int64_t idx_t


cdef inline void _csr_matvec(const idx_t[::1] Ap, const idx_t[::1] Aj, const double[::1] Ax,
                             const double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, p
    cdef double s
    for i in range(out.shape[0]):
        s = 0.0
        for p in range(Ap[i], Ap[i + 1]):
            s = s + Ax[p] * x[Aj[p]]
        out[i] = s


cdef inline void _csr_rmatvec(const idx_t[::1] Ap, const idx_t[::1] Aj, const double[::1] Ax,
                              const double[::1] z, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, p
    cdef double zi
    for i in range(out.shape[0]):
        out[i] = 0.0
    for i in range(z.shape[0]):
        zi = z[i]
        for p in range(Ap[i], Ap[i + 1]):
            out[Aj[p]] = out[Aj[p]] + Ax[p] * zi


cdef inline void _inner_box(const double[::1] h, const double[::1] zeta, const double[::1] off,
                            const double[::1] lo, const double[::1] hi, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v
    for i in range(out.shape[0]):
        v = -(zeta[i] + off[i]) / h[i]
        if v < lo[i]:
            v = lo[i]
        if v > hi[i]:
            v = hi[i]
        out[i] = v


cdef inline void _block_chol_solve(const idx_t[::1] bptr, const idx_t[::1] fptr, const double[::1] fac,
                                   const double[::1] rhs, double[::1] out) noexcept nogil:
    cdef Py_ssize_t b, i, j, lo, s, f
    cdef double acc
    for b in range(bptr.shape[0] - 1):
        lo = bptr[b]
        s = bptr[b + 1] - lo
        f = fptr[b]
        for i in range(s):
            acc = rhs[lo + i]
            for j in range(i):
                acc = acc - fac[f + i * s + j] * out[lo + j]
            out[lo + i] = acc / fac[f + i * s + i]
        for i in range(s - 1, -1, -1):
            acc = out[lo + i]
            for j in range(i + 1, s):
                acc = acc - fac[f + j * s + i] * out[lo + j]
            out[lo + i] = acc / fac[f + i * s + i]


cdef inline double _conj_prox_one(double w, double l, int kind, double glo, double ghi,
                                  double* zg) noexcept nogil:
    cdef double s = l * w
    cdef double width, p
    if kind == 1:
        p = s
        if p < glo:
            p = glo
        if p > ghi:
            p = ghi
    elif kind == 2:
        width = ghi * l
        if s > width:
            p = s - width
        elif s < -width:
            p = s + width
        else:
            p = 0.0
    else:
        p = s
    zg[0] = p
    return w - p / l


def csr_matvec(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] data, const double[::1] x, Py_ssize_t nrows):
    out = np.empty(nrows)
    cdef double[::1] o = out
    with nogil:
        _csr_matvec(indptr, indices, data, x, o)
    return out


def csr_rmatvec(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] data, const double[::1] z, Py_ssize_t ncols):
    out = np.empty(ncols)
    cdef double[::1] o = out
    with nogil:
        _csr_rmatvec(indptr, indices, data, z, o)
    return out


def inner_box(const double[::1] hdiag, const double[::1] zeta, const double[::1] offset, const double[::1] lo, const double[::1] hi):
    out = np.empty(hdiag.shape[0])
    cdef double[::1] o = out
    with nogil:
        _inner_box(hdiag, zeta, offset, lo, hi, o)
    return out


def block_chol_solve(const idx_t[::1] bptr, const idx_t[::1] fptr, const double[::1] fac, const double[::1] rhs):
    out = np.empty(rhs.shape[0])
    cdef double[::1] o = out
    with nogil:
        _block_chol_solve(bptr, fptr, fac, rhs, o)
    return out


def conj_prox(const double[::1] w, const double[::1] ldiag, const cnp.int8_t[::1] kind, const double[::1] glo, const double[::1] ghi):
    cdef Py_ssize_t i, n = w.shape[0]
    mu = np.empty(n)
    zg = np.empty(n)
    cdef double[::1] m = mu
    cdef double[::1] zgv = zg
    cdef double p
    with nogil:
        for i in range(n):
            m[i] = _conj_prox_one(w[i], ldiag[i], kind[i], glo[i], ghi[i], &p)
            zgv[i] = p
    return mu, zg


def momentum(const double[::1] xi, const double[::1] xi_prev, double coef):
    cdef Py_ssize_t i
    out = np.empty(xi.shape[0])
    cdef double[::1] o = out
    for i in range(xi.shape[0]):
        o[i] = xi[i] + coef * (xi[i] - xi_prev[i])
    return out


def fdg_step(const idx_t[::1] Cp, const idx_t[::1] Ci, const double[::1] Cx, const double[::1] c,
             const double[::1] hdiag, const double[::1] zeta, const double[::1] xlo, const double[::1] xhi,
             const idx_t[::1] bptr, const idx_t[::1] fptr, const double[::1] fac,
             const idx_t[::1] lam_idx, const idx_t[::1] mu_idx, const double[::1] ldiag_mu,
             const cnp.int8_t[::1] gkind, const double[::1] glo, const double[::1] ghi,
             const double[::1] z, const double[::1] xi_prev, double coef):
    cdef Py_ssize_t n = hdiag.shape[0], q = c.shape[0], i, k
    cdef double primal_res = 0.0, coupling_res = 0.0, p, r
    y_a = np.empty(n)
    grad_a = np.empty(q)
    xi_a = np.empty(q)
    zn_a = np.empty(q)
    off_a = np.empty(n)
    cdef double[::1] y = y_a, grad = grad_a, xi = xi_a, zn = zn_a, off = off_a
    with nogil:
        _csr_rmatvec(Cp, Ci, Cx, z, off)
        _inner_box(hdiag, zeta, off, xlo, xhi, y)
        _csr_matvec(Cp, Ci, Cx, y, grad)
        for i in range(q):
            grad[i] = grad[i] - c[i]
        _block_chol_solve(bptr, fptr, fac, grad, xi)
        for i in range(q):
            xi[i] = z[i] + xi[i]
        for k in range(lam_idx.shape[0]):
            r = fabs(grad[lam_idx[k]])
            if r > primal_res:
                primal_res = r
        for k in range(mu_idx.shape[0]):
            i = mu_idx[k]
            xi[i] = _conj_prox_one(xi[i], ldiag_mu[k], gkind[k], glo[k], ghi[k], &p)
            r = fabs(grad[i] - p)
            if r > coupling_res:
                coupling_res = r
        for i in range(q):
            zn[i] = xi[i] + coef * (xi[i] - xi_prev[i])
    return y_a, grad_a, xi_a, zn_a, primal_res, coupling_res


# -- sparse Cholesky ----------------------------------------------------------

cdef Py_ssize_t _ereach(const idx_t[::1] Ap, const idx_t[::1] Ai, Py_ssize_t k, idx_t[::1] parent,
                        idx_t[::1] stack, cnp.uint8_t[::1] mark) noexcept nogil:
    cdef Py_ssize_t n = parent.shape[0], top = n, p, i, ln
    mark[k] = 1
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        ln = 0
        while not mark[i]:
            stack[ln] = i
            ln += 1
            mark[i] = 1
            i = parent[i]
        while ln > 0:
            top -= 1
            ln -= 1
            stack[top] = stack[ln]
    for p in range(top, n):
        mark[stack[p]] = 0
    mark[k] = 0
    return top


def etree(Py_ssize_t n, const idx_t[::1] Ap, const idx_t[::1] Ai):
    parent_a = np.full(n, -1, dtype=np.int64)
    ancestor_a = np.full(n, -1, dtype=np.int64)
    cdef idx_t[::1] parent = parent_a, ancestor = ancestor_a
    cdef Py_ssize_t k, p, i, inext
    with nogil:
        for k in range(n):
            for p in range(Ap[k], Ap[k + 1]):
                i = Ai[p]
                while i != -1 and i < k:
                    inext = ancestor[i]
                    ancestor[i] = k
                    if inext == -1:
                        parent[i] = k
                    i = inext
    return parent_a


def cholesky_csc(Py_ssize_t n, const idx_t[::1] Ap, const idx_t[::1] Ai, const double[::1] Ax):
    parent_a = etree(n, Ap, Ai)
    cdef idx_t[::1] parent = parent_a
    stack_a = np.empty(n, dtype=np.int64)
    mark_a = np.zeros(n, dtype=np.uint8)
    counts_a = np.ones(n, dtype=np.int64)
    cdef idx_t[::1] stack = stack_a, counts = counts_a
    cdef cnp.uint8_t[::1] mark = mark_a
    cdef Py_ssize_t k, p, t, i, top
    with nogil:
        for k in range(n):
            top = _ereach(Ap, Ai, k, parent, stack, mark)
            for p in range(top, n):
                counts[stack[p]] += 1
    Lp_a = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts_a, out=Lp_a[1:])
    Li_a = np.empty(Lp_a[n], dtype=np.int64)
    Lx_a = np.empty(Lp_a[n], dtype=np.float64)
    nxt_a = Lp_a[:-1].copy()
    x_a = np.zeros(n)
    cdef idx_t[::1] Lp = Lp_a, Li = Li_a, nxt = nxt_a
    cdef double[::1] Lx = Lx_a, x = x_a
    cdef double d, lki
    cdef Py_ssize_t bad = -1
    with nogil:
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
                    x[Li[p]] = x[Li[p]] - Lx[p] * lki
                d = d - lki * lki
                p = nxt[i]
                nxt[i] += 1
                Li[p] = k
                Lx[p] = lki
            if not d > 0.0:
                bad = k
                break
            p = nxt[k]
            nxt[k] += 1
            Li[p] = k
            Lx[p] = sqrt(d)
    if bad >= 0:
        raise np.linalg.LinAlgError(f"matrix not positive definite at pivot {bad}")
    return Lp_a, Li_a, Lx_a


def chol_solve_csc(const idx_t[::1] Lp, const idx_t[::1] Li, const double[::1] Lx, const double[::1] b):
    cdef Py_ssize_t n = b.shape[0], j, p
    x_a = np.array(b, dtype=np.float64)
    cdef double[::1] x = x_a
    cdef double acc
    with nogil:
        for j in range(n):
            x[j] = x[j] / Lx[Lp[j]]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                x[Li[p]] = x[Li[p]] - Lx[p] * x[j]
        for j in range(n - 1, -1, -1):
            acc = x[j]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                acc = acc - Lx[p] * x[Li[p]]
            x[j] = acc / Lx[Lp[j]]
    return x_a
