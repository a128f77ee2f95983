"""Fast (dual) gradient methods with a general metric.

``fast_gradient`` is the generic accelerated proximal gradient method in a
metric ``L``. ``fast_dual_gradient`` applies it to the dual problem: the
primal step is the inner minimizer at the extrapolated dual point, the
``lambda`` step is affine and the ``mu`` step is the conjugate prox under a
diagonal ``L_mu``. ``parallel_fast_dual_gradient`` is the equality-only
variant whose dual step solves with a stored sparse factor.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .blocks import Box, OneNorm
from .metrics import mu_diagonal
from .prox import dual_objective, inner_minimize, prox


# -- options and reports -----------------------------------------------------------

@dataclass
class SolveOptions:
    max_iter: int = 1000
    tol: float = 1e-6
    tol_dual_progress: float = math.inf
    accelerate: bool = True
    record_trajectory: bool = False
    record_iterates: bool = False
    record_dual_objective: bool = False

    def __post_init__(self):
        if not (self.tol > 0 and self.tol_dual_progress > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


@dataclass
class SolveReport:
    iterations: int
    status: str
    x: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    primal_residual: float
    coupling_residual: float
    residuals: list = field(default_factory=list)
    dual_objective: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    wall_time: float = 0.0
    algorithm: str = ""
    objective: float = math.nan

    @property
    def converged(self):
        return self.status == "converged"


def next_t(t):
    return (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0


def momentum_coefficient(t, t_next):
    return (t - 1.0) / t_next


def stopping_check(k, primal_res, coupling_res, progress, opts):
    """``"converged"``, ``"max_iter"`` or ``"continue"`` after iteration ``k``."""
    if primal_res <= opts.tol and coupling_res <= opts.tol and progress <= opts.tol_dual_progress:
        return "converged"
    if k >= opts.max_iter:
        return "max_iter"
    return "continue"


# -- generic fast gradient ---------------------------------------------------------

def fast_gradient(ell_grad, psi, L, x0, opts=None):
    """Minimize ``l(x) + psi(x)`` given ``grad l`` and an upper-bound metric ``L``.

    Stops when successive iterates differ by at most ``opts.tol`` (sup norm).
    """
    opts = opts or SolveOptions()
    start = time.perf_counter()
    x_prev = np.asarray(x0, dtype=float).copy()
    y = x_prev.copy()
    t = 1.0
    traj = []
    status, k, x = "max_iter", 0, x_prev
    for k in range(1, opts.max_iter + 1):
        g = ell_grad(y)
        step = y - L.solve(g)
        x = step if psi.kind == "zero" else prox(psi, L, step)
        t_next = next_t(t) if opts.accelerate else 1.0
        coef = momentum_coefficient(t, t_next) if opts.accelerate else 0.0
        change = float(np.max(np.abs(x - x_prev), initial=0.0))
        if opts.record_iterates:
            traj.append(x.copy())
        y = x + coef * (x - x_prev)
        x_prev, t = x, t_next
        if change <= opts.tol:
            status = "converged"
            break
    return SolveReport(iterations=k, status=status, x=x, nu=np.zeros(0), lam=np.zeros(0),
                       mu=np.zeros(0), primal_residual=math.nan, coupling_residual=math.nan,
                       iterates=traj, wall_time=time.perf_counter() - start,
                       algorithm="fast_gradient")


# -- shared dual-step machinery --------------------------------------------------------

def pack_factors(factors):
    """Row-major packing of dense lower factors for ``block_chol_solve``."""
    sizes = [F.shape[0] for F in factors]
    bptr = np.zeros(len(sizes) + 1, dtype=np.int64)
    np.cumsum(sizes, out=bptr[1:])
    fptr = np.zeros(len(sizes), dtype=np.int64)
    if sizes:
        np.cumsum([s * s for s in sizes[:-1]], out=fptr[1:])
    fac = (np.concatenate([np.ascontiguousarray(F).ravel() for F in factors])
           if factors else np.zeros(0))
    return bptr, fptr, np.ascontiguousarray(fac, dtype=float)


def node_factors(problem, L):
    """Cholesky factors of the per-subsystem diagonal blocks of ``L``."""
    factors = []
    for i, blk in enumerate(L.node_blocks(problem)):
        factors.append(np.linalg.cholesky(blk) if blk.shape[0] else np.zeros((0, 0)))
    return factors


def coupled_term_arrays(costs):
    """Per-entry codes and bounds for ``conj_prox`` from the ``g`` descriptors."""
    kind, lo, hi = [], [], []
    for cost in costs:
        g = cost.g
        if g is None:
            continue
        if isinstance(g, Box):
            kind.append(np.full(g.size, 1, dtype=np.int8))
            lo.append(g.lower)
            hi.append(g.upper)
        elif isinstance(g, OneNorm):
            kind.append(np.full(g.size, 2, dtype=np.int8))
            lo.append(-g.weight)
            hi.append(g.weight)
    if not kind:
        return np.zeros(0, dtype=np.int8), np.zeros(0), np.zeros(0)
    return np.concatenate(kind), np.concatenate(lo), np.concatenate(hi)


class DualStepper:
    """One dual iteration on the whole problem, routed through the kernels.

    Block metrics go through ``fdg_step`` (fused when every Hessian block is
    diagonal); a sparse-factored metric uses its stored factor for the dual
    step. Both produce ``(y, grad, xi, z_next, primal_res, coupling_res)``.
    """

    def __init__(self, problem, L):
        self.problem = problem
        self.L = L
        C = problem.C_csr
        self.Cp, self.Ci, self.Cx = C.indptr, C.indices, C.data
        self.c = np.ascontiguousarray(problem.c)
        self.diag = problem.all_diagonal
        if self.diag:
            self.hdiag = np.ascontiguousarray(problem.hdiag)
        self.zeta = np.ascontiguousarray(problem.zeta)
        self.xlo = np.ascontiguousarray(problem.x_lower)
        self.xhi = np.ascontiguousarray(problem.x_upper)
        self.lam_idx = problem.lam_index
        self.mu_idx = problem.mu_index
        self.gkind, self.glo, self.ghi = coupled_term_arrays(problem.costs)
        self.sparse = L.kind == "sparse_factored"
        if self.sparse:
            if problem.has_coupling:
                raise ValueError("sparse-factored metrics are limited to problems without g terms")
            self.ldiag_mu = np.zeros(0)
        else:
            self.bptr, self.fptr, self.fac = pack_factors(node_factors(problem, L))
            self.ldiag_mu = np.ascontiguousarray(mu_diagonal(problem, L))

    def primal(self, z):
        K = kernels.backend()
        n = self.problem.partition.n
        offset = K.csr_rmatvec(self.Cp, self.Ci, self.Cx, z, n)
        if self.diag:
            return K.inner_box(self.hdiag, self.zeta, offset, self.xlo, self.xhi)
        o = self.problem.partition.n_offsets
        return np.concatenate([inner_minimize(cost, offset[o[i]:o[i + 1]])
                               for i, cost in enumerate(self.problem.costs)])

    def step(self, z, xi_prev, coef):
        K = kernels.backend()
        if self.diag and not self.sparse:
            return K.fdg_step(self.Cp, self.Ci, self.Cx, self.c, self.hdiag, self.zeta,
                              self.xlo, self.xhi, self.bptr, self.fptr, self.fac,
                              self.lam_idx, self.mu_idx, self.ldiag_mu, self.gkind,
                              self.glo, self.ghi, z, xi_prev, coef)
        y = self.primal(z)
        return self.finish(y, z, xi_prev, coef)

    def finish(self, y, z, xi_prev, coef):
        """Dual half of the iteration given the primal minimizer ``y``."""
        K = kernels.backend()
        grad = K.csr_matvec(self.Cp, self.Ci, self.Cx, y, self.c.shape[0]) - self.c
        if self.sparse:
            xi = z + self.L.solve(grad)
        else:
            xi = z + K.block_chol_solve(self.bptr, self.fptr, self.fac, grad)
        primal_res = float(np.max(np.abs(grad[self.lam_idx]), initial=0.0))
        coupling_res = 0.0
        if self.mu_idx.shape[0]:
            mu, zg = K.conj_prox(np.ascontiguousarray(xi[self.mu_idx]), self.ldiag_mu,
                                 self.gkind, self.glo, self.ghi)
            xi[self.mu_idx] = mu
            coupling_res = float(np.max(np.abs(grad[self.mu_idx] - zg)))
        return y, grad, xi, K.momentum(xi, xi_prev, coef), primal_res, coupling_res


def _run(problem, stepper_step, nu0, opts, algorithm, counters_per_iter=None):
    opts = opts or SolveOptions()
    start = time.perf_counter()
    nu0 = np.zeros(problem.dual_dim) if nu0 is None else np.asarray(nu0, dtype=float).copy()
    z = nu0.copy()
    xi_prev = nu0.copy()
    t = 1.0
    report = SolveReport(iterations=0, status="max_iter", x=np.zeros(problem.partition.n),
                         nu=nu0.copy(), lam=None, mu=None, primal_residual=math.inf,
                         coupling_residual=math.inf, algorithm=algorithm)
    status = "max_iter" if opts.max_iter == 0 else "continue"
    k = 0
    while status == "continue":
        k += 1
        if opts.accelerate:
            t_next = next_t(t)
            coef = momentum_coefficient(t, t_next)
        else:
            t_next, coef = 1.0, 0.0
        y, grad, xi, z_next, pres, cres = stepper_step(z, xi_prev, coef)
        progress = float(np.max(np.abs(xi - xi_prev), initial=0.0))
        if opts.record_trajectory:
            report.residuals.append((pres, cres))
        if opts.record_iterates:
            report.iterates.append({"nu": xi.copy(), "y": y.copy(), "z": z.copy()})
        if opts.record_dual_objective:
            report.dual_objective.append(dual_objective(problem, xi))
        report.x, report.nu = y, xi
        report.primal_residual, report.coupling_residual = pres, cres
        z, xi_prev, t = z_next, xi, t_next
        status = stopping_check(k, pres, cres, progress, opts)
    report.iterations = k
    report.status = status
    report.lam, report.mu = problem.split_dual(report.nu)
    report.objective = problem.objective(report.x)
    report.counters = dict(counters_per_iter(k)) if counters_per_iter else {}
    report.wall_time = time.perf_counter() - start
    return report


# -- fast dual gradient -----------------------------------------------------------------

def fast_dual_gradient(problem, L, nu0=None, opts=None, L_mu=None):
    """Generalized fast dual gradient method.

    ``L`` is the metric on the interleaved dual vector. Alternatively pass
    ``L`` for the ``lambda`` part and ``L_mu`` for the ``mu`` part; both must
    then be scalar or diagonal.
    """
    if L_mu is not None:
        L = combine_metrics(problem, L, L_mu)
    stepper = DualStepper(problem, L)
    return _run(problem, stepper.step, nu0, opts, "fast_dual_gradient")


def combine_metrics(problem, L_lambda, L_mu):
    """Interleave a ``lambda`` metric and a ``mu`` metric into one diagonal metric."""
    from .metrics import DiagonalMetric

    def diag_of(Lx, size):
        if Lx.kind == "scalar":
            return np.full(size, Lx.alpha)
        if Lx.kind == "diagonal":
            return Lx.d
        raise ValueError("split metrics must be scalar or diagonal")

    d = np.zeros(problem.dual_dim)
    d[problem.lam_index] = diag_of(L_lambda, problem.partition.m)
    d[problem.mu_index] = diag_of(L_mu, problem.partition.p)
    return DiagonalMetric(d)


# -- parallel variant with the exact metric ---------------------------------------------

def parallel_fast_dual_gradient(problem, L, nu0=None, opts=None, block_order=None, executor=None):
    """Equality-only fast dual gradient with one factor solve per iteration.

    Block primal updates are independent; ``block_order`` permutes the order
    they are evaluated in and ``executor`` (anything with ``map``) may run
    them concurrently. The result does not depend on either.
    """
    if problem.has_coupling:
        raise ValueError("the parallel method requires a problem without g terms")
    stepper = DualStepper(problem, L)
    P = problem.partition
    order = list(range(P.M)) if block_order is None else list(block_order)
    if sorted(order) != list(range(P.M)):
        raise ValueError("block_order must be a permutation of the subsystems")
    K = kernels.backend()
    # column slices of C' per block: offsets for x_i only need the rows in M_i
    Ct = problem.C_csr.T.tocsr()
    Ct.sort_indices()
    col_blocks = []
    for i in range(P.M):
        blk = Ct[P.n_offsets[i]:P.n_offsets[i + 1]]
        col_blocks.append((blk.indptr.astype(np.int64), blk.indices.astype(np.int64),
                           np.ascontiguousarray(blk.data)))

    def block_primal(i, z):
        Bp, Bi, Bx = col_blocks[i]
        off = K.csr_matvec(Bp, Bi, Bx, z, P.n_sizes[i])
        return i, inner_minimize(problem.costs[i], off)

    def step(z, xi_prev, coef):
        work = (lambda i: block_primal(i, z))
        results = executor.map(work, order) if executor is not None else map(work, order)
        y = np.empty(P.n)
        for i, yi in results:
            y[P.n_offsets[i]:P.n_offsets[i + 1]] = yi
        return stepper.finish(y, z, xi_prev, coef)

    return _run(problem, step, nu0, opts, "parallel_fast_dual_gradient",
                counters_per_iter=lambda k: {"global_rounds": 2 * k, "local_rounds": 0})
