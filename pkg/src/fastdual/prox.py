"""Proximal operators under diagonal metrics and the inner minimizers.

``prox(psi, L, x) = argmin_y psi(y) + 0.5 ||y - x||_L^2`` for separable
``psi`` and diagonal (or scalar) ``L``. Each kind has its own closed form so the
conjugate route through :func:`prox_conjugate_via_moreau` can be checked
against the direct one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.optimize import lsq_linear

from . import kernels
from .blocks import Box, OneNorm


class UnsupportedCombination(ValueError):
    pass


@dataclass(frozen=True)
class SeparableFunction:
    """``kind`` in {"zero", "box", "one_norm", "support_box"}."""

    kind: str
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    weight: np.ndarray | None = None

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def box(cls, lower, upper):
        b = Box(lower, upper)
        return cls("box", lower=b.lower, upper=b.upper)

    @classmethod
    def one_norm(cls, weight):
        return cls("one_norm", weight=OneNorm(weight).weight)

    @classmethod
    def support_box(cls, lower, upper):
        b = Box(lower, upper)
        return cls("support_box", lower=b.lower, upper=b.upper)

    @classmethod
    def from_descriptor(cls, desc):
        if desc is None:
            return cls.zero()
        if isinstance(desc, Box):
            return cls.box(desc.lower, desc.upper)
        if isinstance(desc, OneNorm):
            return cls.one_norm(desc.weight)
        raise TypeError(f"unknown descriptor {desc!r}")

    def conjugate(self):
        if self.kind == "box":
            return SeparableFunction.support_box(self.lower, self.upper)
        if self.kind == "support_box":
            return SeparableFunction.box(self.lower, self.upper)
        if self.kind == "one_norm":
            return SeparableFunction.box(-self.weight, self.weight)
        raise UnsupportedCombination("the conjugate of zero is the indicator of {0}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return 0.0
        if self.kind == "box":
            return 0.0 if np.all((x >= self.lower) & (x <= self.upper)) else np.inf
        if self.kind == "one_norm":
            return float(self.weight @ np.abs(x))
        return float(np.sum(_support_terms(x, self.lower, self.upper)))


def _support_terms(x, lo, hi):
    # max(hi*x, lo*x) with the convention 0*inf = 0
    with np.errstate(invalid="ignore"):
        return np.where(x > 0, hi * x, np.where(x < 0, lo * x, 0.0))


def _diag(L, size):
    """Return the diagonal of a scalar/diagonal metric as a vector."""
    kind = getattr(L, "kind", None)
    if kind is not None:
        if kind == "scalar":
            return np.full(size, L.alpha)
        if kind == "diagonal":
            return np.asarray(L.d, dtype=float)
        raise UnsupportedCombination(f"prox needs a diagonal metric, got {kind}")
    arr = np.asarray(L, dtype=float)
    if arr.ndim == 0:
        return np.full(size, float(arr))
    if arr.ndim == 1:
        return arr
    off = arr - np.diag(np.diag(arr))
    if np.any(off != 0):
        raise UnsupportedCombination("non-diagonal metric with a non-quadratic function")
    return np.diag(arr).copy()


def prox(psi, L, x):
    """``argmin_y psi(y) + 0.5 ||y - x||_L^2`` for diagonal or scalar ``L``."""
    x = np.asarray(x, dtype=float)
    d = _diag(L, x.shape[0])
    if psi.kind == "zero":
        return x.copy()
    if psi.kind == "box":
        return np.minimum(np.maximum(x, psi.lower), psi.upper)
    if psi.kind == "one_norm":
        width = psi.weight / d
        return np.sign(x) * np.maximum(np.abs(x) - width, 0.0)
    if psi.kind == "support_box":
        # piecewise linear with slope `upper` on y > 0 and `lower` on y < 0
        right = x - psi.upper / d
        left = x - psi.lower / d
        return np.where(right > 0, right, np.where(left < 0, left, 0.0))
    raise ValueError(f"unknown kind {psi.kind}")


def prox_conjugate_via_moreau(g, L, x):
    """``prox_{g*}^L(x) = x - L^-1 prox_g^{L^-1}(L x)``."""
    x = np.asarray(x, dtype=float)
    d = _diag(L, x.shape[0])
    return x - prox(g, 1.0 / d, d * x) / d


# -- inner minimizers ------------------------------------------------------------

def inner_minimize(cost, linear_offset):
    """Minimize ``0.5 y'Hy + (zeta + offset)'y`` over the block's box."""
    off = np.asarray(linear_offset, dtype=float)
    if not np.all(np.isfinite(off)):
        raise ValueError("non-finite linear offset")
    if cost.is_diagonal:
        return kernels.backend().inner_box(cost.H, cost.zeta, off, cost.lower(), cost.upper())
    return _inner_dense(cost, off)


def _inner_dense(cost, off):
    rhs = -(cost.zeta + off)
    factor = linalg.cho_factor(cost.H, lower=False)
    y = linalg.cho_solve(factor, rhs)
    lo, hi = cost.lower(), cost.upper()
    if cost.h is None or np.all((y >= lo) & (y <= hi)):
        return y
    # 0.5||R y - R^-T rhs||^2 with H = R'R has the same minimizer over the box
    R = np.triu(factor[0])
    target = linalg.solve_triangular(R, rhs, trans="T")
    res = lsq_linear(R, target, bounds=(lo, hi), method="bvls", tol=1e-14, max_iter=10_000)
    return np.minimum(np.maximum(res.x, lo), hi)


@dataclass
class DualEval:
    value: float
    grad: np.ndarray
    x: np.ndarray


def primal_from_dual(problem, nu):
    """``x*(nu)``, block by block with offsets ``C_{M_i}' nu_{M_i}``."""
    offset = problem.C_csr.T @ nu
    P = problem.partition
    return np.concatenate([
        inner_minimize(cost, offset[P.n_offsets[i]:P.n_offsets[i + 1]])
        for i, cost in enumerate(problem.costs)
    ])


def dual_value_and_gradient(problem, nu):
    """``d(nu) = min_x f(x) + h(x) + nu'(Cx - c)`` with its gradient."""
    nu = np.asarray(nu, dtype=float)
    x = primal_from_dual(problem, nu)
    grad = problem.C_csr @ x - problem.c
    fx = 0.0
    for i, cost in enumerate(problem.costs):
        xi = problem.primal_block(x, i)
        Hx = cost.H * xi if cost.is_diagonal else cost.H @ xi
        fx += 0.5 * xi @ Hx + cost.zeta @ xi
    return DualEval(value=float(fx + nu @ grad), grad=grad, x=x)


def conjugate_penalty(problem, mu):
    """``g*(mu)`` summed over blocks (``inf`` outside the domain)."""
    if not problem.has_coupling:
        return 0.0
    total = 0.0
    po = problem.partition.p_offsets
    for i, cost in enumerate(problem.costs):
        if cost.g is None:
            continue
        seg = mu[po[i]:po[i + 1]]
        gstar = SeparableFunction.from_descriptor(cost.g).conjugate()
        if gstar.kind == "box":
            # domain check with a little slack for rounding in the prox step
            tol = 1e-12 * np.maximum(1.0, np.abs(gstar.upper))
            if np.any(seg > gstar.upper + tol) or np.any(seg < gstar.lower - tol):
                return np.inf
        else:
            total += gstar(seg)
    return total


def dual_objective(problem, nu):
    """``D(nu) = d(nu) - g*(mu)``."""
    _, mu = problem.split_dual(nu)
    return dual_value_and_gradient(problem, nu).value - conjugate_penalty(problem, mu)
