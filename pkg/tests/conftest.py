import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fastdual.blocks import Box, OneNorm

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def dense_oracle(problem, tol=1e-10):
    """Solve the primal QP densely with cvxpy (independent of the package)."""
    import cvxpy as cp

    n = problem.partition.n
    x = cp.Variable(n)
    H = problem.H_dense()
    H = 0.5 * (H + H.T)
    obj = 0.5 * cp.quad_form(x, cp.psd_wrap(H)) + problem.zeta @ x
    cons = [problem.A.to_dense() @ x == problem.b]
    lo, hi = problem.x_lower, problem.x_upper
    fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
    if fin_lo.any():
        cons.append(x[fin_lo] >= lo[fin_lo])
    if fin_hi.any():
        cons.append(x[fin_hi] <= hi[fin_hi])
    if problem.has_coupling:
        Bx = problem.B.to_dense() @ x
        po = problem.partition.p_offsets
        for i, cost in enumerate(problem.costs):
            if cost.g is None:
                continue
            seg = Bx[po[i]:po[i + 1]]
            if isinstance(cost.g, Box):
                l, u = cost.g.lower, cost.g.upper
                if np.isfinite(l).any():
                    cons.append(seg[np.isfinite(l)] >= l[np.isfinite(l)])
                if np.isfinite(u).any():
                    cons.append(seg[np.isfinite(u)] <= u[np.isfinite(u)])
            elif isinstance(cost.g, OneNorm):
                obj = obj + cost.g.weight @ cp.abs(seg)
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver="CLARABEL", tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol,
               max_iter=500)
    assert prob.status == "optimal", prob.status
    return np.asarray(x.value)


@pytest.fixture
def oracle():
    return dense_oracle


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; all verdicts are listed at the end of the run."""
    def record(number, ok, detail):
        request.config._acceptance.append((number, bool(ok), detail))
        return ok
    return record


def pytest_configure(config):
    config._acceptance = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config._acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(config._acceptance, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
