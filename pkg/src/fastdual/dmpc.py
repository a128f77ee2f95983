"""Distributed MPC instances: condensation, random generation and benchmarks.

Subsystem ``i`` has dynamics ``x_i(t+1) = sum_j Phi_ij x_j(t) + Gamma_ij u_j(t)``
over its neighbors ``j`` and stacks ``y_i = (x_i(0..N), u_i(0..N-1))``. Its
equality rows are ``x_i(0) = xbar_i`` followed by one block of dynamics rows
per step, so ``m_i = (N + 1) n_x``.
"""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .blocks import Box, BlockPartition, LocalCost, OneNorm, ProblemInstance, SparseBlockMatrix
from .metrics import distributed_init, exact_metric, scalar_metric
from .solvers import SolveOptions, fast_dual_gradient, parallel_fast_dual_gradient

logger = logging.getLogger(__name__)


@dataclass
class SubsystemDynamics:
    """Local model; ``Phi`` and ``Gamma`` map neighbor index to blocks."""

    Phi: dict
    Gamma: dict
    x0: np.ndarray
    x_lower: np.ndarray
    x_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    N: int

    def __post_init__(self):
        for name in ("x0", "x_lower", "x_upper", "u_lower", "u_upper", "Q", "R", "Qf"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        self.Phi = {int(j): np.atleast_2d(np.asarray(b, dtype=float)) for j, b in self.Phi.items()}
        self.Gamma = {int(j): np.atleast_2d(np.asarray(b, dtype=float)) for j, b in self.Gamma.items()}
        nx, nu = self.nx, self.nu
        if not (self.x0.size == self.x_lower.size == self.x_upper.size == self.Qf.size == nx):
            raise ValueError("state-sized vectors disagree")
        if not (self.u_lower.size == self.u_upper.size == nu):
            raise ValueError("input-sized vectors disagree")
        if np.any(self.Q <= 0) or np.any(self.R <= 0) or np.any(self.Qf <= 0):
            raise ValueError("cost diagonals must be positive")
        if np.any(self.x_lower > self.x_upper) or np.any(self.u_lower > self.u_upper):
            raise ValueError("empty box")
        for blk in self.Phi.values():
            if blk.shape[0] != nx:
                raise ValueError("Phi block has the wrong number of rows")
        for blk in self.Gamma.values():
            if blk.shape[0] != nx:
                raise ValueError("Gamma block has the wrong number of rows")

    @property
    def nx(self):
        return self.Q.size

    @property
    def nu(self):
        return self.R.size

    @property
    def n_vars(self):
        return (self.N + 1) * self.nx + self.N * self.nu

    def neighbors(self):
        return sorted(set(self.Phi) | set(self.Gamma))


def _input_dims(dyn):
    """Input dimension of every subsystem, checked against all Gamma blocks."""
    out = [d.nu for d in dyn]
    for i, d in enumerate(dyn):
        for j, blk in d.Gamma.items():
            if blk.shape[1] != out[j]:
                raise ValueError(f"Gamma[{i}][{j}] has {blk.shape[1]} columns, expected {out[j]}")
        for j, blk in d.Phi.items():
            if blk.shape[1] != dyn[j].nx:
                raise ValueError(f"Phi[{i}][{j}] has {blk.shape[1]} columns, expected {dyn[j].nx}")
    return out


def _A_block(di, dj, i, j):
    """Equality block of row subsystem ``i`` against the variables of ``j``."""
    N, nxi = di.N, di.nx
    nxj, nuj = dj.nx, dj.nu
    blk = np.zeros(((N + 1) * nxi, (N + 1) * nxj + N * nuj))
    if i == j:
        blk[:nxi, :nxi] = np.eye(nxi)
        for t in range(N):
            r = (t + 1) * nxi
            blk[r:r + nxi, (t + 1) * nxi:(t + 2) * nxi] = np.eye(nxi)
    phi, gam = di.Phi.get(j), di.Gamma.get(j)
    for t in range(N):
        r = (t + 1) * nxi
        if phi is not None:
            blk[r:r + nxi, t * nxj:(t + 1) * nxj] -= phi
        if gam is not None:
            c = (N + 1) * nxj + t * nuj
            blk[r:r + nxi, c:c + nuj] -= gam
    return blk


def condense(dynamics, couplings=None):
    """Stack the horizon of every subsystem into a block-sparse QP.

    ``couplings`` optionally maps a subsystem index to ``(blocks, g)`` where
    ``blocks`` maps neighbor ``j`` to a ``p_i x n_j`` matrix acting on the
    stacked variables and ``g`` is a :class:`Box` or :class:`OneNorm`.
    """
    dyn = list(dynamics)
    if len({d.N for d in dyn}) != 1:
        raise ValueError("all subsystems need the same horizon")
    _input_dims(dyn)
    couplings = couplings or {}
    costs, A_blocks, b_parts = [], {}, []
    p_sizes = []
    for i, d in enumerate(dyn):
        N = d.N
        Hdiag = np.concatenate([np.tile(d.Q, N), d.Qf, np.tile(d.R, N)])
        box = Box(np.concatenate([np.tile(d.x_lower, N + 1), np.tile(d.u_lower, N)]),
                  np.concatenate([np.tile(d.x_upper, N + 1), np.tile(d.u_upper, N)]))
        g = couplings[i][1] if i in couplings else None
        costs.append(LocalCost(Hdiag, np.zeros(d.n_vars), h=box, g=g))
        p_sizes.append(g.size if g is not None else 0)
        for j in sorted(set(d.neighbors()) | {i}):
            A_blocks[(i, j)] = _A_block(d, dyn[j], i, j)
        b_parts.append(np.concatenate([d.x0, np.zeros(N * d.nx)]))
    n_sizes = [d.n_vars for d in dyn]
    m_sizes = [(d.N + 1) * d.nx for d in dyn]
    part = BlockPartition(n_sizes, m_sizes, p_sizes)
    A = SparseBlockMatrix(m_sizes, n_sizes, A_blocks)
    B = None
    if part.p:
        B_blocks = {}
        for i, (blocks, _) in couplings.items():
            for j, blk in blocks.items():
                B_blocks[(i, int(j))] = blk
        B = SparseBlockMatrix(part.p_sizes, n_sizes, B_blocks)
    return ProblemInstance(part, costs, A, np.concatenate(b_parts), B)


def condense_coupled(dynamics, couplings):
    """:func:`condense` with coupled inequality or 1-norm terms (required)."""
    if not couplings:
        raise ValueError("condense_coupled needs at least one coupling")
    return condense(dynamics, couplings)


def _partner(dynamics, i):
    others = [j for j in dynamics[i].neighbors() if j != i]
    return others[0] if others else None


def _first_state_rows(dyn, t_from):
    """Rows picking the first state entry of ``x(t)`` for ``t = t_from..N``."""
    rows = np.zeros((dyn.N + 1 - t_from, dyn.n_vars))
    for k, t in enumerate(range(t_from, dyn.N + 1)):
        rows[k, t * dyn.nx] = 1.0
    return rows


def tracking_couplings(dynamics, weight=1.0, t_from=1):
    """1-norm penalties ``w |x_i1(t) - x_j1(t)|`` toward one neighbor ``j``.

    Each subsystem with a neighbor tracks the first state entry of its
    lowest-indexed neighbor from step ``t_from`` on.
    """
    out = {}
    for i, d in enumerate(dynamics):
        j = _partner(dynamics, i)
        if j is None:
            continue
        rows_i = _first_state_rows(d, t_from)
        rows_j = _first_state_rows(dynamics[j], t_from)
        out[i] = ({i: rows_i, j: -rows_j}, OneNorm(np.full(rows_i.shape[0], float(weight))))
    return out


def sum_bound_couplings(dynamics, bound, t_from=1):
    """One-sided coupled inequalities ``x_i1(t) + x_j1(t) <= bound``.

    The unbounded side is an explicit ``-inf`` in the box.
    """
    out = {}
    for i, d in enumerate(dynamics):
        j = _partner(dynamics, i)
        if j is None:
            continue
        rows_i = _first_state_rows(d, t_from)
        rows_j = _first_state_rows(dynamics[j], t_from)
        p = rows_i.shape[0]
        out[i] = ({i: rows_i, j: rows_j}, Box(np.full(p, -np.inf), np.full(p, float(bound))))
    return out


def state_selector(dyn_i, t):
    """Row selector picking ``x_i(t)`` out of the stacked ``y_i``."""
    sel = np.zeros((dyn_i.nx, dyn_i.n_vars))
    sel[:, t * dyn_i.nx:(t + 1) * dyn_i.nx] = np.eye(dyn_i.nx)
    return sel


def with_initial_states(problem, dynamics, x0s):
    """Same problem with new initial states (only ``b`` changes)."""
    b = problem.b.copy()
    o = problem.partition.m_offsets
    for i, (d, x0) in enumerate(zip(dynamics, x0s)):
        b[o[i]:o[i] + d.nx] = x0
    return ProblemInstance(problem.partition, problem.costs, problem.A, b, problem.B)


# -- generation ----------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    M: int = 20
    nx_range: tuple = (2, 4)
    nu_range: tuple = (1, 2)
    N: int = 10
    spectral_radius: float = 1.15
    phi_range: tuple = (-0.7, 1.3)
    gamma_range: tuple = (-1.0, 1.0)
    upper_range: tuple = (0.4, 1.0)
    lower_range: tuple = (-1.0, -0.4)
    cost_range: tuple = (1.0, 1e6)
    avg_degree: float = 2.2
    input_coupling: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("need at least one subsystem and a positive horizon")
        for name in ("nx_range", "nu_range", "phi_range", "gamma_range", "upper_range",
                     "lower_range", "cost_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty")
            setattr(self, name, (lo, hi))
        if not self.spectral_radius > 0:
            raise ValueError("spectral radius target must be positive")


def interaction_graph(M, avg_degree, rng):
    """Random spanning tree plus random extra edges up to the average degree."""
    edges = set()
    order = rng.permutation(M)
    for k in range(1, M):
        a = int(order[k])
        b = int(order[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    target = min(int(round(avg_degree * M / 2)), M * (M - 1) // 2)
    while len(edges) < target:
        a, b = (int(v) for v in rng.choice(M, size=2, replace=False))
        edges.add((min(a, b), max(a, b)))
    nbrs = [{i} for i in range(M)]
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    return [sorted(s) for s in nbrs], sorted(edges)


def spectral_radius(mat):
    return float(np.max(np.abs(np.linalg.eigvals(mat)))) if mat.size else 0.0


def global_state_matrix(dynamics):
    offs = np.concatenate([[0], np.cumsum([d.nx for d in dynamics])]).astype(int)
    out = np.zeros((offs[-1], offs[-1]))
    for i, d in enumerate(dynamics):
        for j, blk in d.Phi.items():
            out[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = blk
    return out


def generate(config):
    """Random coupled dynamics with feasible initial states."""
    rng = np.random.default_rng(config.seed)
    M = config.M
    nbrs, _ = interaction_graph(M, config.avg_degree, rng) if M > 1 else ([[0]], [])
    nx = rng.integers(config.nx_range[0], config.nx_range[1] + 1, size=M)
    nu = rng.integers(config.nu_range[0], config.nu_range[1] + 1, size=M)
    Phi, Gamma = [], []
    for i in range(M):
        Phi.append({j: rng.uniform(*config.phi_range, size=(nx[i], nx[j])) for j in nbrs[i]})
        gj = nbrs[i] if config.input_coupling else [i]
        Gamma.append({j: rng.uniform(*config.gamma_range, size=(nx[i], nu[j])) for j in gj})
    offs = np.concatenate([[0], np.cumsum(nx)]).astype(int)
    glob = np.zeros((offs[-1], offs[-1]))
    for i in range(M):
        for j, blk in Phi[i].items():
            glob[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = blk
    rho = spectral_radius(glob)
    if rho == 0:
        raise ValueError("generated dynamics matrix is nilpotent; cannot rescale")
    scale = config.spectral_radius / rho
    dyn = []
    for i in range(M):
        dyn.append(SubsystemDynamics(
            Phi={j: scale * blk for j, blk in Phi[i].items()},
            Gamma=Gamma[i],
            x0=np.zeros(nx[i]),
            x_lower=rng.uniform(*config.lower_range, size=nx[i]),
            x_upper=rng.uniform(*config.upper_range, size=nx[i]),
            u_lower=rng.uniform(*config.lower_range, size=nu[i]),
            u_upper=rng.uniform(*config.upper_range, size=nu[i]),
            Q=rng.uniform(*config.cost_range, size=nx[i]),
            R=rng.uniform(*config.cost_range, size=nu[i]),
            Qf=rng.uniform(*config.cost_range, size=nx[i]),
            N=config.N))
    x0s = sample_initial_states(dyn, rng, 1)[0]
    for d, x0 in zip(dyn, x0s):
        d.x0 = x0
    return dyn


def is_feasible(problem):
    """Linear feasibility of ``Ax = b`` inside the boxes (HiGHS)."""
    A = sparse.csr_matrix(problem.A.to_dense())
    bounds = list(zip(problem.x_lower, problem.x_upper))
    res = linprog(np.zeros(problem.partition.n), A_eq=A, b_eq=problem.b, bounds=bounds,
                  method="highs")
    return res.status == 0


def sample_initial_states(dynamics, rng, count, max_tries=10_000):
    """Initial states drawn uniformly from the state boxes, kept if feasible."""
    base = condense(dynamics)
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not sample a feasible initial state")
        x0s = [rng.uniform(d.x_lower, d.x_upper) for d in dynamics]
        if is_feasible(with_initial_states(base, dynamics, x0s)):
            out.append(x0s)
    return out


# -- benchmark harness -----------------------------------------------------------------------

CSV_COLUMNS = ["algorithm", "metric", "M", "vars", "constraints", "avg_local_rounds",
               "max_local_rounds", "avg_global_rounds", "max_global_rounds", "avg_iters",
               "avg_time_ms"]

ALGORITHMS = {
    "parallel": "exact",
    "distributed": "block-sdp",
    "scalar2": "two-norm",
    "scalar1": "one-norm",
}


@dataclass
class BenchConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    instances: int = 20
    initial_conditions: int = 1
    algorithms: tuple = ("parallel", "distributed", "scalar2", "scalar1")
    max_iter: int = 20_000
    tol: float = 1e-4
    simulate: bool = False


@dataclass
class BenchRow:
    algorithm: str
    metric: str
    M: int
    vars: int
    constraints: int
    avg_local_rounds: float
    max_local_rounds: int
    avg_global_rounds: float
    max_global_rounds: int
    avg_iters: float
    avg_time_ms: float


@dataclass
class RunRecord:
    instance: int
    initial_condition: int
    algorithm: str
    iterations: int
    converged: bool
    local_rounds: int
    global_rounds: int
    time_ms: float
    vars: int
    constraints: int


def constraint_count(problem):
    finite = int(np.sum(np.isfinite(problem.x_lower)) + np.sum(np.isfinite(problem.x_upper)))
    return problem.partition.m + problem.partition.p + finite


def build_metric(problem, algorithm):
    if algorithm == "parallel":
        return exact_metric(problem)
    if algorithm == "distributed":
        return distributed_init(problem, "sdp")
    if algorithm == "scalar2":
        return scalar_metric(problem, "two_norm")
    if algorithm == "scalar1":
        return scalar_metric(problem, "one_norm")
    raise ValueError(f"unknown algorithm {algorithm!r}")


def _counts(algorithm, iterations):
    """Communication rounds implied by the iteration count.

    Distributed variants use two neighbor rounds per iteration; the
    block-diagonal metric adds one neighbor round for its initialization and
    the scalar metrics one global reduction. The parallel method exchanges
    with the hub twice per iteration.
    """
    if algorithm == "parallel":
        return 0, 2 * iterations
    if algorithm == "distributed":
        return 2 * iterations + 1, 0
    return 2 * iterations, 1


def solve_instance(problem, algorithm, metric, opts, simulate=False, seed=0):
    if algorithm == "parallel":
        rep = parallel_fast_dual_gradient(problem, metric, opts=opts)
        return rep, 0, rep.counters["global_rounds"]
    if simulate:
        from .simnet import SimConfig, run_distributed
        rep = run_distributed(problem, metric, opts=opts, config=SimConfig(seed=seed))
        local = rep.counters["local_rounds"] + (1 if algorithm == "distributed" else 0)
        return rep, local, (0 if algorithm == "distributed" else 1)
    rep = fast_dual_gradient(problem, metric, opts=opts)
    local, glob = _counts(algorithm, rep.iterations)
    return rep, local, glob


def run_bench(config, progress=None):
    """Solve every instance and initial condition with every configuration."""
    records = []
    opts = SolveOptions(max_iter=config.max_iter, tol=config.tol)
    for inst in range(config.instances):
        gen = GeneratorConfig(**{**asdict(config.generator), "seed": config.generator.seed + inst})
        dyn = generate(gen)
        base = condense(dyn)
        rng = np.random.default_rng(gen.seed + 7919)
        x0_list = [[d.x0 for d in dyn]]
        if config.initial_conditions > 1:
            x0_list += sample_initial_states(dyn, rng, config.initial_conditions - 1)
        for alg in config.algorithms:
            metric = build_metric(base, alg)
            for ic, x0s in enumerate(x0_list):
                problem = with_initial_states(base, dyn, x0s)
                rep, local, glob = solve_instance(problem, alg, metric, opts, config.simulate, inst)
                records.append(RunRecord(inst, ic, alg, rep.iterations, rep.converged, local, glob,
                                         rep.wall_time * 1e3, problem.partition.n,
                                         constraint_count(problem)))
                if progress:
                    progress(records[-1])
    return records


def aggregate(records, M):
    rows = []
    order = [a for a in ALGORITHMS if any(r.algorithm == a for r in records)]
    for alg in order:
        for censored in (False, True):
            sel = [r for r in records if r.algorithm == alg and r.converged != censored]
            if not sel:
                continue
            rows.append(BenchRow(
                algorithm=alg + ("+censored" if censored else ""),
                metric=ALGORITHMS[alg],
                M=M,
                vars=int(round(statistics.fmean(r.vars for r in sel))),
                constraints=int(round(statistics.fmean(r.constraints for r in sel))),
                avg_local_rounds=statistics.fmean(r.local_rounds for r in sel),
                max_local_rounds=max(r.local_rounds for r in sel),
                avg_global_rounds=statistics.fmean(r.global_rounds for r in sel),
                max_global_rounds=max(r.global_rounds for r in sel),
                avg_iters=statistics.fmean(r.iterations for r in sel),
                avg_time_ms=statistics.fmean(r.time_ms for r in sel)))
    return rows


def bench(config, out=None, progress=None):
    records = run_bench(config, progress)
    rows = aggregate(records, config.generator.M)
    if out is not None:
        write_csv(rows, out)
    return rows, records


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) for c in CSV_COLUMNS])


_INT_COLUMNS = {"M", "vars", "constraints", "max_local_rounds", "max_global_rounds"}


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        rows = []
        for rec in reader:
            vals = {}
            for c in CSV_COLUMNS:
                if c in ("algorithm", "metric"):
                    vals[c] = rec[c]
                elif c in _INT_COLUMNS:
                    vals[c] = int(rec[c])
                else:
                    vals[c] = float(rec[c])
            rows.append(BenchRow(**vals))
    return rows
