"""Lockstep message-passing simulation of the distributed method.

Each :class:`Node` holds only neighborhood data: its own cost, the column
block ``C_{M_i}`` (rows of its column neighbors), the row block ``C_{N_i}``
and the factor of its own metric block. All exchanges go through a
:class:`Network`, which rejects messages to non-neighbors and counts rounds,
messages and transferred scalars. Stopping is decided by an observer that
reads the nodes' local residuals; it does not touch the iteration itself.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import kernels
from .blocks import append_subsystem, local_rows, remove_subsystem, validate_full_row_rank
from .metrics import (BlockDiagonalMetric, CHOOSERS, block_feasible_closed_form,
                      check_local_choice, default_eps, local_gram, local_metric_sdp,
                      sum_node_blocks)
from .prox import inner_minimize
from .solvers import (SolveOptions, SolveReport, coupled_term_arrays, momentum_coefficient,
                      next_t, pack_factors, stopping_check)


class ProtocolViolation(RuntimeError):
    pass


@dataclass
class SimConfig:
    seed: int = 0
    mode: str = "lockstep"
    faults: object = None

    def __post_init__(self):
        if self.mode != "lockstep":
            raise ValueError("only lockstep simulation is supported")
        if self.faults is not None:
            raise ValueError("fault injection is not supported")


@dataclass
class RoundCounters:
    local_rounds: int = 0
    global_rounds: int = 0
    messages: int = 0
    payload_scalars: int = 0
    init_rounds: int = 0

    def as_dict(self):
        return dict(self.__dict__)


class Network:
    """Synchronous neighbor network; buffers swap at :meth:`barrier`.

    Phases fix who may talk to whom: in ``"dual"`` node ``i`` sends to
    ``N_i``, in ``"primal"`` and ``"init"`` to ``M_i``.
    """

    def __init__(self, neighbor_sets, trace=None):
        self.sets = neighbor_sets
        self.counters = RoundCounters()
        self.trace = trace
        self._pending = {}
        self._inbox = {}
        self._round = 0

    def allowed(self, phase, src):
        if phase == "dual":
            return self.sets.N[src]
        if phase in ("primal", "init"):
            return self.sets.M[src]
        raise ValueError(f"unknown phase {phase!r}")

    def send(self, src, dst, payload, phase):
        if dst not in self.allowed(phase, src):
            raise ProtocolViolation(f"node {src} may not send to {dst} in the {phase} phase")
        self._pending.setdefault(dst, {})[src] = payload
        if src != dst:
            size = int(np.size(payload))
            self.counters.messages += 1
            self.counters.payload_scalars += size
            if self.trace is not None:
                self.trace.append(f"{self._round}\tlocal\t{src}\t{dst}\t{size}")

    def barrier(self, init=False):
        self._inbox, self._pending = self._pending, {}
        self.counters.local_rounds += 1
        if init:
            self.counters.init_rounds += 1
        self._round += 1

    def receive(self, dst):
        return self._inbox.get(dst, {})


class Node:
    """Neighborhood-local state and data of subsystem ``i``."""

    def __init__(self, problem, i, metric_block, label=None):
        P = problem.partition
        sets = problem.neighbor_sets
        self.i = i
        self.label = i if label is None else label
        self.N = sets.N[i]
        self.M = sets.M[i]
        self.cost = problem.costs[i]
        self.m = P.m_sizes[i]
        self.p = P.p_sizes[i]
        self.q = self.m + self.p
        self.n = P.n_sizes[i]
        self.q_sizes = {j: P.q_sizes[j] for j in self.M}
        self.n_sizes = {j: P.n_sizes[j] for j in self.N}
        C = problem.C_csr
        rows = local_rows(problem, i)
        colblk = C[rows][:, P.n_offsets[i]:P.n_offsets[i + 1]].tocsr()
        colblk.sort_indices()
        self.col = (colblk.indptr.astype(np.int64), colblk.indices.astype(np.int64),
                    np.ascontiguousarray(colblk.data))
        cols = np.concatenate([np.arange(P.n_offsets[j], P.n_offsets[j + 1]) for j in self.N])
        rowblk = C[P.q_offsets[i]:P.q_offsets[i + 1]][:, cols].tocsr()
        rowblk.sort_indices()
        self.row = (rowblk.indptr.astype(np.int64), rowblk.indices.astype(np.int64),
                    np.ascontiguousarray(rowblk.data))
        self.c = np.ascontiguousarray(problem.c[P.q_offsets[i]:P.q_offsets[i + 1]])
        F = np.linalg.cholesky(metric_block) if self.q else np.zeros((0, 0))
        self.bptr, self.fptr, self.fac = pack_factors([F])
        self.ldiag_mu = np.ascontiguousarray(np.diag(metric_block)[self.m:])
        off = metric_block[self.m:, :].copy()
        off[np.arange(self.p), self.m + np.arange(self.p)] = 0.0
        if np.any(off != 0):
            raise ValueError(f"node {i}: metric couples mu to other dual entries")
        self.gkind, self.glo, self.ghi = coupled_term_arrays([self.cost])
        self.lam_loc = np.arange(self.m, dtype=np.int64)
        self.mu_loc = np.arange(self.m, self.q, dtype=np.int64)
        self.diag = self.cost.is_diagonal
        self.z = None
        self.xi = None
        self.xi_prev = None
        self.y = None
        self.primal_res = math.inf
        self.coupling_res = math.inf

    def start(self, nu0_local):
        self.z = nu0_local.copy()
        self.xi = nu0_local.copy()
        self.xi_prev = nu0_local.copy()

    def send_dual(self, net):
        for j in self.N:
            net.send(self.i, j, self.z, "dual")

    def primal_step(self, net):
        inbox = net.receive(self.i)
        z_loc = np.concatenate([inbox[j] for j in self.M]) if self.M else np.zeros(0)
        K = kernels.backend()
        Cp, Ci, Cx = self.col
        offset = K.csr_rmatvec(Cp, Ci, Cx, z_loc, self.n)
        if self.diag:
            self.y = K.inner_box(self.cost.H, self.cost.zeta, offset, self.cost.lower(),
                                 self.cost.upper())
        else:
            self.y = inner_minimize(self.cost, offset)
        for j in self.M:
            net.send(self.i, j, self.y, "primal")

    def dual_step(self, net, coef):
        inbox = net.receive(self.i)
        y_loc = np.concatenate([inbox[j] for j in self.N]) if self.N else np.zeros(0)
        K = kernels.backend()
        Rp, Ri, Rx = self.row
        grad = K.csr_matvec(Rp, Ri, Rx, y_loc, self.q) - self.c
        xi = self.z + K.block_chol_solve(self.bptr, self.fptr, self.fac, grad)
        self.primal_res = float(np.max(np.abs(grad[self.lam_loc]), initial=0.0))
        self.coupling_res = 0.0
        if self.p:
            mu, zg = K.conj_prox(np.ascontiguousarray(xi[self.mu_loc]), self.ldiag_mu,
                                 self.gkind, self.glo, self.ghi)
            xi[self.mu_loc] = mu
            self.coupling_res = float(np.max(np.abs(grad[self.mu_loc] - zg)))
        self.xi_prev = self.xi
        self.xi = xi
        self.z = K.momentum(xi, self.xi_prev, coef)


def run_distributed_init(problem, chooser="sdp", config=None, network=None):
    """Every node chooses its local metric and sends block ``L_{M_i,j}`` to ``j``.

    Returns ``(metric, counters)``. One local round is used.
    """
    config = config or SimConfig()
    rule = CHOOSERS[chooser] if isinstance(chooser, str) else chooser
    net = network or Network(problem.neighbor_sets)
    rng = np.random.default_rng(config.seed)
    for i in rng.permutation(problem.M):
        choice = rule(problem, int(i))
        check_local_choice(problem, int(i), choice)
        for j in problem.neighbor_sets.M[i]:
            net.send(int(i), j, choice[j], "init")
    net.barrier(init=True)
    blocks = []
    for j in range(problem.M):
        inbox = net.receive(j)
        contributions = {i: {j: inbox[i]} for i in inbox}
        blocks.append(sum_node_blocks(problem, contributions, j))
    return BlockDiagonalMetric(blocks), net.counters


def run_distributed(problem, metric, nu0=None, opts=None, config=None, trace=None):
    """Node-by-node execution of the distributed fast dual gradient method.

    ``metric`` is a block-diagonal-compatible metric, or a chooser name
    (``"sdp"``, ``"closed_form"``) in which case the initialization is
    simulated first and counted as one extra local round.
    """
    opts = opts or SolveOptions()
    config = config or SimConfig()
    start_time = time.perf_counter()
    net = Network(problem.neighbor_sets, trace=trace)
    if isinstance(metric, str) or callable(metric):
        metric, _ = run_distributed_init(problem, metric, config, network=net)
    blocks = metric.node_blocks(problem)
    nodes = [Node(problem, i, blocks[i]) for i in range(problem.M)]
    nu0 = np.zeros(problem.dual_dim) if nu0 is None else np.asarray(nu0, dtype=float)
    for node in nodes:
        node.start(problem.dual_block(nu0, node.i))
    rng = np.random.default_rng(config.seed)
    report = SolveReport(iterations=0, status="max_iter", x=np.zeros(problem.partition.n),
                         nu=nu0.copy(), lam=None, mu=None, primal_residual=math.inf,
                         coupling_residual=math.inf, algorithm="distributed")
    t = 1.0
    k = 0
    status = "max_iter" if opts.max_iter == 0 else "continue"
    while status == "continue":
        k += 1
        if opts.accelerate:
            t_next = next_t(t)
            coef = momentum_coefficient(t, t_next)
        else:
            t_next, coef = 1.0, 0.0
        for i in rng.permutation(problem.M):
            nodes[i].send_dual(net)
        net.barrier()
        for i in rng.permutation(problem.M):
            nodes[i].primal_step(net)
        net.barrier()
        for i in rng.permutation(problem.M):
            nodes[i].dual_step(net, coef)
        t = t_next
        # observer
        pres = max(n.primal_res for n in nodes)
        cres = max(n.coupling_res for n in nodes)
        xi = np.concatenate([n.xi for n in nodes])
        xi_prev = np.concatenate([n.xi_prev for n in nodes])
        y = np.concatenate([n.y for n in nodes])
        progress = float(np.max(np.abs(xi - xi_prev), initial=0.0))
        if opts.record_trajectory:
            report.residuals.append((pres, cres))
        if opts.record_iterates:
            z_prev = np.concatenate([n.z for n in nodes])
            report.iterates.append({"nu": xi.copy(), "y": y.copy(), "z_next": z_prev})
        report.x, report.nu = y, xi
        report.primal_residual, report.coupling_residual = pres, cres
        status = stopping_check(k, pres, cres, progress, opts)
    report.iterations = k
    report.status = status
    report.lam, report.mu = problem.split_dual(report.nu)
    report.objective = problem.objective(report.x)
    report.counters = net.counters.as_dict()
    report.wall_time = time.perf_counter() - start_time
    return report


# -- plug and play -----------------------------------------------------------------

_BLOCK_SOLVERS = {
    "sdp": lambda G, sizes, eps: local_metric_sdp(G, sizes, eps=eps).blocks,
    "closed_form": lambda G, sizes, eps: block_feasible_closed_form(G, sizes, eps),
}


class PlugAndPlay:
    """Distributed metric state that follows subsystems being added or removed.

    Nodes carry stable labels. ``choices[label]`` maps neighbor labels to the
    blocks ``L_{M_i,j}`` node ``label`` contributes; ``blocks[label]`` is the
    summed metric block. Only nodes near the change are recomputed; all other
    blocks are left untouched (same objects, bit-identical values).

    ``policy="local"`` re-solves a neighbor's local problem only in blocks
    that belong to the affected neighborhood, keeping the rest fixed through
    a Schur-complement reduction. ``policy="resolve"`` lets each affected
    neighbor run the full chooser, which also refreshes its other blocks.
    """

    def __init__(self, problem, chooser="sdp", labels=None, policy="local"):
        if chooser not in _BLOCK_SOLVERS:
            raise ValueError("plug and play supports the 'sdp' and 'closed_form' choosers")
        if policy not in ("local", "resolve"):
            raise ValueError("policy must be 'local' or 'resolve'")
        self.chooser = chooser
        self.policy = policy
        self.problem = problem
        self.labels = list(range(problem.M)) if labels is None else list(labels)
        if len(set(self.labels)) != problem.M:
            raise ValueError("labels must be unique, one per subsystem")
        rule = CHOOSERS[chooser]
        self.choices = {}
        for i in range(problem.M):
            choice = rule(problem, i)
            check_local_choice(problem, i, choice)
            self.choices[self.labels[i]] = {self.labels[j]: blk for j, blk in choice.items()}
        self.history = {lab: [] for lab in self.labels}
        self.blocks = {}
        for j in range(problem.M):
            self.blocks[self.labels[j]] = self._sum(problem, self.labels, j)

    def index(self, label):
        return self.labels.index(label)

    def metric(self):
        return BlockDiagonalMetric([self.blocks[lab] for lab in self.labels])

    def _sum(self, problem, labels, j):
        contributions = {i: {j: self.choices[labels[i]][labels[j]]}
                         for i in problem.neighbor_sets.N[j]}
        return sum_node_blocks(problem, contributions, j)

    def _gram(self, problem, i):
        return local_gram(problem, i)

    def _commit(self, problem, labels, choices, history, changed_pairs):
        dests = {j for (_, j) in changed_pairs}
        blocks = dict(self.blocks)
        old_choices, self.choices = self.choices, choices
        try:
            for lab in list(blocks):
                if lab not in labels:
                    del blocks[lab]
            for lab in dests:
                if lab in labels:
                    blocks[lab] = self._sum(problem, labels, labels.index(lab))
        except Exception:
            self.choices = old_choices
            raise
        self.problem, self.labels, self.history, self.blocks = problem, labels, history, blocks

    def remove(self, label):
        """Remove a subsystem; returns the set of labels whose state changed."""
        i = self.index(label)
        P_old = self.problem
        sets = P_old.neighbor_sets
        problem = remove_subsystem(P_old, i)
        validate_full_row_rank(problem.A)
        labels = [lab for lab in self.labels if lab != label]
        choices = {lab: dict(ch) for lab, ch in self.choices.items() if lab != label}
        history = {lab: list(h) for lab, h in self.history.items() if lab != label}
        changed_pairs = {(label, self.labels[j]) for j in sets.M[i]}
        touched = {label} | {self.labels[j] for j in sets.M[i]}
        for k in sets.N[i]:
            if k == i:
                continue
            lab_k = self.labels[k]
            touched.add(lab_k)
            new_k = labels.index(lab_k)
            G_new = self._gram(problem, new_k)
            restored = False
            if history[lab_k] and history[lab_k][-1][0] == label:
                _, snapshot, G_old = history[lab_k].pop()
                keys = {labels[j] for j in problem.neighbor_sets.M[new_k]}
                if set(snapshot) == keys and G_old.shape == G_new.shape and np.array_equal(G_old, G_new):
                    for j_lab in set(snapshot) | set(choices[lab_k]):
                        changed_pairs.add((lab_k, j_lab))
                    choices[lab_k] = dict(snapshot)
                    restored = True
            if not restored:
                choices[lab_k].pop(label, None)
        self._commit(problem, labels, choices, history, changed_pairs)
        return touched | {j for (_, j) in changed_pairs if j in self.labels} | {label}

    def add(self, label, cost, b, A_row, A_col=None, B_row=None, B_col=None, policy=None):
        """Append a subsystem; block dictionaries are keyed by labels.

        ``A_row`` holds the new subsystem's row blocks (include ``label`` for
        its own diagonal block); ``A_col`` holds blocks of existing rows that
        multiply the new variables. Returns the set of labels whose state
        changed.
        """
        policy = policy or self.policy
        if label in self.labels:
            raise ValueError(f"label {label!r} already in use")
        labels = self.labels + [label]
        idx = {lab: k for k, lab in enumerate(labels)}
        problem = append_subsystem(
            self.problem, cost, b,
            {idx[j]: blk for j, blk in A_row.items()},
            {idx[k]: blk for k, blk in (A_col or {}).items()},
            {idx[j]: blk for j, blk in (B_row or {}).items()} if B_row else None,
            {idx[k]: blk for k, blk in (B_col or {}).items()} if B_col else None)
        validate_full_row_rank(problem.A)
        a = problem.M - 1
        sets = problem.neighbor_sets
        rule = CHOOSERS[self.chooser]
        choices = {lab: dict(ch) for lab, ch in self.choices.items()}
        history = {lab: list(h) for lab, h in self.history.items()}
        history[label] = []
        new_choice = rule(problem, a)
        check_local_choice(problem, a, new_choice)
        choices[label] = {labels[j]: blk for j, blk in new_choice.items()}
        changed_pairs = {(label, labels[j]) for j in sets.M[a]}
        S = {a} | set(sets.M[a]) | set(sets.N[a])
        for k in sets.N[a]:
            if k == a:
                continue
            lab_k = labels[k]
            old = self.choices[lab_k]
            history[lab_k].append((label, dict(old), self._gram(self.problem, k)))
            if policy == "resolve":
                choice = {labels[j]: blk for j, blk in rule(problem, k).items()}
            else:
                choice = self._local_resolve(problem, labels, k, S, old)
            check_local_choice(problem, k, {idx[j]: blk for j, blk in choice.items()})
            choices[lab_k] = choice
            for j_lab in set(choice) | set(old):
                if j_lab not in old or j_lab not in choice or choice[j_lab] is not old[j_lab]:
                    changed_pairs.add((lab_k, j_lab))
        self._commit(problem, labels, choices, history, changed_pairs)
        return {label} | {labels[k] for k in sets.N[a]} | {j for (_, j) in changed_pairs}

    def _local_resolve(self, problem, labels, k, S, old):
        """Re-solve node ``k``'s blocks inside ``S``, holding the others fixed."""
        P = problem.partition
        Mk = problem.neighbor_sets.M[k]
        G = local_gram(problem, k)
        pos, R_idx, F_idx, R_sizes, F_nodes, R_nodes = 0, [], [], [], [], []
        for j in Mk:
            span = np.arange(pos, pos + P.q_sizes[j])
            pos += P.q_sizes[j]
            if j in S:
                R_idx.append(span)
                R_nodes.append(j)
                if P.m_sizes[j]:
                    R_sizes.append(P.m_sizes[j])
                R_sizes.extend([1] * P.p_sizes[j])
            else:
                F_idx.append(span)
                F_nodes.append(j)
        R = np.concatenate(R_idx) if R_idx else np.zeros(0, dtype=int)
        F = np.concatenate(F_idx) if F_idx else np.zeros(0, dtype=int)
        solve_blocks = _BLOCK_SOLVERS[self.chooser]
        eps = default_eps(G)
        if F.shape[0] == 0:
            G_eff, eps_eff = G, eps
        else:
            L_F = linalg.block_diag(*[old[labels[j]] for j in F_nodes])
            slack = L_F - G[np.ix_(F, F)]
            margin = float(np.linalg.eigvalsh(slack).min())
            if not margin > 0:
                raise ValueError(f"node {labels[k]}: fixed blocks leave no slack for a local re-solve")
            eps_eff = min(eps, 0.5 * margin)
            G_RF = G[np.ix_(R, F)]
            G_eff = G[np.ix_(R, R)] + G_RF @ np.linalg.solve(
                slack - eps_eff * np.eye(F.shape[0]), G_RF.T)
            G_eff = 0.5 * (G_eff + G_eff.T)
        refined = solve_blocks(G_eff, R_sizes, eps_eff)
        choice = {labels[j]: old[labels[j]] for j in F_nodes}
        k_pos = 0
        for j in R_nodes:
            parts = []
            if P.m_sizes[j]:
                parts.append(refined[k_pos])
                k_pos += 1
            for _ in range(P.p_sizes[j]):
                parts.append(refined[k_pos])
                k_pos += 1
            choice[labels[j]] = linalg.block_diag(*parts) if parts else np.zeros((0, 0))
        return choice
