"""Generalized fast dual gradient methods for block-separable problems."""

from .blocks import (Box, BlockPartition, LocalCost, NeighborSets, OneNorm, ProblemInstance,
                     RankError, SparseBlockMatrix, derive_neighbor_sets, gather, scatter,
                     validate_full_row_rank)
from .metrics import (BlockDiagonalMetric, DiagonalMetric, ScalarMetric, SparseFactoredMetric,
                      block_feasible_closed_form, distributed_init, exact_metric, local_gram,
                      local_metric_sdp, scalar_metric, verify_feasible)
from .prox import (SeparableFunction, dual_objective, dual_value_and_gradient, inner_minimize,
                   prox, prox_conjugate_via_moreau)
from .solvers import (SolveOptions, SolveReport, fast_dual_gradient, fast_gradient,
                      parallel_fast_dual_gradient, stopping_check)
from .simnet import PlugAndPlay, SimConfig, run_distributed, run_distributed_init
from .io import dump_problem, load_problem

__version__ = "0.1.0"

__all__ = [
    "Box", "BlockPartition", "LocalCost", "NeighborSets", "OneNorm", "ProblemInstance",
    "RankError", "SparseBlockMatrix", "derive_neighbor_sets", "gather", "scatter",
    "validate_full_row_rank",
    "BlockDiagonalMetric", "DiagonalMetric", "ScalarMetric", "SparseFactoredMetric",
    "block_feasible_closed_form", "distributed_init", "exact_metric", "local_gram",
    "local_metric_sdp", "scalar_metric", "verify_feasible",
    "SeparableFunction", "dual_objective", "dual_value_and_gradient", "inner_minimize", "prox",
    "prox_conjugate_via_moreau",
    "SolveOptions", "SolveReport", "fast_dual_gradient", "fast_gradient",
    "parallel_fast_dual_gradient", "stopping_check",
    "PlugAndPlay", "SimConfig", "run_distributed", "run_distributed_init",
    "dump_problem", "load_problem",
]
