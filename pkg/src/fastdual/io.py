"""JSON problem files and metric export.

Infinite bounds are written as the strings ``"inf"`` and ``"-inf"``; all
other numbers use Python's shortest round-trip float repr, so a load of a
dump reproduces every value exactly. A file may carry a precomputed metric
under ``"metric"`` (kind tag, payload and, for sparse factors, a hash of
the sparsity pattern that is checked on import).
"""

from __future__ import annotations

import json
import math

import numpy as np
from scipy import sparse

from .blocks import Box, BlockPartition, LocalCost, OneNorm, ProblemInstance, SparseBlockMatrix
from .metrics import (BlockDiagonalMetric, DiagonalMetric, ScalarMetric, SparseFactoredMetric)

FORMAT = "fastdual-problem"
VERSION = 1


class FormatError(ValueError):
    pass


def _num(v):
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        raise FormatError("NaN cannot be stored")
    return v


def _vec(a):
    return [_num(v) for v in np.asarray(a, dtype=float).ravel()]


def _mat(a):
    return [_vec(row) for row in np.atleast_2d(np.asarray(a, dtype=float))]


def _unnum(v):
    if isinstance(v, str):
        if v in ("inf", "-inf"):
            return float(v)
        raise FormatError(f"unexpected string {v!r} in numeric field")
    return float(v)


def _unvec(xs):
    return np.array([_unnum(v) for v in xs], dtype=float)


def _unmat(rows, shape=None):
    if shape is not None and shape[0] == 0:
        return np.zeros(shape)
    out = np.array([[_unnum(v) for v in row] for row in rows], dtype=float)
    if shape is not None:
        out = out.reshape(shape)
    return out


def _blocks_to_json(mat):
    if mat is None:
        return None
    return {"blocks": [{"row": int(i), "col": int(j), "data": _mat(blk)}
                       for (i, j), blk in sorted(mat.blocks.items())]}


def _blocks_from_json(doc, row_sizes, col_sizes):
    blocks = {}
    for entry in doc["blocks"]:
        i, j = int(entry["row"]), int(entry["col"])
        blocks[(i, j)] = _unmat(entry["data"], (row_sizes[i], col_sizes[j]))
    return SparseBlockMatrix(row_sizes, col_sizes, blocks)


def _descriptor_to_json(d):
    if d is None:
        return None
    if isinstance(d, Box):
        return {"kind": "box", "lower": _vec(d.lower), "upper": _vec(d.upper)}
    if isinstance(d, OneNorm):
        return {"kind": "one_norm", "weight": _vec(d.weight)}
    raise FormatError(f"cannot store descriptor {d!r}")


def _descriptor_from_json(doc):
    if doc is None:
        return None
    if doc["kind"] == "box":
        return Box(_unvec(doc["lower"]), _unvec(doc["upper"]))
    if doc["kind"] == "one_norm":
        return OneNorm(_unvec(doc["weight"]))
    raise FormatError(f"unknown descriptor kind {doc['kind']!r}")


def problem_to_dict(problem, metric=None):
    P = problem.partition
    costs = []
    for c in problem.costs:
        costs.append({
            "H": _vec(c.H) if c.is_diagonal else _mat(c.H),
            "H_form": "diagonal" if c.is_diagonal else "dense",
            "zeta": _vec(c.zeta),
            "h": _descriptor_to_json(c.h),
            "g": _descriptor_to_json(c.g),
        })
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "partition": {"subsystem_count": P.M, "n_sizes": list(P.n_sizes),
                      "m_sizes": list(P.m_sizes), "p_sizes": list(P.p_sizes)},
        "A": _blocks_to_json(problem.A),
        "B": _blocks_to_json(problem.B),
        "b": _vec(problem.b),
        "costs": costs,
    }
    if metric is not None:
        doc["metric"] = metric_to_dict(metric)
    return doc


def problem_from_dict(doc):
    if doc.get("format") != FORMAT:
        raise FormatError("not a problem file")
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported version {doc.get('version')!r}")
    part_doc = doc["partition"]
    part = BlockPartition(part_doc["n_sizes"], part_doc["m_sizes"], part_doc["p_sizes"])
    if part.M != part_doc["subsystem_count"]:
        raise FormatError("subsystem_count disagrees with the size lists")
    costs = []
    for i, c in enumerate(doc["costs"]):
        n = part.n_sizes[i]
        H = _unvec(c["H"]) if c["H_form"] == "diagonal" else _unmat(c["H"], (n, n))
        costs.append(LocalCost(H, _unvec(c["zeta"]), _descriptor_from_json(c["h"]),
                               _descriptor_from_json(c["g"])))
    A = _blocks_from_json(doc["A"], part.m_sizes, part.n_sizes)
    B = _blocks_from_json(doc["B"], part.p_sizes, part.n_sizes) if doc.get("B") else None
    return ProblemInstance(part, costs, A, _unvec(doc["b"]), B)


def metric_to_dict(metric):
    kind = metric.kind
    if kind == "scalar":
        payload = {"alpha": _num(metric.alpha), "dim": metric.dim}
    elif kind == "diagonal":
        payload = {"d": _vec(metric.d)}
    elif kind == "block_diagonal":
        payload = {"blocks": [_mat(b) if b.shape[0] else [] for b in metric.blocks],
                   "sizes": list(metric.sizes)}
    elif kind == "sparse_factored":
        L = metric.L.tocsr()
        payload = {
            "dim": metric.dim,
            "indptr": L.indptr.tolist(), "indices": L.indices.tolist(), "data": _vec(L.data),
            "perm": metric.perm.tolist(),
            "factor": {"indptr": metric.Lp.tolist(), "indices": metric.Li.tolist(),
                       "data": _vec(metric.Lx)},
        }
        return {"kind": kind, "pattern_hash": metric.pattern_hash(), "payload": payload}
    else:
        raise FormatError(f"cannot export metric kind {kind!r}")
    return {"kind": kind, "payload": payload}


def metric_from_dict(doc):
    kind, pl = doc["kind"], doc["payload"]
    if kind == "scalar":
        return ScalarMetric(_unnum(pl["alpha"]), int(pl["dim"]))
    if kind == "diagonal":
        return DiagonalMetric(_unvec(pl["d"]))
    if kind == "block_diagonal":
        return BlockDiagonalMetric([_unmat(b, (s, s)) for b, s in zip(pl["blocks"], pl["sizes"])])
    if kind == "sparse_factored":
        n = int(pl["dim"])
        L = sparse.csr_matrix((_unvec(pl["data"]), np.asarray(pl["indices"], dtype=np.int64),
                               np.asarray(pl["indptr"], dtype=np.int64)), shape=(n, n))
        f = pl["factor"]
        metric = SparseFactoredMetric.from_factor(L, pl["perm"], f["indptr"], f["indices"],
                                                  _unvec(f["data"]))
        if metric.pattern_hash() != doc["pattern_hash"]:
            raise FormatError("stored metric pattern hash does not match its payload")
        return metric
    raise FormatError(f"unknown metric kind {kind!r}")


def dump_problem(problem, path, metric=None):
    with open(path, "w") as fh:
        json.dump(problem_to_dict(problem, metric), fh)


def load_problem(path):
    """Return ``(problem, metric_or_None)``."""
    with open(path) as fh:
        doc = json.load(fh)
    metric = metric_from_dict(doc["metric"]) if doc.get("metric") else None
    return problem_from_dict(doc), metric
