"""Exhaustive vertex-enumeration solver for tiny equality-mode neuron programs.

Independent of the ADMM path: it rewrites::

    minimize ||w||_1  s.t.  X[:, Omega].T w == x_out[Omega],  X[:, ~Omega].T w <= v[~Omega]

as an LP in ``(w, t)`` with ``-t <= w <= t`` and enumerates every basic
feasible solution.  Only usable for N <= 3 or so.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = ["OracleResult", "lp_vertex_oracle"]


@dataclass
class OracleResult:
    w: np.ndarray
    objective: float
    unique: bool
    n_vertices: int


def lp_vertex_oracle(xin, xout_row, v=None, tol: float = 1e-9) -> OracleResult:
    xin = np.asarray(xin, dtype=np.float64)
    y = np.asarray(xout_row, dtype=np.float64).ravel()
    n, p = xin.shape
    v = np.zeros(p) if v is None else np.asarray(v, dtype=np.float64).ravel()
    om = y > 0
    dim = 2 * n

    # rows act on z = (w, t)
    a_eq = np.hstack([xin[:, om].T, np.zeros((int(om.sum()), n))])
    b_eq = y[om]
    a_ub = np.vstack([
        np.hstack([xin[:, ~om].T, np.zeros((int((~om).sum()), n))]),
        np.hstack([np.eye(n), -np.eye(n)]),
        np.hstack([-np.eye(n), -np.eye(n)]),
    ])
    b_ub = np.concatenate([v[~om], np.zeros(2 * n)])

    rank_eq = np.linalg.matrix_rank(a_eq) if a_eq.shape[0] else 0
    if rank_eq:
        # keep an independent subset of equality rows; the rest are checked below
        _, _, piv = scipy.linalg.qr(a_eq.T, pivoting=True)
        keep = np.sort(piv[:rank_eq])
        a_eq_ind, b_eq_ind = a_eq[keep], b_eq[keep]
    else:
        a_eq_ind, b_eq_ind = a_eq[:0], b_eq[:0]

    need = dim - rank_eq
    scale = max(1.0, float(np.abs(xin).max(initial=0.0)), float(np.abs(y).max(initial=0.0)))
    best = []
    count = 0
    for rows in itertools.combinations(range(a_ub.shape[0]), need):
        a = np.vstack([a_eq_ind, a_ub[list(rows)]])
        b = np.concatenate([b_eq_ind, b_ub[list(rows)]])
        if np.linalg.matrix_rank(a) < dim:
            continue
        z = np.linalg.solve(a, b)
        if np.any(a_ub @ z - b_ub > tol * scale):
            continue
        if a_eq.shape[0] and np.max(np.abs(a_eq @ z - b_eq)) > tol * scale:
            continue
        count += 1
        best.append(z)
    if not best:
        raise ValueError("program is infeasible")
    objs = np.array([np.sum(np.abs(z[:n])) for z in best])
    fmin = objs.min()
    opt = [best[i][:n] for i in np.flatnonzero(objs <= fmin + 1e-9 * max(1.0, fmin))]
    w = opt[0]
    unique = all(np.max(np.abs(o - w)) <= 1e-8 * max(1.0, np.abs(w).max()) for o in opt)
    return OracleResult(w=w, objective=float(fmin), unique=unique, n_vertices=count)
