"""Consensus ADMM for the single-layer Net-Trim program.

For a layer with input ``Xin`` (``N x P``) and trained output ``Xout``
(``M x P``) the solver finds the l1-minimal ``W`` (``N x M``) subject to::

    || (W.T @ Xin - Xout)[Omega] ||_F <= eps
    (W.T @ Xin)[~Omega] <= V[~Omega]

where ``Omega`` marks the strictly positive entries of ``Xout``.  The
problem is split into three copies of ``W``: ``W1`` lives in output space and
carries the constraint set, ``W2`` carries the l1 norm, and ``W3`` ties both
together through a ridge-type least-squares solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .tensor import (
    SpdFactor,
    as_matrix,
    l1_norm,
    project_ball,
    project_orthant,
    soft_threshold,
    spd_factorize,
    spd_solve,
    support,
)

__all__ = [
    "AdmmConfig",
    "AdmmState",
    "PruneResult",
    "GramCache",
    "gram_cache",
    "run_admm",
    "prune_layer",
    "prune_neuron",
    "check_feasible",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdmmConfig:
    """Solver settings.

    ``scale_data`` rescales ``Xin``, ``Xout``, ``V`` and ``eps`` by a common
    factor so that the mean squared column norm of ``Xin`` is one.  The
    feasible set in ``W`` is unchanged by this, only the iteration count.
    ``scale_weights`` additionally solves for ``W / a`` with ``a`` the RMS of
    a ridge least-squares fit, which keeps the fixed l1 step ``1/rho`` in
    proportion to the weights; the minimizer is the same.  ``scale_rows``
    equilibrates the rows of ``Xin`` (an appended ones row next to small
    activations is the usual offender) and compensates with per-row l1
    weights, again without changing the minimizer.  ``direct_determined``
    solves an ``eps == 0`` column by least squares when its equalities alone
    have a unique solution (the program's feasible set is then one point);
    ADMM handles the remaining columns.
    ``feas_tol`` is relative to ``max(1, ||Xout[Omega]||_F)``.
    """

    rho: float = 1.0
    max_iter: int = 10000
    tol_abs: float = 1e-6
    tol_rel: float = 1e-6
    epsilon: float = 0.0
    adaptive_rho: bool = False
    scale_data: bool = True
    scale_weights: bool = True
    scale_rows: bool = True
    direct_determined: bool = True
    support_threshold: float = 0.0
    feas_tol: float = 1e-5
    zero_tol: float = 1e-8

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.tol_abs > 0 and self.tol_rel > 0):
            raise ValueError("tolerances must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.support_threshold < 0:
            raise ValueError("support_threshold must be nonnegative")


@dataclass
class AdmmState:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    rho: float
    gram_factor: Optional[SpdFactor] = None


@dataclass
class PruneResult:
    """Outcome of one layer solve.

    ``weights`` is ``W3`` restricted to the support of ``W2`` with entries
    below ``zero_tol`` cleared.  Residuals are those of the (possibly
    rescaled) working problem; ``data_scale`` is the factor applied to the
    data and ``weight_scale`` the one applied to the weights.
    """

    weights: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    feasible: bool
    constraint_violation: float
    converged: bool
    nnz: int
    data_scale: float = 1.0
    weight_scale: float = 1.0
    state: Optional[AdmmState] = field(default=None, repr=False)
    direct_columns: list = field(default_factory=list)


@dataclass(frozen=True)
class GramCache:
    """``chol(c^2 D Xin Xin^T D + I)`` for a given input.

    ``D = diag(row_scale)`` equilibrates the rows of ``Xin`` and ``c`` is the
    global data scale applied after it.
    """

    scale: float
    factor: SpdFactor
    row_scale: Optional[np.ndarray] = None

    def scaled_input(self, xin: np.ndarray) -> np.ndarray:
        xr = xin if self.row_scale is None else self.row_scale[:, None] * xin
        return self.scale * xr


def data_scale(xin: np.ndarray) -> float:
    p = xin.shape[-1] if xin.ndim == 2 else 1
    ms = float(np.sum(xin * xin)) / max(p, 1)
    return 1.0 / np.sqrt(ms) if ms > 0 else 1.0


def row_scale(xin: np.ndarray) -> np.ndarray:
    """``1 / rms`` of each row of `xin` relative to their geometric mean; 1 for zero rows."""
    rms = np.sqrt(np.mean(xin * xin, axis=1))
    live = rms > 0
    d = np.ones(xin.shape[0])
    if live.any():
        d[live] = np.exp(np.mean(np.log(rms[live]))) / rms[live]
    return d


def gram_cache(xin: np.ndarray, scale_data: bool = True, scale_rows: bool = True) -> GramCache:
    xin = as_matrix(xin, "Xin")
    d = row_scale(xin) if scale_rows else None
    xr = xin if d is None else d[:, None] * xin
    c = data_scale(xr) if scale_data else 1.0
    xs = c * xr
    gram = xs @ xs.T
    gram[np.diag_indices_from(gram)] += 1.0
    return GramCache(c, spd_factorize(gram), d)


def weight_scale(w_ls: np.ndarray) -> float:
    """RMS magnitude of a least-squares fit, used to rescale the weight space."""
    a = float(np.sqrt(np.mean(w_ls * w_ls))) if w_ls.size else 0.0
    return a if np.isfinite(a) and a > 0 else 1.0


def check_feasible(w, xin, xout, v, eps, tol, mask=None, threshold=0.0):
    """Return ``(feasible, violation)`` of `w` for the layer constraint set.

    ``violation = max(band - eps, max((W.T Xin - V)[~Omega]), 0)`` where
    ``band`` is the Frobenius misfit on ``Omega``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    xout = np.atleast_2d(np.asarray(xout, dtype=np.float64))
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), xout.shape)
    om = support(xout, threshold) if mask is None else np.asarray(mask, dtype=bool)
    z = w.T @ np.asarray(xin, dtype=np.float64)
    band = float(np.sqrt(np.sum(np.where(om, z - xout, 0.0) ** 2)))
    over = np.where(om, -np.inf, z - v)
    worst = float(over.max(initial=-np.inf))
    viol = max(band - eps, worst, 0.0)
    return viol <= tol, viol


def run_admm(
    apply_op: Callable[[np.ndarray], np.ndarray],
    solve_ls: Callable[[np.ndarray, np.ndarray, np.ndarray, bool], np.ndarray],
    xout: np.ndarray,
    v: np.ndarray,
    mask: np.ndarray,
    eps: float,
    w_shape: tuple,
    cfg: AdmmConfig,
    l1_weights=None,
):
    """Generic consensus-ADMM loop shared by the dense and operator solvers.

    `apply_op` maps weights to output space.  ``solve_ls(B, C, W_prev,
    tight)`` must return the minimizer of
    ``0.5 ||apply_op(W) - B||^2 + 0.5 ||W - C||^2``; `tight` asks for extra
    accuracy near convergence.  `l1_weights` (broadcast against the weights)
    turns the objective into a weighted l1 norm.  Returns ``(state, iterations, r, s, converged)``.
    """
    mask_c = ~mask
    rho = cfg.rho
    lw = 1.0 if l1_weights is None else l1_weights
    w3 = np.zeros(w_shape)
    w2 = np.zeros(w_shape)
    u1 = np.zeros(xout.shape)
    u2 = np.zeros(w_shape)
    aw = apply_op(w3)
    w1 = np.zeros(xout.shape)
    n_pri = np.sqrt(xout.size + w3.size)
    r = s = np.inf
    converged = False
    tight = False
    k = 0
    for k in range(1, cfg.max_iter + 1):
        y = aw - u1
        w1 = project_ball(y, xout, mask, eps) + project_orthant(y, v, mask_c)
        w2 = soft_threshold(w3 - u2, lw / rho)
        tight = tight or k > cfg.max_iter - 10
        w3_new = solve_ls(w1 + u1, w2 + u2, w3, tight)
        aw_new = apply_op(w3_new)
        r1 = w1 - aw_new
        r2 = w2 - w3_new
        u1 += r1
        u2 += r2
        r = np.sqrt(np.sum(r1 * r1) + np.sum(r2 * r2))
        s = rho * np.sqrt(np.sum((aw_new - aw) ** 2) + np.sum((w3_new - w3) ** 2))
        w3, aw = w3_new, aw_new
        eps_pri = n_pri * cfg.tol_abs + cfg.tol_rel * max(
            np.sqrt(np.sum(w1 * w1) + np.sum(w2 * w2)),
            np.sqrt(np.sum(aw * aw) + np.sum(w3 * w3)))
        eps_dual = n_pri * cfg.tol_abs + cfg.tol_rel * rho * np.sqrt(
            np.sum(u1 * u1) + np.sum(u2 * u2))
        if r <= eps_pri and s <= eps_dual:
            converged = True
            break
        if r <= 10 * eps_pri and s <= 10 * eps_dual:
            tight = True
        if cfg.adaptive_rho and k % 10 == 0 and k <= cfg.max_iter // 2:
            # residual balancing, frozen for the second half so the usual
            # fixed-rho convergence argument applies; U = y / rho is rescaled
            if r > 10 * s:
                rho *= 2.0
                u1 /= 2.0
                u2 /= 2.0
            elif s > 10 * r:
                rho /= 2.0
                u1 *= 2.0
                u2 *= 2.0
    state = AdmmState(w1, w2, w3, u1, u2, rho)
    return state, k, float(r), float(s), converged


def _finalize(state: AdmmState, zero_tol: float):
    # W3 is dense-but-tiny off the support of W2, which is exactly sparse
    keep = (state.w2 != 0) & (np.abs(state.w3) > zero_tol)
    return np.where(keep, state.w3, 0.0), int(np.count_nonzero(state.w2))


def prune_layer(xin, xout, v=None, cfg: AdmmConfig = AdmmConfig(), mask=None,
                gram: Optional[GramCache] = None) -> PruneResult:
    """Solve the Net-Trim program for one dense layer.

    Parameters
    ----------
    xin : ndarray, shape (N, P)
        Layer input, one sample per column.
    xout : ndarray, shape (M, P)
        Trained layer output.
    v : ndarray, shape (M, P), optional
        Upper bound on the pre-activation outside the support; zero if omitted.
    cfg : AdmmConfig
        ``cfg.epsilon`` is the Frobenius slack on the support.
    mask : ndarray of bool, optional
        Overrides ``support(xout, cfg.support_threshold)``; used for layers
        without an activation, where every entry is an equality-band entry.
    gram : GramCache, optional
        Reuse a factorization computed by :func:`gram_cache` for this `xin`.

    Returns
    -------
    PruneResult
    """
    xin = as_matrix(xin, "Xin")
    xout = as_matrix(xout, "Xout")
    if xin.shape[1] != xout.shape[1]:
        raise ValueError(f"Xin has {xin.shape[1]} samples, Xout has {xout.shape[1]}")
    v = np.zeros_like(xout) if v is None else as_matrix(v, "V")
    if v.shape != xout.shape:
        raise ValueError(f"V shape {v.shape} does not match Xout {xout.shape}")
    om = support(xout, cfg.support_threshold) if mask is None else np.asarray(mask, dtype=bool)
    if om.shape != xout.shape:
        raise ValueError("mask shape does not match Xout")
    if gram is None:
        gram = gram_cache(xin, cfg.scale_data, cfg.scale_rows)
    elif gram.factor.dimension != xin.shape[0]:
        raise ValueError("cached Gram factor does not match Xin")
    n, m = xin.shape[0], xout.shape[0]
    tol = cfg.feas_tol * max(1.0, float(np.sqrt(np.sum(xout[om] ** 2))))

    direct = {}
    if cfg.epsilon == 0 and cfg.direct_determined:
        for j in range(m):
            w = _determined_column(xin, xout[j], v[j], om[j], tol)
            if w is not None:
                direct[j] = w
    rest = [j for j in range(m) if j not in direct]

    w2 = np.zeros((n, m))
    w3 = np.zeros((n, m))
    u1 = np.zeros(xout.shape)
    u2 = np.zeros((n, m))
    w1 = np.zeros(xout.shape)
    for j, w in direct.items():
        w2[:, j] = w3[:, j] = w
        w1[j] = w @ xin
    it, r, s, conv, a, rho = 0, 0.0, 0.0, True, 1.0, cfg.rho
    c = gram.scale
    if rest:
        xs = gram.scaled_input(xin)
        # working variable is W / (a D): W.T Xin == (W/D).T (D Xin), ||W||_1 = sum_i d_i |(W/D)_i|
        d = np.ones(n) if gram.row_scale is None else gram.row_scale

        def apply_op(w):
            return w.T @ xs

        def solve_ls(b, cc, w_prev, tight):
            return spd_solve(gram.factor, xs @ b.T + cc)

        xo, vo, mo = xout[rest], v[rest], om[rest]
        a = weight_scale(solve_ls(c * xo, 0.0, None, False)) if cfg.scale_weights else 1.0
        k = c / a
        l1w = None if gram.row_scale is None else (d / np.mean(d))[:, None]
        sub, it, r, s, conv = run_admm(
            apply_op, solve_ls, k * xo, k * vo, mo, k * cfg.epsilon, (n, len(rest)), cfg,
            l1_weights=l1w)
        w2[:, rest] = a * d[:, None] * sub.w2
        w3[:, rest] = a * d[:, None] * sub.w3
        w1[rest] = sub.w1 / k
        u1[rest], u2[:, rest] = sub.u1, sub.u2
        rho = sub.rho
    state = AdmmState(w1, w2, w3, u1, u2, rho, gram.factor)
    weights, support_count = _finalize(state, cfg.zero_tol)
    ok, viol = check_feasible(weights, xin, xout, v, cfg.epsilon, tol, mask=om)
    if not conv:
        log.warning("ADMM stopped at max_iter=%d (r=%.3g, s=%.3g)", cfg.max_iter, r, s)
    return PruneResult(
        weights=weights,
        iterations=it,
        primal_residual=r,
        dual_residual=s,
        objective=l1_norm(weights),
        feasible=bool(ok and conv),
        constraint_violation=viol,
        converged=conv,
        nnz=support_count,
        data_scale=c,
        weight_scale=a,
        state=state,
        direct_columns=sorted(direct),
    )


def _determined_column(xin, y, v, om, tol):
    """Unique feasible point of an equality-mode column, or None.

    When ``Xin[:, Omega]`` has full row rank the equalities alone pin ``w``
    down, so the least-squares solution is the whole feasible set provided
    it is consistent and satisfies the inequalities.
    """
    n = xin.shape[0]
    if int(om.sum()) < n:
        return None
    a = xin[:, om].T
    w, _, rank, sv = np.linalg.lstsq(a, y[om], rcond=None)
    if rank < n or sv[-1] < 1e-8 * sv[0]:
        return None
    if np.linalg.norm(a @ w - y[om]) > tol:
        return None
    if np.any(w @ xin[:, ~om] - v[~om] > tol):
        return None
    return w


def prune_neuron(xin, xout_row, eps: float = 0.0, cfg: AdmmConfig = AdmmConfig(),
                 gram: Optional[GramCache] = None) -> np.ndarray:
    """Retrain one output neuron; returns its weight vector of length N.

    With ``eps == 0`` the support constraint is an exact equality.
    """
    row = np.asarray(xout_row, dtype=np.float64).reshape(1, -1)
    layer_cfg = cfg if cfg.epsilon == eps else replace(cfg, epsilon=eps)
    res = prune_layer(xin, row, None, layer_cfg, gram=gram)
    return res.weights[:, 0]
