"""Net-Trim for convolutional layers.

Tensors use ``(batch, channel, row, col)`` layout for data and
``(out_channel, in_channel, row, col)`` for filters.  Convolution is
cross-correlation (no kernel flip) with explicit stride and zero padding.
The weight-to-output map for a fixed input is a linear operator; its
adjoint drives a conjugate-gradient solve for the least-squares ADMM step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .admm import AdmmConfig, PruneResult, run_admm, weight_scale
from .tensor import l1_norm, support

__all__ = [
    "ConvSpec",
    "ConvLayer",
    "LinearOperator",
    "ConvOperator",
    "CgResult",
    "conv_apply",
    "conv_adjoint",
    "cg_solve",
    "prune_conv_layer",
]


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    in_h: int
    in_w: int
    batch: int = 1
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        object.__setattr__(self, "padding", tuple(int(p) for p in self.padding))
        for name in ("kernel_h", "kernel_w", "in_channels", "out_channels", "in_h", "in_w", "batch"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError("kernel does not fit in the padded input")

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.padding[0] - self.kernel_h) // self.stride[0] + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.padding[1] - self.kernel_w) // self.stride[1] + 1

    @property
    def input_shape(self) -> tuple:
        return (self.batch, self.in_channels, self.in_h, self.in_w)

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def output_shape(self) -> tuple:
        return (self.batch, self.out_channels, self.out_h, self.out_w)


@dataclass(frozen=True)
class ConvLayer:
    spec: ConvSpec
    filters: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.filters, dtype=np.float64)
        if f.shape != self.spec.weight_shape:
            raise ValueError(f"filters shape {f.shape} != {self.spec.weight_shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("filters contain non-finite entries")
        object.__setattr__(self, "filters", f)


@dataclass(frozen=True)
class LinearOperator:
    """A linear map between two tensor spaces together with its adjoint."""

    apply: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    in_shape: tuple
    out_shape: tuple

    def scaled(self, c: float) -> "LinearOperator":
        return LinearOperator(lambda w: c * self.apply(w), lambda z: c * self.adjoint(z),
                              self.in_shape, self.out_shape)

    def matrix(self) -> np.ndarray:
        """Materialize as a dense ``prod(out_shape) x prod(in_shape)`` matrix."""
        n = int(np.prod(self.in_shape))
        cols = []
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            cols.append(self.apply(e.reshape(self.in_shape)).ravel())
        return np.stack(cols, axis=1)


def _columns(spec: ConvSpec, xin: np.ndarray) -> np.ndarray:
    xin = np.asarray(xin, dtype=np.float64)
    if xin.shape != spec.input_shape:
        raise ValueError(f"input shape {xin.shape} != {spec.input_shape}")
    ph, pw = spec.padding
    xp = np.pad(xin, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    win = win[:, :, ::spec.stride[0], ::spec.stride[1]][:, :, :spec.out_h, :spec.out_w]
    # (B, Ho, Wo, Cin, kh, kw) -> rows are output positions
    win = win.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(win).reshape(spec.batch * spec.out_h * spec.out_w, -1)


class ConvOperator(LinearOperator):
    """``W -> conv(Xin, W)`` for a fixed input, with cached patch matrix."""

    def __init__(self, spec: ConvSpec, xin: np.ndarray):
        cols = _columns(spec, xin)
        b, co, ho, wo = spec.output_shape

        def apply(w):
            w = np.asarray(w, dtype=np.float64)
            if w.shape != spec.weight_shape:
                raise ValueError(f"filter shape {w.shape} != {spec.weight_shape}")
            out = cols @ w.reshape(co, -1).T
            return out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)

        def adjoint(z):
            z = np.asarray(z, dtype=np.float64)
            if z.shape != spec.output_shape:
                raise ValueError(f"output tensor shape {z.shape} != {spec.output_shape}")
            zm = z.transpose(0, 2, 3, 1).reshape(-1, co)
            return (zm.T @ cols).reshape(spec.weight_shape)

        super().__init__(apply, adjoint, spec.weight_shape, spec.output_shape)
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "columns", cols)


def conv_apply(spec: ConvSpec, xin: np.ndarray, w: np.ndarray) -> np.ndarray:
    return ConvOperator(spec, xin).apply(w)


def conv_adjoint(spec: ConvSpec, xin: np.ndarray, z: np.ndarray) -> np.ndarray:
    return ConvOperator(spec, xin).adjoint(z)


@dataclass
class CgResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def cg_solve(op: LinearOperator, b: np.ndarray, c: np.ndarray, max_iter: int = 500,
             tol: float = 1e-10, x0: Optional[np.ndarray] = None,
             restart: int = 50) -> CgResult:
    """Solve ``A*(A(W)) + W = A*(B) + C`` by operator conjugate gradient.

    The step and direction updates are the textbook ones on the normal
    operator ``A*A + I``.  Every `restart` iterations the residual is
    recomputed from scratch and the search direction reset.  `history` holds
    the relative residual after each iteration.  If `max_iter` is reached the
    iterate with the smallest recursive residual is returned.
    """
    rhs = op.adjoint(b) + c
    nrhs = np.sqrt(np.sum(rhs * rhs))
    if nrhs == 0.0:
        return CgResult(np.zeros(op.in_shape), 0.0, 0, True, [])

    def normal(w):
        return op.adjoint(op.apply(w)) + w

    if x0 is None:
        w = np.zeros(op.in_shape)
        r = rhs.copy()
    else:
        w = np.array(x0, dtype=np.float64)
        r = rhs - normal(w)
    p = r.copy()
    rr = np.sum(r * r)
    history = []
    best_w, best_res = w.copy(), np.sqrt(rr) / nrhs
    if best_res <= tol:
        return CgResult(w, best_res, 0, True, history)
    k = 0
    for k in range(1, max_iter + 1):
        t = op.apply(p)
        alpha = rr / (np.sum(t * t) + np.sum(p * p))
        w = w + alpha * p
        r = r - alpha * (op.adjoint(t) + p)
        rr_new = np.sum(r * r)
        if k % restart == 0:
            r = rhs - normal(w)
            rr_new = np.sum(r * r)
            p = r.copy()
        else:
            p = r + (rr_new / rr) * p
        rr = rr_new
        res = np.sqrt(rr) / nrhs
        history.append(float(res))
        if res < best_res:
            best_w, best_res = w, res
        if res <= tol:
            return CgResult(w, float(res), k, True, history)
    return CgResult(best_w, float(best_res), k, False, history)


def _operator_scale(op: ConvOperator) -> float:
    cols = op.columns
    ms = float(np.sum(cols * cols)) / max(cols.shape[0], 1)
    return 1.0 / np.sqrt(ms) if ms > 0 else 1.0


def prune_conv_layer(spec: ConvSpec, xin, xout, v=None, cfg: AdmmConfig = AdmmConfig(),
                     mask=None, cg_tol: float = 1e-8, cg_tol_final: float = 1e-10,
                     cg_max_iter: Optional[int] = None) -> PruneResult:
    """Operator-form ADMM for one convolutional layer.

    Same contract as :func:`nettrim.admm.prune_layer`, with filters of shape
    ``spec.weight_shape`` in place of the weight matrix.  The least-squares
    step is solved by :func:`cg_solve`, warm-started from the previous
    iterate, to `cg_tol`, and to `cg_tol_final` once the outer residuals
    come within 10x of their thresholds or the last ten iterations begin.
    """
    op = ConvOperator(spec, xin)
    xout = np.asarray(xout, dtype=np.float64)
    if xout.shape != spec.output_shape:
        raise ValueError(f"Xout shape {xout.shape} != {spec.output_shape}")
    v = np.zeros_like(xout) if v is None else np.asarray(v, dtype=np.float64)
    if v.shape != xout.shape:
        raise ValueError("V shape does not match Xout")
    om = support(xout, cfg.support_threshold) if mask is None else np.asarray(mask, dtype=bool)
    c = _operator_scale(op) if cfg.scale_data else 1.0
    ops = op.scaled(c)
    n_w = int(np.prod(spec.weight_shape))
    cg_iters = cg_max_iter or max(2 * n_w, 100)

    def solve_ls(bb, cc, w_prev, tight):
        res = cg_solve(ops, bb, cc, max_iter=cg_iters, tol=cg_tol_final if tight else cg_tol,
                       x0=w_prev)
        return res.x

    a = 1.0
    if cfg.scale_weights:
        a = weight_scale(cg_solve(ops, c * xout, np.zeros(spec.weight_shape),
                                  max_iter=cg_iters, tol=1e-4).x)
    k = c / a
    state, it, r, s, conv = run_admm(ops.apply, solve_ls, k * xout, k * v, om,
                                     k * cfg.epsilon, spec.weight_shape, cfg)
    state.w2 = a * state.w2
    state.w3 = a * state.w3
    keep = (state.w2 != 0) & (np.abs(state.w3) > cfg.zero_tol)
    weights = np.where(keep, state.w3, 0.0)
    # feasibility in matrix form: rows of the patch matrix are the samples
    z = op.apply(weights)
    tol = cfg.feas_tol * max(1.0, float(np.sqrt(np.sum(xout[om] ** 2))))
    band = float(np.sqrt(np.sum(np.where(om, z - xout, 0.0) ** 2)))
    worst = float(np.where(om, -np.inf, z - v).max(initial=-np.inf))
    viol = max(band - cfg.epsilon, worst, 0.0)
    return PruneResult(
        weights=weights,
        iterations=it,
        primal_residual=r,
        dual_residual=s,
        objective=l1_norm(weights),
        feasible=bool(viol <= tol and conv),
        constraint_violation=viol,
        converged=conv,
        nnz=int(np.count_nonzero(state.w2)),
        data_scale=c,
        weight_scale=a,
        state=state,
    )
