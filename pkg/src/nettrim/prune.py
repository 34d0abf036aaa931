"""Whole-network pruning: parallel and cascade schemes, bound checks, baseline.

Layers with a bias are pruned in absorbed form (bias as an extra weight row
fed by a constant-one input row).  Layers without an activation use a full
support mask, so their constraint is a plain Frobenius band.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .admm import AdmmConfig, PruneResult, prune_layer
from .network import (
    Layer,
    Network,
    absorb_bias,
    augment_ones,
    denormalize,
    forward,
    layer_forward,
    normalize,
    relative_total_discrepancy,
    split_bias,
)
from .tensor import frobenius, l1_norm, masked_frobenius, nnz, percent_zeros, support

__all__ = [
    "PruneConfig",
    "LayerReport",
    "BoundReport",
    "PruneReport",
    "LayerSolveError",
    "parallel_prune",
    "cascade_prune",
    "prune_network",
    "verify_bounds",
    "magnitude_truncate",
    "keep_counts_for_percent",
    "subset_columns",
]

log = logging.getLogger(__name__)


class LayerSolveError(RuntimeError):
    def __init__(self, layer: int, message: str):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class PruneConfig:
    """Network-level pruning settings.

    `epsilons` is a scalar broadcast to every layer or a per-layer sequence
    (parallel mode); in cascade mode only the first value is used.  `gammas`
    is a scalar or a sequence of ``L - 1`` inflation rates for layers 2..L.
    """

    mode: str = "parallel"
    epsilons: Union[float, Sequence[float]] = 0.0
    gammas: Union[float, Sequence[float]] = 1.0
    admm: AdmmConfig = AdmmConfig()
    normalize_first: bool = False
    support_threshold: float = 0.0
    bound_slack: float = 1e-5
    serial: bool = True
    workers: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("parallel", "cascade"):
            raise ValueError(f"unknown mode {self.mode!r}")
        eps = np.atleast_1d(np.asarray(self.epsilons, dtype=float))
        if np.any(eps < 0):
            raise ValueError("epsilons must be nonnegative")
        gam = np.atleast_1d(np.asarray(self.gammas, dtype=float))
        if np.any(gam < 1):
            raise ValueError("inflation rates must be >= 1")

    def layer_epsilons(self, depth: int) -> list:
        eps = np.atleast_1d(np.asarray(self.epsilons, dtype=float))
        if eps.size == 1:
            return [float(eps[0])] * depth
        if eps.size != depth:
            raise ValueError(f"{eps.size} epsilons given for {depth} layers")
        return [float(e) for e in eps]

    def layer_gammas(self, depth: int) -> list:
        """Inflation rates for layers 2..L (length ``depth - 1``)."""
        gam = np.atleast_1d(np.asarray(self.gammas, dtype=float))
        if gam.size == 1:
            return [float(gam[0])] * (depth - 1)
        if gam.size != depth - 1:
            raise ValueError(f"{gam.size} gammas given for {depth - 1} layers")
        return [float(g) for g in gam]


@dataclass
class LayerReport:
    index: int
    shape: list
    has_bias: bool
    epsilon: float
    nnz_before: int
    nnz_after: int
    nnz_before_with_bias: int
    nnz_after_with_bias: int
    percent_zeros_before: float
    percent_zeros_after: float
    percent_zeros_after_with_bias: float
    l1_before: float
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    constraint_violation: float
    converged: bool
    feasible: bool
    gamma: Optional[float] = None


@dataclass
class BoundReport:
    theorem: str
    discrepancies: list
    bounds: list
    satisfied: list
    slack: float
    normalized_units: bool
    bound_satisfied: Optional[bool]


@dataclass
class PruneReport:
    mode: str
    layers: list
    rtd: Optional[float]
    bounds: Optional[BoundReport]
    normalized: bool
    scales: Optional[list]
    all_converged: bool
    total_nnz_before: int = 0
    total_nnz_after: int = 0
    notes: list = field(default_factory=list)

    @property
    def bound_satisfied(self) -> Optional[bool]:
        return None if self.bounds is None else self.bounds.bound_satisfied

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bound_satisfied"] = self.bound_satisfied
        return _jsonable(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _layer_problem(layer: Layer, xin: np.ndarray):
    """Combined weight matrix and matching input for a layer."""
    if layer.has_bias:
        return absorb_bias(layer).weights, augment_ones(xin)
    return layer.weights, xin


def _layer_mask(layer: Layer, xout: np.ndarray, threshold: float) -> np.ndarray:
    if layer.apply_activation:
        return support(xout, threshold)
    return np.ones(xout.shape, dtype=bool)


def _rebuild(layer: Layer, w: np.ndarray) -> Layer:
    if layer.has_bias:
        return split_bias(w, layer.apply_activation)
    return Layer(w, None, layer.apply_activation)


def _layer_report(i, layer, w_orig, res: PruneResult, eps, gamma=None) -> LayerReport:
    conn_before = layer.weights
    conn_after = res.weights[: conn_before.shape[0]]
    return LayerReport(
        index=i,
        shape=list(w_orig.shape),
        has_bias=layer.has_bias,
        epsilon=eps,
        nnz_before=nnz(conn_before),
        nnz_after=nnz(conn_after),
        nnz_before_with_bias=nnz(w_orig),
        nnz_after_with_bias=nnz(res.weights),
        percent_zeros_before=percent_zeros(conn_before),
        percent_zeros_after=percent_zeros(conn_after),
        percent_zeros_after_with_bias=percent_zeros(res.weights),
        l1_before=l1_norm(w_orig),
        objective=res.objective,
        iterations=res.iterations,
        primal_residual=res.primal_residual,
        dual_residual=res.dual_residual,
        constraint_violation=res.constraint_violation,
        converged=res.converged,
        feasible=res.feasible,
        gamma=gamma,
    )


def _workers(cfg: PruneConfig, n_tasks: int) -> int:
    if cfg.serial:
        return 1
    cap = cfg.workers or int(os.environ.get("NETTRIM_THREADS", "0") or 0) or (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


def parallel_prune(net: Network, x: np.ndarray, cfg: PruneConfig):
    """Prune every layer against the original network's own layer outputs.

    Returns ``(pruned_network, report)``.  With ``cfg.normalize_first`` the
    solves run on the l1-normalized network and the result is scaled back,
    so the returned network is a drop-in replacement for `net`.
    """
    if cfg.mode != "parallel":
        raise ValueError("parallel_prune needs mode='parallel'")
    work, scales = normalize(net) if cfg.normalize_first else (net, None)
    eps = cfg.layer_epsilons(net.depth)
    outs = forward(work, x)

    def solve(i):
        layer = work.layers[i]
        w_orig, xin = _layer_problem(layer, outs[i])
        xout = outs[i + 1]
        mask = _layer_mask(layer, xout, cfg.support_threshold)
        acfg = replace(cfg.admm, epsilon=eps[i], support_threshold=cfg.support_threshold)
        try:
            res = prune_layer(xin, xout, None, acfg, mask=mask)
        except (ValueError, ArithmeticError) as exc:
            raise LayerSolveError(i, str(exc)) from exc
        return w_orig, res

    n_workers = _workers(cfg, net.depth)
    if n_workers == 1:
        results = [solve(i) for i in range(net.depth)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(solve, range(net.depth)))

    new_layers, reports = [], []
    for i, (layer, (w_orig, res)) in enumerate(zip(work.layers, results)):
        new_layers.append(_rebuild(layer, res.weights))
        reports.append(_layer_report(i, layer, w_orig, res, eps[i]))
    pruned = work.with_layers(new_layers)
    if scales is not None:
        pruned = denormalize(pruned, scales)
    return pruned, _assemble(net, pruned, x, cfg, reports, scales)


def cascade_prune(net: Network, x: np.ndarray, cfg: PruneConfig):
    """Sequential pruning feeding each pruned layer's output forward.

    Layer 1 uses ``cfg.epsilons`` (first value).  Layer ``l >= 2`` uses
    ``eps_l = gamma_l * ||(W_l^T Xhat_{l-1} - X_l)[Omega]||_F`` and the slack
    ``V = W_l^T Xhat_{l-1}``, which keeps the original ``W_l`` feasible.
    A solve returning an infeasible point raises :class:`LayerSolveError`.
    """
    if cfg.mode != "cascade":
        raise ValueError("cascade_prune needs mode='cascade'")
    work, scales = normalize(net) if cfg.normalize_first else (net, None)
    eps1 = float(np.atleast_1d(np.asarray(cfg.epsilons, dtype=float))[0])
    gammas = cfg.layer_gammas(net.depth)
    outs = forward(work, x)

    new_layers, reports = [], []
    xhat = outs[0]
    for i, layer in enumerate(work.layers):
        w_orig, xin = _layer_problem(layer, xhat)
        xout = outs[i + 1]
        mask = _layer_mask(layer, xout, cfg.support_threshold)
        if i == 0:
            eps, v, gamma = eps1, np.zeros_like(xout), None
        else:
            gamma = gammas[i - 1]
            z = w_orig.T @ xin
            eps = gamma * masked_frobenius(z - xout, mask)
            v = z
        acfg = replace(cfg.admm, epsilon=eps, support_threshold=cfg.support_threshold)
        try:
            res = prune_layer(xin, xout, v, acfg, mask=mask)
        except (ValueError, ArithmeticError) as exc:
            raise LayerSolveError(i, str(exc)) from exc
        tol = acfg.feas_tol * max(1.0, masked_frobenius(xout, mask))
        if res.constraint_violation > tol:
            raise LayerSolveError(
                i, f"solver returned an infeasible point (violation {res.constraint_violation:.3g});"
                   " the original weights are feasible, so this is a solver failure")
        new = _rebuild(layer, res.weights)
        new_layers.append(new)
        reports.append(_layer_report(i, layer, w_orig, res, eps, gamma))
        xhat = layer_forward(new, xhat)

    pruned = work.with_layers(new_layers)
    if scales is not None:
        pruned = denormalize(pruned, scales)
    return pruned, _assemble(net, pruned, x, cfg, reports, scales)


def prune_network(net: Network, x: np.ndarray, cfg: PruneConfig):
    if cfg.mode == "parallel":
        return parallel_prune(net, x, cfg)
    return cascade_prune(net, x, cfg)


def _assemble(net, pruned, x, cfg, reports, scales) -> PruneReport:
    out_orig = forward(net, x)[-1]
    out_new = forward(pruned, x)[-1]
    rtd = relative_total_discrepancy(out_new, out_orig) if frobenius(out_orig) > 0 else None
    bounds = verify_bounds(net, pruned, x, cfg, reports=reports)
    return PruneReport(
        mode=cfg.mode,
        layers=reports,
        rtd=rtd,
        bounds=bounds,
        normalized=cfg.normalize_first,
        scales=None if scales is None else [float(s) for s in scales],
        all_converged=all(r.converged for r in reports),
        total_nnz_before=sum(r.nnz_before for r in reports),
        total_nnz_after=sum(r.nnz_after for r in reports),
    )


def verify_bounds(original: Network, pruned: Network, x: np.ndarray, cfg: PruneConfig,
                  reports: Optional[Sequence[LayerReport]] = None) -> BoundReport:
    """Measure per-layer output discrepancies against the theorem bounds.

    Parallel: ``||Xhat_l - X_l||_F <= sum_{j<=l} eps_j``.  Cascade:
    ``||Xhat_l - X_l||_F <= eps * prod_{j=2..l} gamma_j``.  When
    ``cfg.normalize_first`` is set, discrepancies are measured in the units of
    the normalized original network (divided by the cumulative layer scale),
    which is where the bounds apply; otherwise ``bound_satisfied`` is None.
    """
    if original.depth != pruned.depth:
        raise ValueError("networks differ in depth")
    outs = forward(original, x)
    outs_hat = forward(pruned, x)
    if cfg.normalize_first:
        _, scales = normalize(original)
        cum = np.cumprod(scales)
    else:
        cum = np.ones(original.depth)
    disc = [frobenius(outs_hat[i + 1] - outs[i + 1]) / cum[i] for i in range(original.depth)]
    if cfg.mode == "parallel":
        eps = cfg.layer_epsilons(original.depth)
        bounds = list(np.cumsum(eps))
        theorem = "parallel: sum of layer epsilons"
    else:
        eps1 = float(np.atleast_1d(np.asarray(cfg.epsilons, dtype=float))[0])
        gammas = cfg.layer_gammas(original.depth)
        bounds = [eps1 * float(np.prod(gammas[:i])) for i in range(original.depth)]
        theorem = "cascade: epsilon times product of inflation rates"
    sat = [bool(d <= b + cfg.bound_slack) for d, b in zip(disc, bounds)]
    return BoundReport(
        theorem=theorem,
        discrepancies=[float(d) for d in disc],
        bounds=[float(b) for b in bounds],
        satisfied=sat,
        slack=cfg.bound_slack,
        normalized_units=cfg.normalize_first,
        bound_satisfied=all(sat) if cfg.normalize_first else None,
    )


def magnitude_truncate(net: Network, keep_per_layer: Sequence[int]) -> Network:
    """Keep the `keep` largest-magnitude weights of each layer, zero the rest.

    Biases are left untouched.  Ties go to the entry that comes first in
    row-major order.
    """
    if len(keep_per_layer) != net.depth:
        raise ValueError("one keep count per layer required")
    layers = []
    for layer, keep in zip(net.layers, keep_per_layer):
        w = layer.weights
        if not 0 <= keep <= w.size:
            raise ValueError(f"keep count {keep} outside [0, {w.size}]")
        flat = w.ravel()
        order = np.argsort(-np.abs(flat), kind="stable")
        out = np.zeros_like(flat)
        out[order[:keep]] = flat[order[:keep]]
        layers.append(Layer(out.reshape(w.shape), layer.bias, layer.apply_activation))
    return net.with_layers(layers)


def keep_counts_for_percent(net: Network, percent_zero: float) -> list:
    """Keep counts that zero (at least) `percent_zero` percent of each layer."""
    if not 0 <= percent_zero <= 100:
        raise ValueError("percent must be in [0, 100]")
    return [int(np.floor(l.weights.size * (100.0 - percent_zero) / 100.0 + 1e-9)) for l in net.layers]


def subset_columns(x: np.ndarray, k: Optional[int], seed: int) -> np.ndarray:
    """First `k` columns of `x` after a seeded shuffle; all columns if k is None."""
    if k is None:
        return x
    if not 1 <= k <= x.shape[1]:
        raise ValueError(f"subset size {k} outside [1, {x.shape[1]}]")
    perm = np.random.default_rng(seed).permutation(x.shape[1])
    return x[:, perm[:k]]
