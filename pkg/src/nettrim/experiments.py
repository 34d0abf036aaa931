"""Small-scale empirical checks of the recovery and statistics results.

Random numbers come from numpy's ``Generator(PCG64(seed))``; Gaussian draws
use its ziggurat ``standard_normal``.  Both are stable across platforms for a
given numpy release series, which is what the CSV reproducibility contract
relies on.  Every trial owns its own stream keyed by ``(seed, P, trial)`` so
results do not depend on scheduling.
"""

from __future__ import annotations

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import isotonic_regression

from .admm import AdmmConfig, prune_neuron
from .network import Layer, Network, forward, relative_total_discrepancy
from .prune import PruneConfig, magnitude_truncate, prune_network
from .tensor import nnz

__all__ = [
    "RNG_ALGORITHM",
    "make_rng",
    "trial_seed",
    "gen_gaussian",
    "gen_sparse_weights",
    "RecoveryTrialSpec",
    "TrialOutcome",
    "recovery_trial",
    "recovery_trial_detail",
    "PhaseCurve",
    "phase_transition",
    "TrendCheck",
    "isotonic_trend_check",
    "success_crossing",
    "parse_grid",
    "VirtualStats",
    "virtual_stats",
    "fit_tail_kappa",
    "TailFit",
    "BivariateCheck",
    "bivariate_reduction_check",
    "LayerTail",
    "subgaussian_flow_diagnostic",
    "gen_planted_network",
    "BaselineComparison",
    "compare_with_truncation",
]

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.random.PCG64 + Generator.standard_normal (ziggurat)"

# the recovery solve: successes converge within a few hundred iterations,
# failures would otherwise burn the whole budget
RECOVERY_ADMM = AdmmConfig(tol_abs=1e-9, tol_rel=1e-9, max_iter=5000)

SeedLike = Union[int, np.random.SeedSequence]


def make_rng(seed: SeedLike) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def trial_seed(seed: int, *keys: int) -> int:
    """A 64-bit seed derived from `seed` and integer keys (e.g. P, trial index)."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0])


def gen_gaussian(n: int, p: int, seed: SeedLike) -> np.ndarray:
    """``n x p`` matrix of i.i.d. standard normal entries."""
    return make_rng(seed).standard_normal((n, p))


def gen_sparse_weights(n: int, s: int, seed: SeedLike, min_abs: float = 0.1) -> np.ndarray:
    """Length-`n` vector with a uniformly random support of size `s`.

    Nonzeros are standard normal, redrawn while any magnitude is below
    `min_abs` so that a relative recovery tolerance stays meaningful.
    """
    if not 0 <= s <= n:
        raise ValueError(f"sparsity {s} out of range for dimension {n}")
    rng = make_rng(seed)
    w = np.zeros(n)
    idx = np.sort(rng.choice(n, size=s, replace=False))
    vals = rng.standard_normal(s)
    small = np.abs(vals) < min_abs
    while np.any(small):
        vals[small] = rng.standard_normal(int(small.sum()))
        small = np.abs(vals) < min_abs
    w[idx] = vals
    return w


@dataclass(frozen=True)
class RecoveryTrialSpec:
    n: int
    s: int
    p: int
    seed: int
    success_tol: float = 1e-4

    def __post_init__(self):
        if self.n < 1 or not 0 <= self.s <= self.n:
            raise ValueError("need 0 <= s <= N and N >= 1")
        if self.p < 1:
            raise ValueError("P must be positive")
        if self.success_tol <= 0:
            raise ValueError("success_tol must be positive")


@dataclass(frozen=True)
class TrialOutcome:
    success: bool
    err: float
    omega: int
    solver_failed: bool = False


def _trial_data(spec: RecoveryTrialSpec):
    ss = np.random.SeedSequence(spec.seed)
    s_w, s_x = ss.spawn(2)
    w_star = gen_sparse_weights(spec.n, spec.s, s_w)
    x = gen_gaussian(spec.n, spec.p, s_x)
    return w_star, x


def recovery_trial_detail(spec: RecoveryTrialSpec,
                          cfg: AdmmConfig = RECOVERY_ADMM) -> TrialOutcome:
    """Draw ``X``, an s-sparse ``w*``, and try to recover ``w*`` from ``relu(X.T w*)``.

    The generator of the response is ``w*`` itself.  Success means
    ``||w_hat - w*||_inf <= success_tol * max(1, ||w*||_inf)``; an exception
    from the solver counts as a failure and is flagged.
    """
    w_star, x = _trial_data(spec)
    y = np.maximum(w_star @ x, 0.0)
    omega = int(np.count_nonzero(y > 0))
    try:
        w_hat = prune_neuron(x, y, 0.0, cfg)
    except (ValueError, ArithmeticError) as exc:
        log.warning("recovery trial seed=%d: solver failure: %s", spec.seed, exc)
        return TrialOutcome(False, float("inf"), omega, True)
    err = float(np.max(np.abs(w_hat - w_star)))
    ok = err <= spec.success_tol * max(1.0, float(np.max(np.abs(w_star), initial=0.0)))
    return TrialOutcome(bool(ok), err, omega)


def recovery_trial(spec: RecoveryTrialSpec, cfg: AdmmConfig = RECOVERY_ADMM):
    """Return ``(success, err)``; see :func:`recovery_trial_detail`."""
    out = recovery_trial_detail(spec, cfg)
    return out.success, out.err


@dataclass
class PhaseCurve:
    p_values: list
    rates: list
    trials: int
    n: int
    s: int
    seed: int
    successes: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("P,rate,trials,N,s,seed\n")
        for p, r in zip(self.p_values, self.rates):
            buf.write(f"{p},{r!r},{self.trials},{self.n},{self.s},{self.seed}\n")
        return buf.getvalue()


def parse_grid(text: str) -> list:
    """Parse ``start:stop:step`` (inclusive stop) or a comma list into ascending ints."""
    text = text.strip()
    try:
        if ":" in text:
            parts = [int(t) for t in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, stop, step = parts
            if step <= 0 or start < 1 or stop < start:
                raise ValueError
            grid = list(range(start, stop + 1, step))
        else:
            grid = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValueError(f"malformed grid {text!r}; expected start:stop:step or a comma list") from None
    if not grid or any(g < 1 for g in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"grid {text!r} must be nonempty, positive and strictly ascending")
    return grid


def phase_transition(n: int, s: int, p_grid: Sequence[int], trials: int, seed: int,
                     cfg: AdmmConfig = RECOVERY_ADMM, success_tol: float = 1e-4,
                     workers: int = 1) -> PhaseCurve:
    """Empirical success rate of exact recovery at each sample count in `p_grid`."""
    p_grid = [int(p) for p in p_grid]
    if any(b <= a for a, b in zip(p_grid, p_grid[1:])):
        raise ValueError("P grid must be strictly ascending")
    if trials < 1:
        raise ValueError("trials must be positive")
    specs = [RecoveryTrialSpec(n, s, p, trial_seed(seed, p, t), success_tol)
             for p in p_grid for t in range(trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda sp: recovery_trial(sp, cfg)[0], specs))
    else:
        outs = [recovery_trial(sp, cfg)[0] for sp in specs]
    succ = [int(sum(outs[i * trials:(i + 1) * trials])) for i in range(len(p_grid))]
    return PhaseCurve(p_grid, [k / trials for k in succ], trials, n, s, seed, succ)


@dataclass
class TrendCheck:
    fit: np.ndarray
    deviation: np.ndarray
    sigma: np.ndarray
    ok: bool


def isotonic_trend_check(curve: PhaseCurve, n_sigma: float = 3.0) -> TrendCheck:
    """Fit a nondecreasing curve to the rates and compare pointwise.

    The binomial sigma uses the fitted rate, clipped to ``[1/(2n), 1 - 1/(2n)]``
    so that a fit of exactly 0 or 1 does not demand a zero deviation.
    """
    rates = np.asarray(curve.rates, dtype=float)
    fit = isotonic_regression(rates, increasing=True).x
    t = curve.trials
    pc = np.clip(fit, 0.5 / t, 1 - 0.5 / t)
    sigma = np.sqrt(pc * (1 - pc) / t)
    dev = np.abs(rates - fit)
    return TrendCheck(fit, dev, sigma, bool(np.all(dev <= n_sigma * sigma)))


def success_crossing(curve: PhaseCurve, level: float = 0.95) -> Optional[int]:
    """Smallest grid P whose isotonic-fitted rate reaches `level` (None if never)."""
    fit = isotonic_regression(np.asarray(curve.rates, dtype=float), increasing=True).x
    hit = np.flatnonzero(fit >= level)
    return int(curve.p_values[hit[0]]) if hit.size else None


@dataclass(frozen=True)
class TailFit:
    kappa: float
    t: np.ndarray
    p: np.ndarray


def fit_tail_kappa(z: np.ndarray, lo: float = 0.90, hi: float = 0.999,
                   points: int = 50) -> TailFit:
    """Envelope fit of ``P{|z| > t} <= exp(1 - t^2 / kappa^2)``.

    At quantiles ``q`` in ``[lo, hi]`` of ``|z|`` the exceedance is
    ``p = 1 - q``; each point requires ``kappa >= t / sqrt(1 - ln p)`` and
    the estimate is the largest such value, so the bound holds at every fit
    point by construction.
    """
    a = np.abs(np.asarray(z, dtype=float).ravel())
    if a.size == 0:
        raise ValueError("no samples")
    q = np.linspace(lo, hi, points)
    t = np.quantile(a, q)
    p = np.array([np.mean(a > ti) for ti in t])
    p = np.maximum(p, 1.0 / a.size)
    k = t / np.sqrt(1.0 - np.log(p))
    return TailFit(float(np.max(k)), t, p)


def _unit(v: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(v)
    if not nrm > 0:
        raise ValueError("zero vector has no direction")
    return v / nrm


def _random_directions(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    d = rng.standard_normal((k, n))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class VirtualStats:
    """Monte-Carlo statistics of ``v = x 1{w0.x > 0}`` for Gaussian ``x``.

    ``second_moment_parallel`` and ``second_moment_orthogonal`` are
    ``E (a.x)^2 1{w0.x > 0}`` for ``a = w0`` and a fixed unit ``a`` orthogonal
    to it; ``*_se`` are standard errors.
    """

    lambda_min_cov: float
    mean_norm: float
    tail_kappa_estimate: float
    samples: int
    mean_norm_se: float = 0.0
    second_moment_parallel: float = 0.0
    second_moment_parallel_se: float = 0.0
    second_moment_orthogonal: float = 0.0
    second_moment_orthogonal_se: float = 0.0

    def to_dict(self) -> dict:
        return {k: (int(v) if k == "samples" else float(v)) for k, v in self.__dict__.items()}


def virtual_stats(n: int, w0: np.ndarray, samples: int, seed: int,
                  n_directions: int = 8, chunk: int = 100_000) -> VirtualStats:
    """Estimate the mean norm, smallest covariance eigenvalue and tail constant.

    Samples are processed in chunks; the tail constant is the largest
    :func:`fit_tail_kappa` estimate over `n_directions` random unit
    directions of the centered virtual input.
    """
    w0 = np.asarray(w0, dtype=float).ravel()
    if w0.size != n or abs(np.linalg.norm(w0) - 1.0) > 1e-8:
        raise ValueError("w0 must be a unit vector of length N")
    if n < 2:
        raise ValueError("need N >= 2")
    if samples < 2:
        raise ValueError("need at least two samples")
    root = np.random.SeedSequence(seed)
    s_dir, s_data = root.spawn(2)
    drng = make_rng(s_dir)
    dirs = _random_directions(drng, n, n_directions)
    orth = drng.standard_normal(n)
    orth = _unit(orth - (orth @ w0) * w0)

    s1 = np.zeros(n)
    s2 = np.zeros((n, n))
    proj = np.empty((n_directions, samples))
    m_par = np.empty(samples)
    m_orth = np.empty(samples)
    drng_data = make_rng(s_data)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        x = drng_data.standard_normal((m, n))
        v = x * (x @ w0 > 0)[:, None]
        s1 += v.sum(axis=0)
        s2 += v.T @ v
        proj[:, done:done + m] = dirs @ v.T
        m_par[done:done + m] = (v @ w0) ** 2
        m_orth[done:done + m] = (v @ orth) ** 2
        done += m

    mean = s1 / samples
    cov = (s2 - samples * np.outer(mean, mean)) / (samples - 1)
    lam = float(np.linalg.eigvalsh(cov)[0])
    # delta method for ||mean||: var(u.v) / samples with u = mean / ||mean||
    mn = float(np.linalg.norm(mean))
    u = mean / mn if mn > 0 else w0
    mean_se = float(np.sqrt(max(u @ cov @ u, 0.0) / samples))
    proj -= (dirs @ mean)[:, None]
    kappa = max(fit_tail_kappa(row).kappa for row in proj)
    return VirtualStats(
        lambda_min_cov=lam,
        mean_norm=mn,
        tail_kappa_estimate=kappa,
        samples=int(samples),
        mean_norm_se=mean_se,
        second_moment_parallel=float(m_par.mean()),
        second_moment_parallel_se=float(m_par.std(ddof=1) / np.sqrt(samples)),
        second_moment_orthogonal=float(m_orth.mean()),
        second_moment_orthogonal_se=float(m_orth.std(ddof=1) / np.sqrt(samples)),
    )


_G = {
    "t": lambda t: t,
    "t2": lambda t: t * t,
    "relu": lambda t: np.maximum(t, 0.0),
}


@dataclass(frozen=True)
class BivariateCheck:
    lhs: float
    rhs: float
    gap: float
    lhs_se: float
    rhs_se: float


def bivariate_reduction_check(alpha, beta, g: Union[str, Callable], samples: int, seed: int,
                              chunk: int = 200_000) -> BivariateCheck:
    """Compare ``E g(a.x) 1{b.x > 0}`` in N dims with its two-variable form.

    The right-hand side is ``E g(c x1 + sqrt(1 - c^2) x2) 1{x1 > 0}`` with
    ``c = a.b``; the two sides use independent streams.
    """
    alpha = np.asarray(alpha, dtype=float).ravel()
    beta = np.asarray(beta, dtype=float).ravel()
    if alpha.size != beta.size or alpha.size < 2:
        raise ValueError("alpha and beta must share a dimension N >= 2")
    if abs(np.linalg.norm(alpha) - 1) > 1e-8 or abs(np.linalg.norm(beta) - 1) > 1e-8:
        raise ValueError("alpha and beta must be unit vectors")
    fn = _G[g] if isinstance(g, str) else g
    c = float(np.clip(alpha @ beta, -1.0, 1.0))
    sc = np.sqrt(max(0.0, 1.0 - c * c))
    s_l, s_r = np.random.SeedSequence(seed).spawn(2)
    rl, rr = make_rng(s_l), make_rng(s_r)
    n = alpha.size
    acc = np.zeros((2, 2))  # [side, (sum, sum of squares)]
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        x = rl.standard_normal((m, n))
        a = fn(x @ alpha) * (x @ beta > 0)
        z = rr.standard_normal((m, 2))
        b = fn(c * z[:, 0] + sc * z[:, 1]) * (z[:, 0] > 0)
        acc[0] += (a.sum(), (a * a).sum())
        acc[1] += (b.sum(), (b * b).sum())
        done += m
    means = acc[:, 0] / samples
    var = np.maximum(acc[:, 1] / samples - means ** 2, 0.0)
    se = np.sqrt(var / samples)
    return BivariateCheck(float(means[0]), float(means[1]), float(abs(means[0] - means[1])),
                          float(se[0]), float(se[1]))


@dataclass(frozen=True)
class LayerTail:
    layer: int
    kappa: float
    kappa_per_direction: tuple
    fits: tuple = field(repr=False, default=())


def subgaussian_flow_diagnostic(net: Network, samples: int, seed: int,
                                n_directions: int = 8) -> list:
    """Per-layer tail constants of centered marginals under Gaussian inputs.

    Entry 0 is the input itself; entry ``l`` is the output of layer ``l``.
    Diagnostic only: finite, moderate values are what to look for.
    """
    s_x, s_d = np.random.SeedSequence(seed).spawn(2)
    x = gen_gaussian(net.input_dim, samples, s_x)
    drng = make_rng(s_d)
    out = []
    for i, xl in enumerate(forward(net, x)):
        centered = xl - xl.mean(axis=1, keepdims=True)
        dirs = _random_directions(drng, xl.shape[0], n_directions)
        fits = tuple(fit_tail_kappa(d @ centered) for d in dirs)
        ks = tuple(f.kappa for f in fits)
        out.append(LayerTail(i, float(max(ks)), ks, fits))
    return out


def gen_planted_network(dims: Sequence[int], sparsity, seed: int,
                        final_activation: bool = True, live_units: bool = True):
    """Random sparse network and a dense copy with identical weights.

    `sparsity` is the number of nonzeros per output column, a scalar or one
    value per layer.  Returns ``(dense, sparse)``; both are bias-free.

    Layers after the first see nonnegative inputs, so a column without a
    positive weight would be a unit that never fires and whose weights no
    data can reveal.  Such columns are redrawn when `live_units` is set.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError("dims must list at least an input and an output size")
    depth = len(dims) - 1
    sp = np.broadcast_to(np.asarray(sparsity, dtype=int), (depth,))
    root = np.random.SeedSequence(seed)
    layers = []
    for li, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        cols = []
        for cs in root.spawn(n_out):
            col = gen_sparse_weights(n_in, int(sp[li]), cs)
            while live_units and li > 0 and sp[li] > 0 and not np.any(col > 0):
                col = gen_sparse_weights(n_in, int(sp[li]), cs.spawn(1)[0])
            cols.append(col)
        w = np.stack(cols, axis=1)
        act = final_activation or li < depth - 1
        layers.append(Layer(w, None, act))
    sparse = Network(tuple(layers))
    dense = Network(tuple(Layer(l.weights.copy(), None, l.apply_activation) for l in layers))
    return dense, sparse


@dataclass(frozen=True)
class BaselineComparison:
    keep: tuple
    rtd_nettrim: float
    rtd_truncation: float
    converged: bool

    @property
    def nettrim_wins(self) -> bool:
        return self.rtd_nettrim <= self.rtd_truncation


def compare_with_truncation(net: Network, x: np.ndarray, cfg: PruneConfig) -> BaselineComparison:
    """Prune with `cfg`, then magnitude-truncate the original to the same per-layer nnz.

    Both are scored by the relative total discrepancy of the final output
    on `x`.
    """
    pruned, report = prune_network(net, x, cfg)
    keep = tuple(nnz(l.weights) for l in pruned.layers)
    trunc = magnitude_truncate(net, keep)
    y = forward(net, x)[-1]
    return BaselineComparison(
        keep,
        relative_total_discrepancy(forward(pruned, x)[-1], y),
        relative_total_discrepancy(forward(trunc, x)[-1], y),
        report.all_converged,
    )
