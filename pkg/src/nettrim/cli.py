"""``nettrim`` command line.

Subcommands: ``prune``, ``recover``, ``verify``, ``stats``, ``baseline`` and
``generate``.  Each writes its outputs plus a JSON run manifest next to the
main output (``<out>.manifest.json`` unless ``--manifest`` is given).

Exit codes: 0 success, 1 solver non-convergence or violated bound, 2 usage
or I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .admm import AdmmConfig
from .experiments import (
    RNG_ALGORITHM,
    gen_gaussian,
    gen_planted_network,
    parse_grid,
    phase_transition,
    make_rng,
    virtual_stats,
    RECOVERY_ADMM,
)
from .io import FormatError, read_data, read_network, write_data, write_network
from .network import Layer, Network
from .prune import (
    LayerSolveError,
    PruneConfig,
    keep_counts_for_percent,
    magnitude_truncate,
    prune_network,
    subset_columns,
    verify_bounds,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("nettrim")


class UsageError(Exception):
    """Bad input detected after argument parsing (exit code 2)."""


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _read(reader, path, what):
    try:
        return reader(path)
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except (OSError, FormatError) as exc:
        raise UsageError(f"cannot read {what} file {path}: {exc}") from None


def _write_bytes(path, data: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from None


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _floats(text: str) -> list:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or comma list, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty value list")
    return vals


def _positive_int(text: str) -> int:
    try:
        v = int(float(text)) if "e" in text.lower() else int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _admm_config(args) -> AdmmConfig:
    return AdmmConfig(rho=args.rho, max_iter=args.max_iter, tol_abs=args.tol, tol_rel=args.tol,
                      adaptive_rho=args.adaptive_rho)


def _prune_config(args) -> PruneConfig:
    eps = args.epsilon[0] if len(args.epsilon) == 1 else args.epsilon
    gam = args.gamma[0] if len(args.gamma) == 1 else args.gamma
    try:
        return PruneConfig(mode=args.mode, epsilons=eps, gammas=gam, admm=_admm_config(args),
                           normalize_first=args.normalize, serial=args.serial)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands ------------------------------------------------------------

def cmd_prune(args, run):
    net = _read(read_network, args.model, "model")
    x = _read(read_data, args.data, "data")
    run.inputs(args.model, args.data)
    if x.shape[0] != net.input_dim:
        raise UsageError(f"data has {x.shape[0]} rows, model expects {net.input_dim}")
    try:
        x = subset_columns(x, args.subset, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = _prune_config(args)
    try:
        pruned, report = prune_network(net, x, cfg)
    except LayerSolveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_network(args.out, pruned)
    d = report.to_dict()
    _write_bytes(args.report, _dump_json(d))
    run.outputs(args.out, args.report)
    for lr in report.layers:
        print(f"layer {lr.index}: {lr.percent_zeros_before:.1f}% -> {lr.percent_zeros_after:.1f}% zeros,"
              f" {lr.iterations} iterations{'' if lr.converged else ' (not converged)'}")
    if report.rtd is not None:
        print(f"relative total discrepancy {report.rtd:.6g}")
    ok = report.all_converged and report.bound_satisfied is not False
    if not report.all_converged:
        print("warning: at least one layer did not converge", file=sys.stderr)
    if report.bound_satisfied is False:
        print("warning: a layer bound is violated", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_recover(args, run):
    try:
        grid = parse_grid(args.p_grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    if not 0 <= args.s <= args.n:
        raise UsageError("--s must lie in [0, N]")
    cfg = AdmmConfig(rho=args.rho, max_iter=args.max_iter, tol_abs=args.tol, tol_rel=args.tol)
    curve = phase_transition(args.n, args.s, grid, args.trials, args.seed, cfg,
                             success_tol=args.success_tol,
                             workers=1 if args.serial else _env_workers())
    _write_bytes(args.out, curve.to_csv().encode())
    run.outputs(args.out)
    for p, r in zip(curve.p_values, curve.rates):
        print(f"P={p} rate={r:.3f}")
    return EXIT_OK


def cmd_verify(args, run):
    orig = _read(read_network, args.original, "model")
    pruned = _read(read_network, args.pruned, "model")
    x = _read(read_data, args.data, "data")
    run.inputs(args.original, args.pruned, args.data)
    if x.shape[0] != orig.input_dim:
        raise UsageError(f"data has {x.shape[0]} rows, model expects {orig.input_dim}")
    cfg = _prune_config(args)
    try:
        br = verify_bounds(orig, pruned, x, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    # without normalization the bounds are still compared, in raw units
    sat = br.satisfied
    if args.report:
        _write_bytes(args.report, _dump_json(asdict(br)))
        run.outputs(args.report)
    for i, (d, b, s) in enumerate(zip(br.discrepancies, br.bounds, sat)):
        print(f"layer {i}: discrepancy {d:.6g} bound {b:.6g} {'ok' if s else 'VIOLATED'}")
    return EXIT_OK if all(sat) else EXIT_FAIL


def cmd_stats(args, run):
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    rng = make_rng(args.seed)
    if args.w0 == "e1":
        w0 = np.zeros(args.n)
        w0[0] = 1.0
    else:
        w0 = rng.standard_normal(args.n)
        w0 /= np.linalg.norm(w0)
    vs = virtual_stats(args.n, w0, args.samples, args.seed)
    d = vs.to_dict()
    d["N"] = args.n
    d["w0"] = [float(v) for v in w0]
    _write_bytes(args.out, _dump_json(d))
    run.outputs(args.out)
    print(f"mean_norm {vs.mean_norm:.4f}")
    print(f"lambda_min_cov {vs.lambda_min_cov:.4f}")
    print(f"tail_kappa_estimate {vs.tail_kappa_estimate:.4f}")
    return EXIT_OK


def cmd_baseline(args, run):
    net = _read(read_network, args.model, "model")
    run.inputs(args.model)
    if args.keep_percent is not None:
        zero_pct = 100.0 - args.keep_percent
    else:
        zero_pct = args.zero_percent
    try:
        keep = keep_counts_for_percent(net, zero_pct)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_network(args.out, magnitude_truncate(net, keep))
    run.outputs(args.out)
    print("kept " + ", ".join(f"{k}/{l.weights.size}" for k, l in zip(keep, net.layers)))
    return EXIT_OK


def cmd_generate(args, run):
    dims = [int(d) for d in args.dims.split(",")]
    if len(dims) < 2 or min(dims) < 1:
        raise UsageError("--dims needs at least two positive sizes")
    if args.kind == "planted":
        if args.sparsity is None:
            raise UsageError("--sparsity is required for planted networks")
        if any(args.sparsity > d for d in dims[:-1]):
            raise UsageError("--sparsity exceeds a layer input size")
        net, _ = gen_planted_network(dims, args.sparsity, args.seed)
    else:
        rng = make_rng(args.seed)
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.standard_normal((a, b)) / np.sqrt(a)
            bias = 0.1 * rng.standard_normal(b) if args.bias else None
            layers.append(Layer(w, bias, True))
        net = Network(tuple(layers))
    x = gen_gaussian(dims[0], args.samples, np.random.SeedSequence([args.seed, 1]))
    write_network(args.model_out, net)
    write_data(args.data_out, x)
    run.outputs(args.model_out, args.data_out)
    return EXIT_OK


# -- plumbing ---------------------------------------------------------------

def _env_workers() -> int:
    try:
        return max(1, int(os.environ.get("NETTRIM_THREADS", "0") or 0) or (os.cpu_count() or 1))
    except ValueError:
        return 1


class _Run:
    """Collects digests and timing for the manifest."""

    def __init__(self, args):
        self.args = args
        self.in_paths, self.out_paths = [], []
        self.t0 = time.perf_counter()

    def inputs(self, *paths):
        self.in_paths.extend(paths)

    def outputs(self, *paths):
        self.out_paths.extend(paths)

    def manifest(self, exit_code: int) -> dict:
        cfg = {k: v for k, v in vars(self.args).items() if k not in ("func", "manifest", "main_out")}
        return {
            "command": self.args.command,
            "config": cfg,
            "seed": self.args.seed,
            "serial": self.args.serial,
            "tool_version": __version__,
            "numpy_version": np.__version__,
            "rng": RNG_ALGORITHM,
            "inputs": {p: _sha256(p) for p in self.in_paths},
            "outputs": {p: _sha256(p) for p in self.out_paths if os.path.exists(p)},
            "exit_code": exit_code,
            "timing": {"wall_seconds": time.perf_counter() - self.t0},
        }


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--serial", action="store_true",
                   help="single-threaded, bit-reproducible execution")
    p.add_argument("--manifest", help="run manifest path (default <output>.manifest.json)")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")


def _solver_flags(p: argparse.ArgumentParser, defaults: AdmmConfig = AdmmConfig()):
    p.add_argument("--rho", type=float, default=defaults.rho, help="ADMM penalty (default %(default)s)")
    p.add_argument("--max-iter", type=_positive_int, default=defaults.max_iter,
                   help="ADMM iteration cap (default %(default)s)")
    p.add_argument("--tol", type=float, default=defaults.tol_abs,
                   help="absolute and relative ADMM tolerance (default %(default)s)")


def _bound_flags(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=("parallel", "cascade"), default="parallel")
    p.add_argument("--epsilon", type=_floats, default=[0.0],
                   help="layer slack: scalar or comma list (cascade uses the first)")
    p.add_argument("--gamma", type=_floats, default=[1.0],
                   help="cascade inflation rate(s) for layers 2..L")
    p.add_argument("--normalize", action="store_true",
                   help="work on the l1-normalized network (where the bounds apply)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nettrim", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"nettrim {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="prune a saved network against a data matrix")
    p.add_argument("--model", required=True, help="input NTNF network")
    p.add_argument("--data", required=True, help="NTDF data matrix, one sample per column")
    p.add_argument("--out", required=True, help="pruned NTNF network")
    p.add_argument("--report", required=True, help="JSON prune report")
    p.add_argument("--subset", type=_positive_int, help="use k columns after a seeded shuffle")
    p.add_argument("--adaptive-rho", action="store_true", help="residual-balancing rho updates")
    _bound_flags(p)
    _solver_flags(p)
    _common(p)
    p.set_defaults(func=cmd_prune, main_out="out")

    p = sub.add_parser("recover", help="sparse-recovery phase transition")
    p.add_argument("--n", type=_positive_int, required=True, help="input dimension N")
    p.add_argument("--s", type=int, required=True, help="sparsity s")
    p.add_argument("--p-grid", required=True, help="sample counts, start:stop:step or a,b,c")
    p.add_argument("--trials", type=int, required=True, help="trials per grid point")
    p.add_argument("--success-tol", type=float, default=1e-4)
    p.add_argument("--out", required=True, help="CSV output")
    _solver_flags(p, RECOVERY_ADMM)
    _common(p)
    p.set_defaults(func=cmd_recover, main_out="out")

    p = sub.add_parser("verify", help="check layer discrepancies against the bounds")
    p.add_argument("--original", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="JSON bound report")
    _bound_flags(p)
    _common(p)
    p.set_defaults(func=cmd_verify, main_out="report", rho=1.0, max_iter=1, tol=1e-6,
                   adaptive_rho=False)

    p = sub.add_parser("stats", help="Monte-Carlo statistics of the virtual input")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--samples", type=_positive_int, default=1_000_000)
    p.add_argument("--w0", choices=("e1", "random"), default="e1")
    p.add_argument("--out", required=True, help="JSON output")
    _common(p)
    p.set_defaults(func=cmd_stats, main_out="out")

    p = sub.add_parser("baseline", help="magnitude truncation at a given sparsity")
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--keep-percent", type=float, help="percent of entries kept per layer")
    g.add_argument("--zero-percent", type=float, help="percent of entries zeroed per layer")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_baseline, main_out="out")

    p = sub.add_parser("generate", help="write a synthetic network and Gaussian data")
    p.add_argument("--kind", choices=("planted", "dense"), default="planted")
    p.add_argument("--dims", required=True, help="layer sizes, e.g. 32,32,16")
    p.add_argument("--sparsity", type=int, help="nonzeros per column (planted)")
    p.add_argument("--bias", action="store_true", help="random biases (dense)")
    p.add_argument("--samples", type=_positive_int, default=200)
    p.add_argument("--model-out", required=True)
    p.add_argument("--data-out", required=True)
    _common(p)
    p.set_defaults(func=cmd_generate, main_out="model_out")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    run = _Run(args)
    limit = contextlib.nullcontext()
    if args.serial:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=1)
    try:
        with limit:
            code = args.func(args, run)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    main_out = getattr(args, args.main_out, None)
    mpath = args.manifest or (f"{main_out}.manifest.json" if main_out else None)
    if mpath:
        try:
            _write_bytes(mpath, _dump_json(run.manifest(code)))
        except UsageError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    return code


if __name__ == "__main__":
    sys.exit(main())
