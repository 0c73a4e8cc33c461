"""Command-line entry point: simulation sweeps, single-dataset analyses, kernel dumps.

Exit codes: 0 success, 1 flag/validation error, 2 runtime failure.  All flags
are validated before any computation starts; logs go to stderr and data only
to files.
"""

from __future__ import annotations

import argparse
import os
import sys
from .bart import BartParams, fit_bart
from .errors import TreebalError
from .forest import ForestParams, fit_random_forest
from .kernel import (
    MODE_KERNEL_ONLY,
    MODE_KERNEL_PLUS_RAW,
    MODE_RAW_ONLY,
    forest_kernel,
    gaussian_kernel,
    matrix_to_csv,
)
from .pipeline import (
    ESTIMATOR_BALANCE,
    ESTIMATOR_IPW,
    KERNEL_BART,
    KERNEL_KBAL,
    KERNEL_NONE,
    KERNEL_RF,
    KERNELS,
    PipelineConfig,
    run_cross_fit,
    run_monte_carlo,
    write_metrics_csv,
)
from .sim import DGP_KIM, DGP_TARR, DgpSpec, gen_dataset, load_csv

_MODE_FLAGS = {"only": MODE_KERNEL_ONLY, "plus": MODE_KERNEL_PLUS_RAW}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1, not argparse's default 2
        raise _UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok != ""]
    except ValueError:
        raise _UsageError(f"expected comma-separated integers, got {text!r}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="treebal", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo sweep", add_help=True)
    sim.add_argument("--dgp", required=True, choices=[DGP_TARR, DGP_KIM])
    sim.add_argument("--reps", type=int, required=True)
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--kernels", default="rf,bart,kbal,none")
    sim.add_argument("--pcs", default="2,5,10,15,25,50,100")
    sim.add_argument("--modes", default="only,plus")
    sim.add_argument("--estimator", default=ESTIMATOR_BALANCE,
                     choices=[ESTIMATOR_BALANCE, ESTIMATOR_IPW])
    sim.add_argument("--sigma-eps-sq", type=float, default=30.0,
                     help="kim overlap noise variance (30 low, 100 high)")
    sim.add_argument("--trees", type=int, default=100)
    sim.add_argument("--bart-draws", type=int, default=50)
    sim.add_argument("--bart-burn-in", type=int, default=250)
    sim.add_argument("--bart-thin", type=int, default=2)
    sim.add_argument("--bandwidth", type=float, default=None)
    sim.add_argument("--lambda", dest="lam", type=float, default=None)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--out", required=True)

    ana = sub.add_parser("analyze", help="cross-fit estimation on a CSV dataset")
    ana.add_argument("--data", required=True)
    ana.add_argument("--treatment", required=True)
    ana.add_argument("--outcome", required=True)
    ana.add_argument("--kernel", default=KERNEL_RF)
    ana.add_argument("--mode", default="plus", choices=list(_MODE_FLAGS))
    ana.add_argument("--pcs", type=int, default=5)
    ana.add_argument("--cross-fits", type=int, default=10)
    ana.add_argument("--estimator", default=ESTIMATOR_BALANCE,
                     choices=[ESTIMATOR_BALANCE, ESTIMATOR_IPW])
    ana.add_argument("--trees", type=int, default=100)
    ana.add_argument("--bart-draws", type=int, default=50)
    ana.add_argument("--bart-burn-in", type=int, default=250)
    ana.add_argument("--bart-thin", type=int, default=2)
    ana.add_argument("--bandwidth", type=float, default=None)
    ana.add_argument("--lambda", dest="lam", type=float, default=None)
    ana.add_argument("--seed", type=int, default=0)
    ana.add_argument("--out", required=True)
    ana.add_argument("--weights-out", default=None)

    dump = sub.add_parser("kernel-dump", help="write a kernel matrix as CSV")
    dump.add_argument("--data", default=None)
    dump.add_argument("--treatment", default=None)
    dump.add_argument("--outcome", default=None)
    dump.add_argument("--dgp", default=None, choices=[DGP_TARR, DGP_KIM])
    dump.add_argument("--n", type=int, default=200)
    dump.add_argument("--sigma-eps-sq", type=float, default=30.0)
    dump.add_argument("--kernel", default=KERNEL_RF)
    dump.add_argument("--trees", type=int, default=100)
    dump.add_argument("--bart-draws", type=int, default=50)
    dump.add_argument("--bart-burn-in", type=int, default=250)
    dump.add_argument("--bart-thin", type=int, default=2)
    dump.add_argument("--bandwidth", type=float, default=None)
    dump.add_argument("--seed", type=int, default=0)
    dump.add_argument("--out", required=True)
    return parser


def _check_kernel_name(name: str) -> str:
    if name not in KERNELS:
        raise _UsageError(
            f"unknown kernel {name!r}; valid kernels: {', '.join(KERNELS)}"
        )
    return name


def _tree_params(args) -> tuple[ForestParams, BartParams]:
    forest = ForestParams(T=args.trees)
    bart = BartParams(
        T=args.trees,
        B=args.bart_draws,
        burn_in=args.bart_burn_in,
        thin=args.bart_thin,
    )
    return forest, bart


def _simulate(args) -> int:
    kernels = []
    for name in args.kernels.split(","):
        name = name.strip()
        if name and name not in kernels:
            kernels.append(_check_kernel_name(name))
    if not kernels:
        raise _UsageError("no kernels requested")
    pcs = _int_list(args.pcs)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in _MODE_FLAGS:
            raise _UsageError(f"unknown mode {m!r}; valid modes: only, plus")
    if any(k != KERNEL_NONE for k in kernels):
        if not pcs or any(r < 1 for r in pcs):
            raise _UsageError("--pcs must be positive integers when a kernel is used")
        if not modes:
            raise _UsageError("no feature modes requested")
    forest, bart = _tree_params(args)
    if args.reps < 1:
        raise _UsageError("--reps must be >= 1")
    if args.jobs < 1:
        raise _UsageError("--jobs must be >= 1")

    sigma = args.sigma_eps_sq if args.dgp == DGP_KIM else None
    dgp = DgpSpec(kind=args.dgp, n=args.n, seed=args.seed, sigma_eps_sq=sigma)

    grid = []
    for kernel in kernels:
        if kernel == KERNEL_NONE:
            grid.append(
                PipelineConfig(
                    kernel=KERNEL_NONE, mode=MODE_RAW_ONLY, r=0,
                    estimator=args.estimator, forest_params=forest,
                    bart_params=bart, lam=args.lam, seed=args.seed,
                )
            )
            continue
        for mode in modes:
            for r in pcs:
                grid.append(
                    PipelineConfig(
                        kernel=kernel, mode=_MODE_FLAGS[mode], r=r,
                        estimator=args.estimator, forest_params=forest,
                        bart_params=bart, bandwidth=args.bandwidth,
                        lam=args.lam, seed=args.seed,
                    )
                )

    rows = run_monte_carlo(dgp, grid, args.reps, jobs=args.jobs, progress=True)
    write_metrics_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}", file=sys.stderr)
    return 0


def _analyze(args) -> int:
    _check_kernel_name(args.kernel)
    if not os.path.exists(args.data):
        raise _UsageError(f"data file not found: {args.data}")
    if args.kernel == KERNEL_NONE:
        mode = MODE_RAW_ONLY
    else:
        mode = _MODE_FLAGS[args.mode]
        if args.pcs < 1:
            raise _UsageError("--pcs must be >= 1 when a kernel is used")
    if args.cross_fits < 1:
        raise _UsageError("--cross-fits must be >= 1")
    forest, bart = _tree_params(args)
    config = PipelineConfig(
        kernel=args.kernel, mode=mode, r=max(args.pcs, 0),
        cross_fits=args.cross_fits, estimator=args.estimator,
        forest_params=forest, bart_params=bart, bandwidth=args.bandwidth,
        lam=args.lam, seed=args.seed,
    )
    sample = load_csv(args.data, args.treatment, args.outcome)
    result = run_cross_fit(sample, config)

    def _opt(x):
        return "" if x is None else "%.17g" % x

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("fit,att,ess,lam,imbalance_sq,iterations,converged\n")
        for i, fit in enumerate(result.fits):
            iters = "" if fit.iterations is None else str(fit.iterations)
            conv = "" if fit.converged is None else str(int(fit.converged))
            fh.write(
                "%d,%.17g,%.17g,%s,%s,%s,%s\n"
                % (i, fit.att, fit.ess, _opt(fit.lam), _opt(fit.imbalance_sq), iters, conv)
            )
        fh.write("mean,%.17g,%.17g,,,,\n" % (result.att_mean, result.ess_mean))
    if args.weights_out:
        with open(args.weights_out, "w", encoding="utf-8") as fh:
            fh.write("fit,unit_id,weight\n")
            for i, fit in enumerate(result.fits):
                for uid, wi in zip(fit.unit_ids, fit.weights):
                    fh.write("%d,%d,%.17g\n" % (i, uid, wi))
    print(
        f"att_mean={result.att_mean:.6g} ess_mean={result.ess_mean:.6g} "
        f"({len(result.fits)} cross-fits)",
        file=sys.stderr,
    )
    return 0


def _kernel_dump(args) -> int:
    _check_kernel_name(args.kernel)
    if args.kernel == KERNEL_NONE:
        raise _UsageError("kernel-dump needs a kernel: rf, bart or kbal")
    if args.data is None and args.dgp is None:
        raise _UsageError("kernel-dump needs --data or --dgp")
    if args.data is not None:
        if not os.path.exists(args.data):
            raise _UsageError(f"data file not found: {args.data}")
        if args.treatment is None or args.outcome is None:
            raise _UsageError("--data requires --treatment and --outcome")

    if args.data is not None:
        sample = load_csv(args.data, args.treatment, args.outcome)
    else:
        sigma = args.sigma_eps_sq if args.dgp == DGP_KIM else None
        sample = gen_dataset(
            DgpSpec(kind=args.dgp, n=args.n, seed=args.seed, sigma_eps_sq=sigma)
        )

    forest, bart = _tree_params(args)
    if args.kernel == KERNEL_KBAL:
        X = sample.X
        Xs = (X - X.mean(axis=0)) / X.std(axis=0, ddof=1)
        bw = args.bandwidth if args.bandwidth is not None else 2.0 * X.shape[1]
        K = gaussian_kernel(Xs, bw)
    elif args.kernel == KERNEL_RF:
        # diagnostic dump: the model is fit on the full dataset
        model = fit_random_forest(sample.X, sample.Y, forest, seed=args.seed)
        K = forest_kernel(model, sample.X)
    else:
        model = fit_bart(sample.X, sample.Y, bart, seed=args.seed)
        K = forest_kernel(model, sample.X)
    matrix_to_csv(K.K, args.out)
    print(f"wrote {K.n}x{K.n} kernel to {args.out}", file=sys.stderr)
    return 0


def parse_and_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.subcommand == "simulate":
            return _simulate(args)
        if args.subcommand == "analyze":
            return _analyze(args)
        return _kernel_dump(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TreebalError as exc:
        # configuration and data-format problems are validation failures
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
