"""End-to-end estimation runs and the Monte Carlo harness.

A single fit follows the pilot/analysis protocol: fit the outcome model on a
controls-only pilot sample, apply it to the analysis sample to get a kernel,
truncate spectrally, assemble balancing features (optionally together with
the raw covariates), solve for weights, and estimate the ATT.  The Gaussian
("kbal") and raw-only configurations skip the pilot model.

Replication seeds derive from the base seed with the splitmix substream
primitive: replication s uses key substream(base, s), from which the analysis
draw, pilot draw and per-kernel model seeds branch with fixed tags.  Within a
replication every configuration sees the same data, and configurations that
share a kernel share the fitted model and its eigendecomposition.
"""

from __future__ import annotations

import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import multiprocessing

import numpy as np

from .balance import BalanceProblem, ess, estimate_att, lambda_heuristic, logistic_ipw, solve_weights
from .bart import BartParams, fit_bart
from .errors import InvalidSpecError
from .forest import ForestParams, fit_random_forest
from .kernel import (
    MODE_KERNEL_ONLY,
    MODE_KERNEL_PLUS_RAW,
    MODE_RAW_ONLY,
    SpectralFeatures,
    assemble_features,
    forest_kernel,
    gaussian_kernel,
    spectral_features,
)
from .rng import derive_key, uniforms
from .sim import DGP_TARR, DgpSpec, LabeledSample, gen_dataset, true_att

KERNEL_RF = "rf"
KERNEL_BART = "bart"
KERNEL_KBAL = "kbal"
KERNEL_NONE = "none"
KERNELS = (KERNEL_RF, KERNEL_BART, KERNEL_KBAL, KERNEL_NONE)

ESTIMATOR_BALANCE = "balance"
ESTIMATOR_IPW = "ipw"

METRICS_CSV_HEADER = (
    "feature_grouping,kernel,num_pcs,reps,abs_rel_bias,rel_rmse,ess_mean,failures"
)

# substream tags hanging off each replication key
_TAG_ANALYSIS = 0
_TAG_PILOT = 1
_MODEL_SEED_TAG = {KERNEL_RF: 2, KERNEL_BART: 3}
_TAG_SPLIT = 5
_TAG_CROSSFIT_MODEL = 6


@dataclass
class PipelineConfig:
    """One estimator configuration: kernel, feature grouping, and knobs."""

    kernel: str = KERNEL_RF
    mode: str = MODE_KERNEL_PLUS_RAW
    r: int = 25
    cross_fits: int = 1
    estimator: str = ESTIMATOR_BALANCE
    forest_params: ForestParams = field(default_factory=ForestParams)
    bart_params: BartParams = field(default_factory=BartParams)
    bandwidth: float | None = None
    lam: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kernel not in KERNELS:
            raise InvalidSpecError(f"unknown kernel {self.kernel!r}")
        if self.estimator not in (ESTIMATOR_BALANCE, ESTIMATOR_IPW):
            raise InvalidSpecError(f"unknown estimator {self.estimator!r}")
        if self.kernel == KERNEL_NONE:
            if self.mode != MODE_RAW_ONLY:
                raise InvalidSpecError("kernel 'none' implies raw-only features")
        else:
            if self.mode == MODE_RAW_ONLY:
                raise InvalidSpecError("raw-only features imply kernel 'none'")
            if self.r < 1:
                raise InvalidSpecError("r must be >= 1 when a kernel is used")
        if self.cross_fits < 1:
            raise InvalidSpecError("cross_fits must be >= 1")

    @property
    def label(self) -> str:
        if self.kernel == KERNEL_NONE:
            return "raw"
        suffix = "only" if self.mode == MODE_KERNEL_ONLY else "plus"
        return f"{self.kernel}_{suffix}"


@dataclass
class FitDiagnostics:
    """Per-fit outputs: the estimate plus solver/weight quality measures."""

    att: float
    ess: float
    lam: float | None
    imbalance_sq: float | None
    objective: float | None
    iterations: int | None
    converged: bool | None
    r_used: int
    n_pilot: int
    n_analysis: int
    weights: np.ndarray | None = None
    unit_ids: np.ndarray | None = None


@dataclass
class RunResult:
    """Estimates across cross-fits of one configuration."""

    att_estimates: np.ndarray
    att_mean: float
    ess_mean: float
    true_att: float | None
    fits: list[FitDiagnostics]


@dataclass
class MetricsRow:
    """One row of the results table (one configuration of one sweep)."""

    feature_grouping: str
    kernel: str
    num_pcs: int
    reps: int
    abs_rel_bias: float
    rel_rmse: float
    ess_mean: float
    failures: int


def _standardize_columns(X: np.ndarray) -> np.ndarray:
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    if (sd == 0.0).any():
        raise InvalidSpecError("cannot standardize zero-variance covariates")
    return (X - mu) / sd


def _fit_kernel_model(kernel: str, pilot: LabeledSample, config: PipelineConfig, seed: int):
    if kernel == KERNEL_RF:
        return fit_random_forest(pilot.X, pilot.Y, config.forest_params, seed=seed)
    if kernel == KERNEL_BART:
        return fit_bart(pilot.X, pilot.Y, config.bart_params, seed=seed)
    raise InvalidSpecError(f"kernel {kernel!r} has no pilot model")


def _spectral_for(
    config: PipelineConfig,
    pilot: LabeledSample | None,
    analysis: LabeledSample,
    model_seed: int,
    r: int,
) -> SpectralFeatures:
    if config.kernel in (KERNEL_RF, KERNEL_BART):
        if pilot is None:
            raise InvalidSpecError("forest kernels require a pilot sample")
        model = _fit_kernel_model(config.kernel, pilot, config, model_seed)
        K = forest_kernel(model, analysis.X)
    elif config.kernel == KERNEL_KBAL:
        bw = config.bandwidth if config.bandwidth is not None else 2.0 * analysis.p
        K = gaussian_kernel(_standardize_columns(analysis.X), bw)
    else:
        raise InvalidSpecError("raw-only configurations have no kernel")
    return spectral_features(K, r)


def _slice_spectral(spec: SpectralFeatures, r: int) -> SpectralFeatures:
    keep = min(r, spec.r)
    return SpectralFeatures(Phi=spec.Phi[:, :keep], sigmas=spec.sigmas[:keep], r=keep)


def _effective_r(config: PipelineConfig, analysis: LabeledSample) -> int:
    if config.r > analysis.n:
        warnings.warn(
            f"r={config.r} exceeds analysis size {analysis.n}; capping", RuntimeWarning
        )
        return analysis.n
    return config.r


def _single_fit(
    pilot: LabeledSample | None,
    analysis: LabeledSample,
    config: PipelineConfig,
    model_seed: int,
    spectral: SpectralFeatures | None = None,
) -> FitDiagnostics:
    if pilot is not None and (pilot.Z == 1).any():
        raise InvalidSpecError("pilot sample must contain control units only")
    if (analysis.Z == 1).sum() < 1 or (analysis.Z == 0).sum() < 1:
        raise InvalidSpecError("analysis sample needs both treated and control units")

    if config.kernel == KERNEL_NONE:
        spec = None
        r_used = 0
    else:
        r_eff = _effective_r(config, analysis)
        if spectral is None:
            spectral = _spectral_for(config, pilot, analysis, model_seed, r_eff)
        spec = _slice_spectral(spectral, r_eff)
        r_used = spec.r
    features = assemble_features(analysis.X, spec, config.mode)

    if config.estimator == ESTIMATOR_BALANCE:
        lam = config.lam if config.lam is not None else lambda_heuristic(
            features, analysis.Y, analysis.Z
        )
        solution = solve_weights(BalanceProblem(features, analysis.Z, lam))
        att = estimate_att(solution.w, analysis.Y, analysis.Z)
        return FitDiagnostics(
            att=att,
            ess=solution.ess,
            lam=lam,
            imbalance_sq=solution.imbalance_sq,
            objective=solution.objective,
            iterations=solution.iterations,
            converged=solution.converged,
            r_used=r_used,
            n_pilot=0 if pilot is None else pilot.n,
            n_analysis=analysis.n,
            weights=solution.w,
            unit_ids=np.flatnonzero(analysis.Z == 0),
        )
    w = logistic_ipw(features, analysis.Z)
    att = estimate_att(w, analysis.Y, analysis.Z)
    return FitDiagnostics(
        att=att,
        ess=ess(w),
        lam=None,
        imbalance_sq=None,
        objective=None,
        iterations=None,
        converged=None,
        r_used=r_used,
        n_pilot=0 if pilot is None else pilot.n,
        n_analysis=analysis.n,
        weights=w,
        unit_ids=np.flatnonzero(analysis.Z == 0),
    )


def _wrap_fits(fits: list[FitDiagnostics], truth: float | None) -> RunResult:
    atts = np.array([f.att for f in fits])
    esses = np.array([f.ess for f in fits])
    return RunResult(
        att_estimates=atts,
        att_mean=float(atts.mean()),
        ess_mean=float(esses.mean()),
        true_att=truth,
        fits=fits,
    )


def run_forest_kbal(
    pilot: LabeledSample | None, analysis: LabeledSample, config: PipelineConfig
) -> RunResult:
    """One pilot/analysis fit of the configured estimator."""
    tag = _MODEL_SEED_TAG.get(config.kernel, 9)
    fit = _single_fit(pilot, analysis, config, model_seed=derive_key(config.seed, tag))
    truth = true_att(analysis) if analysis.has_truth else None
    return _wrap_fits([fit], truth)


def run_cross_fit(sample: LabeledSample, config: PipelineConfig) -> RunResult:
    """Cross-fitting on one dataset: halve the controls, swap roles, average.

    Fit s uses control partition s//2 (a deterministic shuffle keyed by the
    config seed) with the halves' roles swapped when s is odd.  All treated
    units are in every analysis sample.
    """
    controls = np.flatnonzero(sample.Z == 0)
    treated = np.flatnonzero(sample.Z == 1)
    if controls.size < 2 or treated.size < 1:
        raise InvalidSpecError("cross-fitting needs >=2 controls and >=1 treated unit")
    n0 = controls.size
    half = n0 // 2
    fits = []
    for s in range(config.cross_fits):
        pair, swap = divmod(s, 2)
        order = np.argsort(uniforms(derive_key(config.seed, _TAG_SPLIT, pair), np.arange(n0)))
        first, second = controls[order[:half]], controls[order[half:]]
        pilot_idx, analysis_ctl = (first, second) if swap == 0 else (second, first)
        pilot = sample.subset(np.sort(pilot_idx))
        analysis = sample.subset(np.sort(np.concatenate([analysis_ctl, treated])))
        model_seed = derive_key(config.seed, _TAG_CROSSFIT_MODEL, s)
        fits.append(_single_fit(pilot, analysis, config, model_seed))
    truth = true_att(sample) if sample.has_truth else None
    return _wrap_fits(fits, truth)


def summarize_metrics(per_rep_errors) -> tuple[float, float, int]:
    """(abs bias of the mean error, root mean squared error, usable count).

    NaN entries are excluded; raises if nothing is left.
    """
    errs = np.asarray(per_rep_errors, dtype=np.float64)
    good = errs[~np.isnan(errs)]
    if good.size == 0:
        raise InvalidSpecError("all replications failed")
    return float(abs(good.mean())), float(np.sqrt((good**2).mean())), int(good.size)


def _params_fingerprint(config: PipelineConfig) -> tuple:
    if config.kernel == KERNEL_RF:
        fp = config.forest_params
        return (fp.T, fp.mtry, fp.min_leaf, fp.max_depth, fp.bootstrap)
    if config.kernel == KERNEL_BART:
        bp = config.bart_params
        return (bp.T, bp.burn_in, bp.B, bp.thin, bp.alpha, bp.beta, bp.k, bp.nu, bp.q)
    if config.kernel == KERNEL_KBAL:
        return (config.bandwidth,)
    return ()


def _run_replication(dgp: DgpSpec, grid: list[PipelineConfig], rep: int, fit_runner):
    """One replication: draw data, share kernels across the grid, fit all configs.

    Returns (rep, tau, per-config list of (err_basis_att, ess) with NaNs for
    failures); tau is None when data generation itself failed.
    """
    rep_key = derive_key(dgp.seed, rep)
    try:
        analysis = gen_dataset(replace(dgp, seed=derive_key(rep_key, _TAG_ANALYSIS)))
        pilot_full = gen_dataset(replace(dgp, seed=derive_key(rep_key, _TAG_PILOT)))
        pilot = pilot_full.subset(np.flatnonzero(pilot_full.Z == 0))
        tau = true_att(analysis)
    except Exception:
        return rep, None, [(np.nan, np.nan)] * len(grid)

    spectral_cache: dict[tuple, SpectralFeatures | Exception] = {}
    if fit_runner is None:
        for config in grid:
            if config.kernel == KERNEL_NONE:
                continue
            key = (config.kernel, _params_fingerprint(config))
            if key in spectral_cache:
                continue
            r_max = max(
                min(c.r, analysis.n)
                for c in grid
                if (c.kernel, _params_fingerprint(c)) == key
            )
            seed_tag = _MODEL_SEED_TAG.get(config.kernel, 4)
            try:
                spectral_cache[key] = _spectral_for(
                    config, pilot, analysis, derive_key(rep_key, seed_tag), r_max
                )
            except Exception as exc:  # recorded per config below
                spectral_cache[key] = exc

    out = []
    for config in grid:
        try:
            if fit_runner is not None:
                diag = fit_runner(pilot, analysis, config, derive_key(rep_key, 9))
            else:
                spectral = None
                if config.kernel != KERNEL_NONE:
                    cached = spectral_cache[(config.kernel, _params_fingerprint(config))]
                    if isinstance(cached, Exception):
                        raise cached
                    spectral = cached
                diag = _single_fit(pilot, analysis, config, 0, spectral=spectral)
            out.append((float(diag.att), float(diag.ess)))
        except Exception:
            out.append((np.nan, np.nan))
    return rep, tau, out


def run_monte_carlo(
    dgp: DgpSpec,
    grid: list[PipelineConfig],
    reps: int,
    jobs: int = 1,
    fit_runner=None,
    progress: bool = False,
) -> list[MetricsRow]:
    """Replicated sweep over a configuration grid; never aborts on a bad rep.

    Error basis: relative errors (att - tau)/tau for the tarr design;
    absolute errors att - tau for the kim design, whose true ATT is zero.
    The result is a pure function of (dgp.seed, grid, reps), independent of
    ``jobs``.
    """
    if reps < 1:
        raise InvalidSpecError("need at least one replication")
    if not grid:
        raise InvalidSpecError("empty configuration grid")
    relative = dgp.kind == DGP_TARR

    results: dict[int, tuple] = {}
    if jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            futures = [
                pool.submit(_run_replication, dgp, grid, rep, fit_runner)
                for rep in range(reps)
            ]
            for done, fut in enumerate(futures, 1):
                rep, tau, vals = fut.result()
                results[rep] = (tau, vals)
                if progress and done % max(1, reps // 20) == 0:
                    print(f"replication {done}/{reps}", file=sys.stderr)
    else:
        for rep in range(reps):
            rep_, tau, vals = _run_replication(dgp, grid, rep, fit_runner)
            results[rep_] = (tau, vals)
            if progress and (rep + 1) % max(1, reps // 20) == 0:
                print(f"replication {rep + 1}/{reps}", file=sys.stderr)

    rows = []
    for ci, config in enumerate(grid):
        errs = np.full(reps, np.nan)
        esses = np.full(reps, np.nan)
        for rep in range(reps):
            tau, vals = results[rep]
            att, ess_val = vals[ci]
            if tau is None or np.isnan(att):
                continue
            errs[rep] = (att - tau) / tau if relative else att - tau
            esses[rep] = ess_val
        try:
            abs_bias, rmse, n_used = summarize_metrics(errs)
        except InvalidSpecError:
            abs_bias, rmse, n_used = np.nan, np.nan, 0
        good_ess = esses[~np.isnan(esses)]
        rows.append(
            MetricsRow(
                feature_grouping=config.label,
                kernel=config.kernel,
                num_pcs=0 if config.kernel == KERNEL_NONE else config.r,
                reps=reps,
                abs_rel_bias=abs_bias,
                rel_rmse=rmse,
                ess_mean=float(good_ess.mean()) if good_ess.size else np.nan,
                failures=reps - n_used,
            )
        )
    return rows


def write_metrics_csv(rows: list[MetricsRow], path: str) -> None:
    """Exact documented schema, %.17g floats, deterministic bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_CSV_HEADER + "\n")
        for row in rows:
            fh.write(
                "%s,%s,%d,%d,%.17g,%.17g,%.17g,%d\n"
                % (
                    row.feature_grouping,
                    row.kernel,
                    row.num_pcs,
                    row.reps,
                    row.abs_rel_bias,
                    row.rel_rmse,
                    row.ess_mean,
                    row.failures,
                )
            )
