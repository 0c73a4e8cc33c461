"""Kernel matrices, spectral truncation, and balancing-feature assembly.

Forest kernels count leaf co-membership exactly: co-occurrence counts are
accumulated through 0/1 matrix products whose entries stay exact integers, so
every kernel entry is an exact multiple of 1/(B*T), the diagonal is exactly 1,
and the matrix is exactly symmetric.

Kernel matrices are dense; sample size is capped at MAX_KERNEL_N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidSpecError
from .forest import EnsembleModel
from .trees import count_leaves, leaf_ids

MAX_KERNEL_N = 20000
_ONEHOT_CHUNK_COLS = 4096

MODE_RAW_ONLY = "raw_only"
MODE_KERNEL_ONLY = "kernel_only"
MODE_KERNEL_PLUS_RAW = "kernel_plus_raw"
FEATURE_MODES = (MODE_RAW_ONLY, MODE_KERNEL_ONLY, MODE_KERNEL_PLUS_RAW)


@dataclass
class KernelMatrix:
    """Dense symmetric similarity matrix with a provenance tag."""

    K: np.ndarray
    kind: str

    @property
    def n(self) -> int:
        return self.K.shape[0]


@dataclass
class SpectralFeatures:
    """Top-r principal components of a kernel, columns scaled by singular values."""

    Phi: np.ndarray
    sigmas: np.ndarray
    r: int


@dataclass
class FeatureMatrix:
    """Assembled balancing features with block-variance bookkeeping.

    ``block_spans`` holds (raw span, kernel span) as half-open column ranges,
    with None for an absent block.  Each present block is mean-centered and
    scaled so its column variances (ddof=1) sum to one.
    """

    Phi: np.ndarray
    block_spans: tuple[tuple[int, int] | None, tuple[int, int] | None]
    mode: str


def _check_n(n: int) -> None:
    if n > MAX_KERNEL_N:
        raise InvalidSpecError(
            f"dense kernels are capped at n={MAX_KERNEL_N}; got n={n}"
        )


def forest_kernel(model: EnsembleModel, X) -> KernelMatrix:
    """K[i,j] = fraction of the B*T trees where rows i and j share a leaf."""
    X = model.check_input(X)
    m = X.shape[0]
    _check_n(m)
    n_trees = len(model.trees)
    counts = np.zeros((m, m))
    rows = np.arange(m)
    # accumulate C @ C.T over column chunks of the one-hot leaf-membership
    # matrix; float32 products of 0/1 blocks this small are exact integers
    chunk = np.zeros((m, _ONEHOT_CHUNK_COLS), dtype=np.float32)
    used = 0
    for _, _, root in model.trees:
        n_leaves = count_leaves(root)
        if used + n_leaves > _ONEHOT_CHUNK_COLS:
            if used:
                counts += (chunk[:, :used] @ chunk[:, :used].T).astype(np.float64)
                chunk[:, :used] = 0.0
                used = 0
            if n_leaves > _ONEHOT_CHUNK_COLS:
                # one very deep tree: give it a dedicated one-hot block
                wide = np.zeros((m, n_leaves), dtype=np.float32)
                wide[rows, leaf_ids(root, X)] = 1.0
                counts += (wide @ wide.T).astype(np.float64)
                continue
        ids = leaf_ids(root, X)
        chunk[rows, used + ids] = 1.0
        used += n_leaves
    if used:
        counts += (chunk[:, :used] @ chunk[:, :used].T).astype(np.float64)
    return KernelMatrix(K=counts / n_trees, kind=model.kind)


def gaussian_kernel(X, b: float) -> KernelMatrix:
    """exp(-||x_i - x_j||^2 / b) on caller-standardized covariates."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_n(X.shape[0])
    if not b > 0:
        raise InvalidSpecError("bandwidth must be positive")
    col_means = X.mean(axis=0)
    scale = max(1.0, float(np.abs(X).max(initial=0.0)))
    if np.abs(col_means).max(initial=0.0) > 1e-6 * scale:
        raise InvalidSpecError(
            "gaussian kernel expects standardized input (column means near 0)"
        )
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    K = np.exp(-d2 / b)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    return KernelMatrix(K=K, kind="gaussian")


def select_bandwidth_max_variance(
    X, grid: np.ndarray | None = None
) -> float:
    """Bandwidth maximizing the variance of the off-diagonal kernel entries.

    Default grid is 25 log-spaced points spanning p/16 .. 256p around the
    fixed default b = 2p.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    p = X.shape[1]
    if grid is None:
        grid = np.logspace(np.log10(p / 16.0), np.log10(256.0 * p), 25)
    mask = ~np.eye(X.shape[0], dtype=bool)
    best_b, best_var = float(grid[0]), -1.0
    for b in grid:
        K = gaussian_kernel(X, float(b)).K
        v = float(K[mask].var())
        if v > best_var:
            best_b, best_var = float(b), v
    return best_b


def polynomial_kernel(X, Sigma, c: float, d: int) -> KernelMatrix:
    """(x_i' Sigma x_j + c)^d with PSD Sigma."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_n(X.shape[0])
    Sigma = np.asarray(Sigma, dtype=np.float64)
    if Sigma.shape != (X.shape[1], X.shape[1]):
        raise DimensionError("Sigma must be p x p")
    if np.abs(Sigma - Sigma.T).max(initial=0.0) > 1e-10:
        raise InvalidSpecError("Sigma must be symmetric")
    if d < 1:
        raise InvalidSpecError("polynomial degree must be >= 1")
    if np.linalg.eigvalsh(Sigma).min() < -1e-8:
        raise InvalidSpecError("Sigma must be positive semidefinite")
    G = X @ Sigma @ X.T
    K = (0.5 * (G + G.T) + c) ** d
    return KernelMatrix(K=K, kind="polynomial")


def _require_symmetric(K: np.ndarray) -> np.ndarray:
    tol = 1e-10 * max(1.0, float(np.abs(K).max(initial=0.0)))
    if np.abs(K - K.T).max(initial=0.0) > tol:
        raise InvalidSpecError("kernel matrix is not symmetric")
    return 0.5 * (K + K.T)


def spectral_features(K: KernelMatrix | np.ndarray, r: int) -> SpectralFeatures:
    """Columns sigma_k * U_k for the r largest eigenvalues sigma_k^2 of K.

    Negative eigenvalues are clamped to zero before the square root; r is
    silently capped at the number of eigenvalues above 1e-10 times the
    largest.
    """
    M = K.K if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
    if r < 1:
        raise InvalidSpecError("r must be a positive integer")
    M = _require_symmetric(M)
    eigvals, eigvecs = np.linalg.eigh(M)
    eigvals = eigvals[::-1]
    eigvecs = eigvecs[:, ::-1]
    r = min(r, M.shape[0])
    top = eigvals[0] if eigvals.size else 0.0
    keep = int(np.sum(eigvals[:r] > 1e-10 * max(top, 0.0))) if top > 0 else 0
    sigmas = np.sqrt(np.clip(eigvals[:keep], 0.0, None))
    Phi = eigvecs[:, :keep] * sigmas
    return SpectralFeatures(Phi=Phi, sigmas=sigmas, r=keep)


def _standardized_raw_block(X_raw: np.ndarray) -> np.ndarray:
    """Columns centered and scaled to variance 1/p each (ddof=1)."""
    p = X_raw.shape[1]
    centered = X_raw - X_raw.mean(axis=0)
    sd = centered.std(axis=0, ddof=1)
    dead = np.flatnonzero(sd == 0.0)
    if dead.size:
        raise InvalidSpecError(
            f"raw covariate column(s) {dead.tolist()} have zero variance"
        )
    return centered / (sd * np.sqrt(p))


def _scaled_kernel_block(spec: SpectralFeatures) -> np.ndarray:
    """Centered PC block with one common scale so column variances sum to 1."""
    if spec.r < 1 or spec.Phi.shape[1] < 1:
        raise InvalidSpecError("kernel block is empty (r=0 after truncation)")
    centered = spec.Phi - spec.Phi.mean(axis=0)
    total = float(centered.var(axis=0, ddof=1).sum())
    if total <= 0.0:
        raise InvalidSpecError("kernel block has zero total variance")
    return centered / np.sqrt(total)


def assemble_features(
    X_raw, spec: SpectralFeatures | None, mode: str
) -> FeatureMatrix:
    """Build the balancing-feature matrix for the requested block layout."""
    if mode not in FEATURE_MODES:
        raise InvalidSpecError(f"unknown feature mode {mode!r}")
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=np.float64))
    if mode == MODE_RAW_ONLY:
        raw = _standardized_raw_block(X_raw)
        return FeatureMatrix(Phi=raw, block_spans=((0, raw.shape[1]), None), mode=mode)
    if spec is None:
        raise InvalidSpecError(f"mode {mode!r} requires spectral features")
    if spec.Phi.shape[0] != X_raw.shape[0]:
        raise DimensionError("raw covariates and kernel features disagree on n")
    kern = _scaled_kernel_block(spec)
    if mode == MODE_KERNEL_ONLY:
        return FeatureMatrix(
            Phi=kern, block_spans=(None, (0, kern.shape[1])), mode=mode
        )
    raw = _standardized_raw_block(X_raw)
    p, r = raw.shape[1], kern.shape[1]
    return FeatureMatrix(
        Phi=np.hstack([raw, kern]),
        block_spans=((0, p), (p, p + r)),
        mode=mode,
    )


def kernel_imbalance(K: KernelMatrix | np.ndarray, w, Z) -> float:
    """Squared RKHS-norm imbalance between weighted controls and treated mean.

    ``w`` is a nonnegative weight per unit (treated entries are usually 0);
    the treated side uses 1/n1 weights.
    """
    M = K.K if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    Z = np.asarray(Z)
    if not (M.shape[0] == w.shape[0] == Z.shape[0]):
        raise DimensionError("kernel, weights and treatment must share length")
    if (w < 0).any():
        raise InvalidSpecError("weights must be nonnegative")
    n1 = int((Z == 1).sum())
    if n1 == 0:
        raise InvalidSpecError("no treated units")
    a0 = (1 - Z) * w
    a1 = (Z == 1) / n1
    diff = a0 - a1
    return max(float(diff @ M @ diff), 0.0)


def matrix_to_csv(M: np.ndarray, path: str) -> None:
    """Row-major CSV at full %.17g precision (golden-file friendly)."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with open(path, "w", encoding="utf-8") as fh:
        for row in M:
            fh.write(",".join("%.17g" % v for v in row))
            fh.write("\n")
