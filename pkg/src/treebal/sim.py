"""Synthetic data generators with exact potential-outcome bookkeeping.

Two data-generating processes are provided, tagged ``tarr`` and ``kim`` after
the benchmark designs they follow.  Both keep Y(0) and Y(1) for every unit so
the per-dataset ATT is known exactly; external CSV data gets the same
container with the truth flagged unavailable.

Variate layout (fixed per unit, drawn from `rng.variate_matrix`):

  tarr: columns 0-9 are normals W1..W10; column 10 is the treatment uniform
        (Z=1 iff u < propensity); column 11 is the outcome noise normal,
        shared by both potential outcomes.
  kim:  columns 0-2 are normals mapped through the Cholesky factor below;
        column 3 is the uniform for X4 in [-3, 3]; column 4 is a normal whose
        square is X5 (chi-squared, 1 df); column 5 is the uniform for the
        X6 coin (X6=1 iff u < 0.5); column 6 is the treatment-score noise
        normal (scaled by sigma_eps); column 7 is the outcome noise normal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataFormatError, InvalidSpecError, TruthUnavailableError
from .rng import variate_matrix
from scipy.special import ndtri

DGP_TARR = "tarr"
DGP_KIM = "kim"
DGP_EXTERNAL = "external"

# Outcome slope vector of the tarr design: 27.4*W1 + 13.7*(W2 + W3 + W4).
_TARR_SLOPES = np.array([27.4, 13.7, 13.7, 13.7])

# Lower Cholesky factor of the kim covariance [[2,1,-1],[1,1,-.5],[-1,-.5,1]];
# exact closed form, documented so other implementations can match it.
_KIM_CHOL = np.array(
    [
        [np.sqrt(2.0), 0.0, 0.0],
        [np.sqrt(0.5), np.sqrt(0.5), 0.0],
        [-np.sqrt(0.5), 0.0, np.sqrt(0.5)],
    ]
)


@dataclass
class LabeledSample:
    """Covariates, treatment, observed outcome and (if simulated) both potential outcomes."""

    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    y0: np.ndarray | None
    y1: np.ndarray | None
    dgp_tag: str

    def __post_init__(self) -> None:
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Z = np.asarray(self.Z, dtype=np.int64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.shape[0] != self.Z.shape[0] or self.Z.shape[0] != self.Y.shape[0]:
            raise InvalidSpecError("X, Z, Y must have one row per unit")
        if not np.isin(self.Z, (0, 1)).all():
            raise InvalidSpecError("treatment vector must be 0/1")
        if (self.y0 is None) != (self.y1 is None):
            raise InvalidSpecError("y0 and y1 must be provided together")
        if self.y0 is not None:
            self.y0 = np.asarray(self.y0, dtype=np.float64)
            self.y1 = np.asarray(self.y1, dtype=np.float64)
            selected = np.where(self.Z == 1, self.y1, self.y0)
            if not np.array_equal(self.Y, selected):
                raise InvalidSpecError("Y must equal the potential outcome selected by Z")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.y0 is not None

    def subset(self, idx: np.ndarray) -> "LabeledSample":
        """New sample containing the rows ``idx`` (in the given order)."""
        return LabeledSample(
            X=self.X[idx],
            Z=self.Z[idx],
            Y=self.Y[idx],
            y0=None if self.y0 is None else self.y0[idx],
            y1=None if self.y1 is None else self.y1[idx],
            dgp_tag=self.dgp_tag,
        )


@dataclass
class DgpSpec:
    """Which generator to run, at what size, with what seed."""

    kind: str
    n: int
    seed: int
    sigma_eps_sq: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in (DGP_TARR, DGP_KIM):
            raise InvalidSpecError(f"unknown DGP kind {self.kind!r}")
        if self.n < 2:
            raise InvalidSpecError("n must be at least 2")
        if self.kind == DGP_KIM:
            if self.sigma_eps_sq is None or self.sigma_eps_sq <= 0:
                raise InvalidSpecError("kim DGP requires positive sigma_eps_sq")
        elif self.sigma_eps_sq is not None:
            raise InvalidSpecError("sigma_eps_sq only applies to the kim DGP")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF


def _tarr_covariates(W: np.ndarray) -> np.ndarray:
    X = W.copy()
    X[:, 0] = np.exp(W[:, 0] / 2.0)
    X[:, 1] = W[:, 1] / (1.0 + np.exp(W[:, 0]))
    X[:, 2] = (W[:, 0] * W[:, 2] / 25.0 + 0.6) ** 3
    X[:, 3] = (W[:, 1] + W[:, 3] + 20.0) ** 2
    return X


def tarr_propensity(W: np.ndarray) -> np.ndarray:
    """Treatment probability of the tarr design given the latent draws."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    score = -W[:, 0] - 0.1 * W[:, 3]
    return 1.0 / (1.0 + np.exp(-score))


def _tarr_potentials(W: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = W[:, :4] @ _TARR_SLOPES
    y0 = 200.0 - 0.5 * s + eps
    y1 = 210.0 + 1.0 * s + eps
    return y0, y1


def tarr_sample_from_latent(
    W: np.ndarray, Z: np.ndarray, eps: np.ndarray | None = None
) -> LabeledSample:
    """Debug constructor: build a tarr sample from forced latent draws.

    ``W`` is n x 10; ``eps`` defaults to zeros.  Used by tests to pin the
    generator to hand-evaluated anchor points.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if W.shape[1] != 10:
        raise InvalidSpecError("tarr latent matrix must have 10 columns")
    Z = np.asarray(Z, dtype=np.int64)
    eps = np.zeros(W.shape[0]) if eps is None else np.asarray(eps, dtype=np.float64)
    y0, y1 = _tarr_potentials(W, eps)
    return LabeledSample(
        X=_tarr_covariates(W),
        Z=Z,
        Y=np.where(Z == 1, y1, y0),
        y0=y0,
        y1=y1,
        dgp_tag=DGP_TARR,
    )


def _gen_tarr(spec: DgpSpec) -> LabeledSample:
    u = variate_matrix(spec.seed, spec.n, 12)
    W = ndtri(u[:, :10])
    Z = (u[:, 10] < tarr_propensity(W)).astype(np.int64)
    eps = ndtri(u[:, 11])
    y0, y1 = _tarr_potentials(W, eps)
    return LabeledSample(
        X=_tarr_covariates(W),
        Z=Z,
        Y=np.where(Z == 1, y1, y0),
        y0=y0,
        y1=y1,
        dgp_tag=DGP_TARR,
    )


def _gen_kim(spec: DgpSpec) -> LabeledSample:
    u = variate_matrix(spec.seed, spec.n, 8)
    g = ndtri(u[:, :3])
    X = np.empty((spec.n, 6))
    X[:, :3] = g @ _KIM_CHOL.T
    X[:, 3] = -3.0 + 6.0 * u[:, 3]
    X[:, 4] = ndtri(u[:, 4]) ** 2
    X[:, 5] = (u[:, 5] < 0.5).astype(np.float64)
    eps = np.sqrt(spec.sigma_eps_sq) * ndtri(u[:, 6])
    score = (
        X[:, 0] ** 2
        + 2.0 * X[:, 1] ** 2
        - 2.0 * X[:, 2] ** 2
        - (X[:, 3] + 1.0) ** 3
        - 0.5 * np.log(X[:, 4] + 10.0)
        + X[:, 5]
        - 1.5
        + eps
    )
    Z = (score > 0.0).astype(np.int64)
    eta = ndtri(u[:, 7])
    y = (X[:, 0] + X[:, 1] + X[:, 4]) ** 2 + eta
    # Y is unaffected by Z, so the ATT is zero by construction.
    return LabeledSample(X=X, Z=Z, Y=y, y0=y.copy(), y1=y.copy(), dgp_tag=DGP_KIM)


def gen_dataset(spec: DgpSpec) -> LabeledSample:
    """Draw one dataset; bit-for-bit reproducible from ``spec.seed``."""
    if spec.kind == DGP_TARR:
        return _gen_tarr(spec)
    return _gen_kim(spec)


def true_att(sample: LabeledSample) -> float:
    """Treated-sample mean of Y(1) - Y(0)."""
    if not sample.has_truth:
        raise TruthUnavailableError("sample carries no potential outcomes")
    treated = sample.Z == 1
    if not treated.any():
        raise TruthUnavailableError("sample has no treated units")
    return float(np.mean(sample.y1[treated] - sample.y0[treated]))


def map_covariates(
    sample: LabeledSample, fns: Callable[[np.ndarray], np.ndarray] | Sequence[Callable]
) -> LabeledSample:
    """Apply a per-column transform (one callable, or one per column)."""
    X = sample.X.copy()
    if callable(fns):
        fns = [fns] * X.shape[1]
    if len(fns) != X.shape[1]:
        raise InvalidSpecError("need one transform per covariate column")
    for j, fn in enumerate(fns):
        X[:, j] = fn(X[:, j])
    return LabeledSample(
        X=X, Z=sample.Z, Y=sample.Y, y0=sample.y0, y1=sample.y1, dgp_tag=sample.dgp_tag
    )


def load_csv(path: str, treatment_col: str, outcome_col: str) -> LabeledSample:
    """Read an external dataset: header row, covariate columns plus Z and Y.

    The treatment column must contain 0/1 integers; all other non-designated
    columns are treated as numeric covariates (decimal point, UTF-8).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in (treatment_col, outcome_col):
            if col not in header:
                raise DataFormatError(f"{path}: missing column {col!r}")
        z_idx = header.index(treatment_col)
        y_idx = header.index(outcome_col)
        cov_idx = [j for j in range(len(header)) if j not in (z_idx, y_idx)]
        if not cov_idx:
            raise DataFormatError(f"{path}: no covariate columns")
        X_rows: list[list[float]] = []
        Z_rows: list[int] = []
        Y_rows: list[float] = []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}"
                )
            raw_z = row[z_idx].strip()
            if raw_z not in ("0", "1"):
                raise DataFormatError(
                    f"{path}: row {row_no}: treatment value {raw_z!r} is not 0/1"
                )
            try:
                X_rows.append([float(row[j]) for j in cov_idx])
                Y_rows.append(float(row[y_idx]))
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {row_no}: {exc}") from None
            Z_rows.append(int(raw_z))
    if not X_rows:
        raise DataFormatError(f"{path}: no data rows")
    return LabeledSample(
        X=np.array(X_rows),
        Z=np.array(Z_rows),
        Y=np.array(Y_rows),
        y0=None,
        y1=None,
        dgp_tag=DGP_EXTERNAL,
    )
