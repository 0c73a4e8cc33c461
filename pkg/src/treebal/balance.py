"""Simplex-constrained balancing weights and the weighting estimators.

The solver minimizes  ||Phi_c' w - phibar_1||^2 + lambda ||w||^2  over the
simplex of control-unit weights with accelerated projected gradient descent:
step size 1/L with L = 2(||Phi_c' Phi_c||_2 + lambda) estimated by power
iteration, exact Euclidean simplex projection, restart (with step-halving
fallback) whenever acceleration would increase the objective, and a
projected-gradient-norm stopping certificate.  Treated units carry implicit
1/n1 weights and are excluded from the optimization variable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionError, InvalidSpecError, SolverError
from .kernel import FeatureMatrix


@dataclass
class BalanceProblem:
    """Features, treatment labels and the dispersion penalty weight."""

    Phi: FeatureMatrix | np.ndarray
    Z: np.ndarray
    lam: float

    def __post_init__(self) -> None:
        self.Z = np.asarray(self.Z, dtype=np.int64)
        if self.lam < 0:
            raise InvalidSpecError("lambda must be nonnegative")
        mat = self.feature_array
        if mat.shape[0] != self.Z.shape[0]:
            raise DimensionError("features and treatment disagree on n")
        if (self.Z == 1).sum() < 1:
            raise InvalidSpecError("need at least one treated unit")

    @property
    def feature_array(self) -> np.ndarray:
        mat = self.Phi.Phi if isinstance(self.Phi, FeatureMatrix) else self.Phi
        return np.atleast_2d(np.asarray(mat, dtype=np.float64))


@dataclass
class WeightSolution:
    """Control-unit simplex weights plus solver diagnostics."""

    w: np.ndarray
    objective: float
    imbalance_sq: float
    iterations: int
    converged: bool
    ess: float
    objective_history: np.ndarray | None = None


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort algorithm)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.shape[0] + 1)
    rho = idx[u - css / idx > 0][-1]
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def _top_eig_power(S: np.ndarray, iters: int = 200, rtol: float = 1e-12) -> float:
    """Largest eigenvalue of a PSD matrix by power iteration."""
    q = S.shape[0]
    v = np.ones(q) / np.sqrt(q)
    lam = 0.0
    for _ in range(iters):
        Sv = S @ v
        norm = np.linalg.norm(Sv)
        if norm == 0.0:
            return 0.0
        v = Sv / norm
        lam_new = float(v @ S @ v)
        if abs(lam_new - lam) <= rtol * max(lam_new, 1.0):
            return lam_new
        lam = lam_new
    return lam


def solve_weights(
    problem: BalanceProblem, tol: float = 1e-8, max_iter: int = 10000
) -> WeightSolution:
    """Minimize imbalance plus dispersion over the control simplex."""
    Phi = problem.feature_array
    if not np.isfinite(Phi).all():
        raise InvalidSpecError("features must be finite")
    Z = problem.Z
    controls = np.flatnonzero(Z == 0)
    treated = np.flatnonzero(Z == 1)
    n0 = controls.shape[0]
    if n0 == 0:
        raise InvalidSpecError("empty control set")
    lam = float(problem.lam)
    Phi_c = Phi[controls]
    target = Phi[treated].mean(axis=0)

    def objective(w: np.ndarray) -> tuple[float, float]:
        resid = Phi_c.T @ w - target
        imb = float(resid @ resid)
        return imb + lam * float(w @ w), imb

    if n0 == 1:
        warnings.warn("single control unit: returning a point mass", RuntimeWarning)
        w = np.ones(1)
        obj, imb = objective(w)
        return WeightSolution(
            w=w,
            objective=obj,
            imbalance_sq=imb,
            iterations=0,
            converged=True,
            ess=1.0,
            objective_history=np.array([obj]),
        )

    def gradient(w: np.ndarray) -> np.ndarray:
        return 2.0 * (Phi_c @ (Phi_c.T @ w - target)) + 2.0 * lam * w

    L = 2.0 * (_top_eig_power(Phi_c.T @ Phi_c) * 1.01 + lam)
    if L <= 0.0:
        L = 2.0 * max(lam, 1.0)

    x = np.full(n0, 1.0 / n0)
    x_old = x
    t_momentum = 1.0
    f_x, _ = objective(x)
    best_w, best_f = x.copy(), f_x
    history = [best_f]
    converged = False
    iterations = 0

    for _ in range(max_iter):
        iterations += 1
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_momentum * t_momentum))
        y = x + ((t_momentum - 1.0) / t_next) * (x - x_old)
        x_new = project_simplex(y - gradient(y) / L)
        f_new, _ = objective(x_new)
        if f_new > f_x:
            # acceleration overshot: restart momentum with a plain descent step
            t_next = 1.0
            g = gradient(x)
            x_new = project_simplex(x - g / L)
            f_new, _ = objective(x_new)
            backtracks = 0
            while f_new > f_x and backtracks < 60:
                L *= 2.0
                x_new = project_simplex(x - g / L)
                f_new, _ = objective(x_new)
                backtracks += 1
        pg_step = project_simplex(x_new - gradient(x_new) / L)
        pg_norm = L * float(np.linalg.norm(x_new - pg_step))
        x_old, x, t_momentum, f_x = x, x_new, t_next, f_new
        if f_new < best_f:
            best_f, best_w = f_new, x_new.copy()
        history.append(best_f)
        if pg_norm <= tol:
            converged = True
            break

    w = np.maximum(best_w, 0.0)
    w /= w.sum()
    obj, imb = objective(w)
    return WeightSolution(
        w=w,
        objective=obj,
        imbalance_sq=imb,
        iterations=iterations,
        converged=converged,
        ess=ess(w),
        objective_history=np.array(history),
    )


def lambda_heuristic(Phi: FeatureMatrix | np.ndarray, Y, Z) -> float:
    """Residual variance of standardized Y regressed on the features, controls only.

    Y is standardized to mean 0, variance 1 over the control group; the
    regression includes an intercept (standardization is affine) and a small
    ridge (1e-8) so underdetermined designs fall back gracefully.  Returns
    RSS / n0 (zero when control outcomes are constant).
    """
    mat = Phi.Phi if isinstance(Phi, FeatureMatrix) else np.atleast_2d(np.asarray(Phi))
    Y = np.asarray(Y, dtype=np.float64)
    Z = np.asarray(Z)
    controls = np.flatnonzero(Z == 0)
    n0 = controls.shape[0]
    if n0 <= 1:
        raise InvalidSpecError("lambda heuristic needs at least two control units")
    yc = Y[controls]
    sd = yc.std(ddof=1)
    if sd == 0.0:
        return 0.0
    yc = (yc - yc.mean()) / sd
    F = np.hstack([np.ones((n0, 1)), mat[controls]])
    G = F.T @ F + 1e-8 * np.eye(F.shape[1])
    beta = np.linalg.solve(G, F.T @ yc)
    resid = yc - F @ beta
    return float(resid @ resid) / n0


def logistic_ipw(
    Phi: FeatureMatrix | np.ndarray, Z, clip_eps: float = 1e-6
) -> np.ndarray:
    """Control weights proportional to the estimated propensity odds.

    Fits logistic regression of Z on the features (with intercept) by damped
    Newton with ridge 1e-8, clips fitted propensities to
    [clip_eps, 1 - clip_eps], and returns odds weights over the control
    units normalized to sum 1.
    """
    mat = Phi.Phi if isinstance(Phi, FeatureMatrix) else np.atleast_2d(np.asarray(Phi))
    Z = np.asarray(Z, dtype=np.float64)
    if mat.shape[0] != Z.shape[0]:
        raise DimensionError("features and treatment disagree on n")
    if not 0.0 < clip_eps < 0.5:
        raise InvalidSpecError("clip_eps must lie in (0, 0.5)")
    n = mat.shape[0]
    X = np.hstack([np.ones((n, 1)), mat])
    ridge = 1e-8
    beta = np.zeros(X.shape[1])

    def penalized_nll(b: np.ndarray) -> float:
        xb = X @ b
        return float(np.logaddexp(0.0, xb).sum() - Z @ xb + 0.5 * ridge * (b @ b))

    f = penalized_nll(beta)
    tol = 1e-10
    for _ in range(100):
        p = expit(X @ beta)
        grad = X.T @ (p - Z) + ridge * beta
        if np.abs(grad).max() <= tol:
            break
        W = p * (1.0 - p)
        H = (X * W[:, None]).T @ X + ridge * np.eye(X.shape[1])
        step = np.linalg.solve(H, -grad)
        scale = 1.0
        for _ in range(60):
            cand = beta + scale * step
            f_cand = penalized_nll(cand)
            if f_cand <= f:
                break
            scale *= 0.5
        else:
            raise SolverError(
                f"logistic regression line search stalled (|grad|={np.abs(grad).max():.3e})"
            )
        beta, f = cand, f_cand
        if np.abs(scale * step).max() <= tol:
            break  # iterates have stopped moving (ill-conditioned ridge floor)
    else:
        raise SolverError(
            f"logistic regression did not converge in 100 iterations "
            f"(|grad|={np.abs(grad).max():.3e})"
        )
    e_hat = np.clip(expit(X @ beta), clip_eps, 1.0 - clip_eps)
    controls = np.flatnonzero(Z == 0)
    if controls.size == 0:
        raise InvalidSpecError("empty control set")
    odds = e_hat[controls] / (1.0 - e_hat[controls])
    return odds / odds.sum()


def ess(w) -> float:
    """Effective sample size (sum w)^2 / sum w^2; scale invariant."""
    w = np.asarray(w, dtype=np.float64)
    denom = float(w @ w)
    if denom == 0.0:
        raise InvalidSpecError("weights are all zero")
    total = float(w.sum())
    return total * total / denom


def estimate_att(w, Y, Z) -> float:
    """Treated outcome mean minus the weighted control outcome mean."""
    w = np.asarray(w, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    Z = np.asarray(Z)
    treated = Z == 1
    controls = Z == 0
    if not treated.any():
        raise InvalidSpecError("no treated units")
    if w.shape[0] != int(controls.sum()):
        raise DimensionError("need exactly one weight per control unit")
    return float(Y[treated].mean() - w @ Y[controls])


def write_weights_csv(path: str, unit_ids, w, diagnostics: dict | None = None) -> None:
    """`unit_id,weight` rows at %.17g; diagnostics go to `<path>.diag.csv`."""
    w = np.asarray(w, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("unit_id,weight\n")
        for uid, wi in zip(unit_ids, w):
            fh.write("%d,%.17g\n" % (uid, wi))
    if diagnostics:
        with open(f"{path}.diag.csv", "w", encoding="utf-8") as fh:
            fh.write("key,value\n")
            for key, value in diagnostics.items():
                fh.write(f"{key},{value}\n")
