"""Bayesian additive regression trees via backfitting MCMC.

The sampler keeps a fixed number of trees and updates each with one
Metropolis-Hastings structural move per sweep (grow / prune / change), then
conjugate draws for leaf means and the error variance.  The outcome is
internally mapped to [-0.5, 0.5]; leaf values are stored on that scale and
`forest.predict_ensemble` maps predictions back.

Structural move acceptance ratios follow the usual conjugate-normal marginal
likelihood with rule proposals drawn from the (data-dependent) rule prior, so
rule-selection terms cancel and only leaf sufficient statistics, the depth
prior, and the leaf/no-grandchild counts enter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .errors import InvalidSpecError
from .forest import KIND_BART, EnsembleModel
from .trees import Internal, Leaf, TreeNode, renumber_leaves

_P_GROW, _P_PRUNE, _P_CHANGE = 0.4, 0.4, 0.2


@dataclass
class BartParams:
    T: int = 100
    burn_in: int = 250
    B: int = 50
    thin: int = 2
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.90

    def __post_init__(self) -> None:
        if min(self.T, self.burn_in, self.B, self.thin) < 1:
            raise InvalidSpecError("T, burn_in, B, thin must all be positive")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidSpecError("alpha must lie in (0, 1)")
        if min(self.beta, self.k, self.nu) <= 0 or not 0.0 < self.q < 1.0:
            raise InvalidSpecError("beta, k, nu must be positive and q in (0, 1)")


class _Node:
    """Mutable sampler node; leaves have left=None and carry training rows."""

    __slots__ = ("var", "thr", "left", "right", "rows", "depth", "mu")

    def __init__(self, rows: np.ndarray, depth: int):
        self.var = -1
        self.thr = 0.0
        self.left: "_Node | None" = None
        self.right: "_Node | None" = None
        self.rows = rows
        self.depth = depth
        self.mu = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _leaves(root: _Node) -> list[_Node]:
    out, stack = [], [root]
    while stack:
        node = stack.pop()
        if node.is_leaf:
            out.append(node)
        else:
            stack.append(node.right)
            stack.append(node.left)
    return out


def _nogs(root: _Node) -> list[_Node]:
    """Internal nodes whose children are both leaves."""
    out, stack = [], [root]
    while stack:
        node = stack.pop()
        if not node.is_leaf:
            if node.left.is_leaf and node.right.is_leaf:
                out.append(node)
            else:
                stack.append(node.right)
                stack.append(node.left)
    return out


def _depth(root: _Node) -> int:
    best, stack = 0, [(root, 0)]
    while stack:
        node, d = stack.pop()
        if node.is_leaf:
            best = max(best, d)
        else:
            stack.append((node.left, d + 1))
            stack.append((node.right, d + 1))
    return best


def _draw_rule(X, rows, rng):
    """Uniform var, uniform midpoint threshold over the node's data, or None."""
    var = int(rng.integers(X.shape[1]))
    vals = np.unique(X[rows, var])
    if vals.shape[0] < 2:
        return None
    pos = int(rng.integers(vals.shape[0] - 1))
    thr = 0.5 * (vals[pos] + vals[pos + 1])
    if not thr > vals[pos]:
        thr = vals[pos + 1]
    return var, float(thr)


def _log_marginal(m: float, s1: float, sigma2: float, sigma_mu2: float) -> float:
    """Leaf marginal log-likelihood, dropping terms that cancel in ratios."""
    denom = sigma2 + m * sigma_mu2
    return 0.5 * np.log(sigma2 / denom) + sigma_mu2 * s1 * s1 / (2.0 * sigma2 * denom)


def _log_depth_split_prior(d: int, alpha: float, beta: float) -> float:
    """log prior odds of splitting a depth-d leaf into two depth-(d+1) leaves."""
    p_split_d = alpha * (1.0 + d) ** (-beta)
    p_split_d1 = alpha * (2.0 + d) ** (-beta)
    return np.log(p_split_d) + 2.0 * np.log(1.0 - p_split_d1) - np.log(1.0 - p_split_d)


def _freeze(node: _Node) -> TreeNode:
    if node.is_leaf:
        return Leaf(leaf_id=-1, value=float(node.mu))
    return Internal(
        var=node.var,
        threshold=node.thr,
        left=_freeze(node.left),
        right=_freeze(node.right),
    )


def fit_bart(X, y, params: BartParams | None = None, seed: int = 0) -> EnsembleModel:
    """Run the sampler and return the retained posterior draws of all trees."""
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise InvalidSpecError("X and y must have the same number of rows")
    n = X.shape[0]
    if n < 10:
        raise InvalidSpecError("BART needs at least 10 training rows")
    if not np.isfinite(y).all() or not np.isfinite(X).all():
        raise InvalidSpecError("training data must be finite")
    params = params or BartParams()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0xBA27]))

    y_min, y_max = float(y.min()), float(y.max())
    spread = y_max - y_min if y_max > y_min else 1.0
    ys = (y - y_min) / spread - 0.5

    T = params.T
    sigma_mu2 = (0.5 / (params.k * np.sqrt(T))) ** 2
    sigma_hat2 = max(float(np.var(ys, ddof=1)), 1e-12)
    # calibrate the variance prior so P(sigma2 < sigma_hat2) = q
    lam = sigma_hat2 * chi2.ppf(1.0 - params.q, params.nu) / params.nu
    sigma2 = sigma_hat2

    roots = [_Node(np.arange(n), 0) for _ in range(T)]
    tree_fit = np.zeros((T, n))
    total_fit = np.zeros(n)

    retained: list[tuple[int, int, TreeNode]] = []
    sigma2_draws: list[float] = []
    retained_depths: list[int] = []
    n_iter = params.burn_in + params.B * params.thin
    draw_idx = 0

    for it in range(n_iter):
        for t in range(T):
            root = roots[t]
            R = ys - total_fit + tree_fit[t]
            u_move = rng.random()
            if u_move < _P_GROW:
                _try_grow(root, X, R, sigma2, sigma_mu2, params, rng)
            elif u_move < _P_GROW + _P_PRUNE:
                _try_prune(root, X, R, sigma2, sigma_mu2, params, rng)
            else:
                _try_change(root, X, R, sigma2, sigma_mu2, rng)
            # conjugate leaf-mean draws and fit refresh; leaves partition the
            # rows, so tree_fit[t] is fully overwritten in place
            new_fit = tree_fit[t]
            for leaf in _leaves(root):
                rows = leaf.rows
                m = rows.shape[0]
                s1 = float(R[rows].sum())
                denom = sigma2 + m * sigma_mu2
                mean_post = sigma_mu2 * s1 / denom
                sd_post = np.sqrt(sigma2 * sigma_mu2 / denom)
                leaf.mu = mean_post + sd_post * rng.standard_normal()
                new_fit[rows] = leaf.mu
            total_fit = ys - R + new_fit  # old total minus old tree fit, plus new
        rss = float(((ys - total_fit) ** 2).sum())
        sigma2 = (params.nu * lam + rss) / rng.chisquare(params.nu + n)
        if it >= params.burn_in and (it - params.burn_in) % params.thin == 0:
            for t in range(T):
                frozen = renumber_leaves(_freeze(roots[t]))
                retained.append((draw_idx, t, frozen))
                retained_depths.append(_depth(roots[t]))
            sigma2_draws.append(sigma2 * spread * spread)
            draw_idx += 1

    return EnsembleModel(
        trees=retained,
        kind=KIND_BART,
        B=params.B,
        T=T,
        p=X.shape[1],
        fit_metadata={
            "params": params,
            "seed": seed,
            "y_min": y_min,
            "y_max": y_max,
            "sigma2_draws": np.array(sigma2_draws),
            "retained_depths": np.array(retained_depths),
        },
    )


def _try_grow(root, X, R, sigma2, sigma_mu2, params, rng) -> None:
    leaves = _leaves(root)
    leaf = leaves[int(rng.integers(len(leaves)))]
    rule = _draw_rule(X, leaf.rows, rng)
    if rule is None:
        return
    var, thr = rule
    go_left = X[leaf.rows, var] < thr
    left_rows = leaf.rows[go_left]
    right_rows = leaf.rows[~go_left]
    m, mL, mR = leaf.rows.shape[0], left_rows.shape[0], right_rows.shape[0]
    s1 = float(R[leaf.rows].sum())
    s1L = float(R[left_rows].sum())
    log_lik = (
        _log_marginal(mL, s1L, sigma2, sigma_mu2)
        + _log_marginal(mR, s1 - s1L, sigma2, sigma_mu2)
        - _log_marginal(m, s1, sigma2, sigma_mu2)
    )
    n_leaves = len(leaves)
    # count of prunable nodes after the grow: the new internal node is one;
    # the leaf's parent stops being one if its other child is a leaf
    n_nog_after = len(_nogs(root)) + 1
    parent = _find_parent(root, leaf)
    if parent is not None and (
        (parent.left is leaf and parent.right.is_leaf)
        or (parent.right is leaf and parent.left.is_leaf)
    ):
        n_nog_after -= 1
    log_accept = (
        log_lik
        + _log_depth_split_prior(leaf.depth, params.alpha, params.beta)
        + np.log(_P_PRUNE / _P_GROW)
        + np.log(n_leaves)
        - np.log(n_nog_after)
    )
    if np.log(rng.random()) < log_accept:
        leaf.var, leaf.thr = var, thr
        leaf.left = _Node(left_rows, leaf.depth + 1)
        leaf.right = _Node(right_rows, leaf.depth + 1)


def _try_prune(root, X, R, sigma2, sigma_mu2, params, rng) -> None:
    nogs = _nogs(root)
    if not nogs:
        return
    node = nogs[int(rng.integers(len(nogs)))]
    mL, mR = node.left.rows.shape[0], node.right.rows.shape[0]
    s1L = float(R[node.left.rows].sum())
    s1R = float(R[node.right.rows].sum())
    log_lik = (
        _log_marginal(mL + mR, s1L + s1R, sigma2, sigma_mu2)
        - _log_marginal(mL, s1L, sigma2, sigma_mu2)
        - _log_marginal(mR, s1R, sigma2, sigma_mu2)
    )
    n_leaves_after = len(_leaves(root)) - 1
    log_accept = (
        log_lik
        - _log_depth_split_prior(node.depth, params.alpha, params.beta)
        + np.log(_P_GROW / _P_PRUNE)
        + np.log(len(nogs))
        - np.log(n_leaves_after)
    )
    if np.log(rng.random()) < log_accept:
        node.rows = np.concatenate([node.left.rows, node.right.rows])
        node.left = node.right = None
        node.var = -1


def _try_change(root, X, R, sigma2, sigma_mu2, rng) -> None:
    nogs = _nogs(root)
    if not nogs:
        return
    node = nogs[int(rng.integers(len(nogs)))]
    pooled = np.concatenate([node.left.rows, node.right.rows])
    rule = _draw_rule(X, pooled, rng)
    if rule is None:
        return
    var, thr = rule
    go_left = X[pooled, var] < thr
    new_left = pooled[go_left]
    new_right = pooled[~go_left]
    s1L_old = float(R[node.left.rows].sum())
    s1R_old = float(R[node.right.rows].sum())
    s1L_new = float(R[new_left].sum())
    s1R_new = s1L_old + s1R_old - s1L_new
    log_lik = (
        _log_marginal(new_left.shape[0], s1L_new, sigma2, sigma_mu2)
        + _log_marginal(new_right.shape[0], s1R_new, sigma2, sigma_mu2)
        - _log_marginal(node.left.rows.shape[0], s1L_old, sigma2, sigma_mu2)
        - _log_marginal(node.right.rows.shape[0], s1R_old, sigma2, sigma_mu2)
    )
    if np.log(rng.random()) < log_lik:
        node.var, node.thr = var, thr
        node.left.rows = new_left
        node.right.rows = new_right


def _find_parent(root: _Node, child: _Node) -> _Node | None:
    stack = [root]
    while stack:
        node = stack.pop()
        if not node.is_leaf:
            if node.left is child or node.right is child:
                return node
            stack.append(node.right)
            stack.append(node.left)
    return None
