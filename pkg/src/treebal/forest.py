"""Regression forests: CART splitting, bagging, ensemble prediction and I/O.

Split search is exhaustive over midpoints of consecutive distinct sorted
values of each sampled column, maximizing the sum-of-squares reduction.
Ties break to the lowest column index, then the smallest threshold.  All
bootstrap and column-subset draws come from counter-based substreams keyed by
(seed, tree) and (seed, tree, node), so RNG consumption never depends on
covariate values; leaf memberships are therefore exactly invariant under
strictly increasing per-column transforms of X.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataFormatError, DimensionError, InvalidSpecError
from .rng import derive_key, sample_without_replacement, uniforms
from .trees import (
    Internal,
    Leaf,
    TreeNode,
    leaf_values,
    renumber_leaves,
    tree_from_text,
    tree_to_text,
)

KIND_RF = "rf"
KIND_BART = "bart"


@dataclass
class ForestParams:
    """Random-forest fitting knobs.

    ``mtry=None`` means ceil(p/3), resolved when the data dimension is known.
    """

    T: int = 100
    mtry: Optional[int] = None
    min_leaf: int = 5
    max_depth: Optional[int] = None
    bootstrap: bool = True


@dataclass
class EnsembleModel:
    """A flat list of (draw index, tree index, root) plus fit bookkeeping."""

    trees: list[tuple[int, int, TreeNode]]
    kind: str
    B: int
    T: int
    p: int
    fit_metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.trees) != self.B * self.T:
            raise InvalidSpecError("ensemble must contain exactly B*T trees")
        if self.kind == KIND_RF and self.B != 1:
            raise InvalidSpecError("random forests have a single draw (B=1)")

    def check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.p:
            raise DimensionError(
                f"model was fit on {self.p} columns, input has {X.shape[1]}"
            )
        return X


def _validate_training_data(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise DimensionError("X and y must have the same number of rows")
    if X.shape[0] < 2:
        raise InvalidSpecError("need at least 2 training rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise InvalidSpecError("training data must be finite (no missing values)")
    return X, y


def _best_split(X, y, rows, cols, min_leaf, col_values):
    """Best (var, threshold, left_rows, right_rows) or None if no gain > 0.

    ``col_values`` holds the sorted distinct values of each full training
    column.  The returned threshold is the midpoint of the full-column gap
    just above the split's left boundary: no training value lies strictly
    inside that gap, so routing of training rows is decided purely by value
    order (this is what makes leaf memberships exactly invariant under
    strictly increasing per-column transforms).
    """
    yn = y[rows]
    if yn.max() == yn.min():
        return None
    Xn = X[np.ix_(rows, cols)]
    m = rows.shape[0]
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    ys = yn[order]
    s1 = np.cumsum(ys, axis=0)
    s2 = np.cumsum(ys * ys, axis=0)
    t1, t2 = s1[-1], s2[-1]
    cnt = np.arange(1, m, dtype=np.float64)[:, None]
    left_sse = s2[:-1] - s1[:-1] ** 2 / cnt
    right_sse = (t2 - s2[:-1]) - (t1 - s1[:-1]) ** 2 / (m - cnt)
    reduction = (t2 - t1 * t1 / m) - left_sse - right_sse
    valid = (xs[1:] > xs[:-1]) & (cnt >= min_leaf) & ((m - cnt) >= min_leaf)
    reduction[~valid] = -np.inf
    # column-major flatten: ties resolve to lowest column, then smallest threshold
    flat = reduction.T.ravel()
    best = int(np.argmax(flat))
    if not flat[best] > 0.0:
        return None
    c_idx, pos = divmod(best, m - 1)
    col = int(cols[c_idx])
    left_bound = xs[pos, c_idx]
    succ = col_values[col][np.searchsorted(col_values[col], left_bound, side="right")]
    thr = 0.5 * (left_bound + succ)
    if not thr > left_bound:
        # adjacent floats: midpoint rounded down; use the successor instead
        thr = succ
    go_left = X[rows, col] < thr
    return col, float(thr), rows[go_left], rows[~go_left]


def _grow_tree(X, y, rows, mtry, min_leaf, max_depth, tree_key, col_values) -> TreeNode:
    p = X.shape[1]
    root: TreeNode | None = None
    node_counter = 0
    # LIFO stack with right pushed first gives left-first preorder growth,
    # so node keys are a pure function of the (data-determined) tree shape.
    pending: list[tuple[np.ndarray, int, Internal | None, str]] = [
        (rows, 0, None, "left")
    ]
    while pending:
        node_rows, depth, parent, side = pending.pop()
        counter = node_counter
        node_counter += 1
        split = None
        if (max_depth is None or depth < max_depth) and node_rows.shape[0] >= 2 * min_leaf:
            node_key = derive_key(tree_key, 1 + counter)
            cols = sample_without_replacement(node_key, p, mtry)
            split = _best_split(X, y, node_rows, cols, min_leaf, col_values)
        if split is None:
            node: TreeNode = Leaf(leaf_id=-1, value=float(y[node_rows].mean()))
        else:
            col, thr, left_rows, right_rows = split
            node = Internal(var=col, threshold=thr, left=None, right=None)  # type: ignore[arg-type]
            pending.append((right_rows, depth + 1, node, "right"))
            pending.append((left_rows, depth + 1, node, "left"))
        if parent is None:
            root = node
        else:
            setattr(parent, side, node)
    assert root is not None
    return root


def fit_random_forest(
    X, y, params: ForestParams | None = None, seed: int = 0
) -> EnsembleModel:
    """Fit a bagged CART regression forest.

    Per-tree randomness: bootstrap row indices are floor(u*n) over uniforms
    from substream (seed, tree); each node's column subset comes from
    substream (seed, tree, 1 + preorder node counter).
    """
    X, y = _validate_training_data(X, y)
    n, p = X.shape
    params = params or ForestParams()
    mtry = params.mtry if params.mtry is not None else math.ceil(p / 3)
    if not 1 <= mtry <= p:
        raise InvalidSpecError(f"mtry must be in [1, {p}], got {mtry}")
    if params.min_leaf < 1:
        raise InvalidSpecError("min_leaf must be >= 1")
    if params.T < 1:
        raise InvalidSpecError("need at least one tree")
    col_values = [np.unique(X[:, j]) for j in range(p)]
    trees = []
    for t in range(params.T):
        tree_key = derive_key(seed, t)
        if params.bootstrap:
            rows = (uniforms(tree_key, np.arange(n, dtype=np.uint64)) * n).astype(
                np.int64
            )
        else:
            rows = np.arange(n)
        root = _grow_tree(
            X, y, rows, mtry, params.min_leaf, params.max_depth, tree_key, col_values
        )
        trees.append((0, t, renumber_leaves(root)))
    return EnsembleModel(
        trees=trees,
        kind=KIND_RF,
        B=1,
        T=params.T,
        p=p,
        fit_metadata={"params": params, "seed": seed},
    )


def predict_ensemble(model: EnsembleModel, X) -> np.ndarray:
    """RF: average of per-tree leaf values.  BART: per-draw sums averaged over
    draws, mapped back from the internal outcome scale."""
    X = model.check_input(X)
    if X.shape[0] == 0:
        return np.zeros(0)
    total = np.zeros(X.shape[0])
    for _, _, root in model.trees:
        total += leaf_values(root, X)
    if model.kind == KIND_RF:
        return total / len(model.trees)
    mean_of_sums = total / model.B
    y_min = model.fit_metadata["y_min"]
    y_max = model.fit_metadata["y_max"]
    return y_min + (mean_of_sums + 0.5) * (y_max - y_min)


# --- ensemble serialization ---------------------------------------------------


def ensemble_to_text(model: EnsembleModel) -> str:
    """Line-oriented dump for golden-file tests; exact float round trip."""
    out = [f"ensemble {model.kind} {model.B} {model.T} {model.p}"]
    if model.kind == KIND_BART:
        out.append(
            "scale %.17g %.17g"
            % (model.fit_metadata["y_min"], model.fit_metadata["y_max"])
        )
    for b, t, root in model.trees:
        body = tree_to_text(root)
        out.append(f"tree {b} {t} {len(body.splitlines())}")
        out.append(body.rstrip("\n"))
    return "\n".join(out) + "\n"


def ensemble_from_text(text: str) -> EnsembleModel:
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith("ensemble "):
        raise DataFormatError("missing ensemble header")
    _, kind, b_str, t_str, p_str = lines[0].split()
    meta: dict = {}
    pos = 1
    if lines[pos].startswith("scale "):
        _, lo, hi = lines[pos].split()
        meta["y_min"], meta["y_max"] = float(lo), float(hi)
        pos += 1
    trees = []
    while pos < len(lines):
        header = lines[pos].split()
        if header[0] != "tree" or len(header) != 4:
            raise DataFormatError(f"bad tree header: {lines[pos]!r}")
        b, t, n_nodes = int(header[1]), int(header[2]), int(header[3])
        body = "\n".join(lines[pos + 1 : pos + 1 + n_nodes])
        trees.append((b, t, tree_from_text(body)))
        pos += 1 + n_nodes
    return EnsembleModel(
        trees=trees,
        kind=kind,
        B=int(b_str),
        T=int(t_str),
        p=int(p_str),
        fit_metadata=meta,
    )
