"""Axis-aligned binary partition trees: node types, routing, text serialization.

Routing rule: ``x[var] < threshold`` goes left, else right.  Leaf ids are
assigned 0..L-1 in depth-first order visiting left before right, so the
numbering is a pure function of the tree shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from .errors import DataFormatError, DimensionError


@dataclass
class Leaf:
    leaf_id: int
    value: float


@dataclass
class Internal:
    var: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Internal, Leaf]


def iter_leaves(root: TreeNode) -> Iterator[Leaf]:
    """Leaves in left-first depth-first order."""
    stack = [root]
    while stack:
        node = stack.pop()
        if isinstance(node, Leaf):
            yield node
        else:
            stack.append(node.right)
            stack.append(node.left)


def count_leaves(root: TreeNode) -> int:
    return sum(1 for _ in iter_leaves(root))


def tree_depth(root: TreeNode) -> int:
    """Maximum leaf depth; a lone leaf has depth 0."""
    if isinstance(root, Leaf):
        return 0
    return 1 + max(tree_depth(root.left), tree_depth(root.right))


def renumber_leaves(root: TreeNode) -> TreeNode:
    """Assign leaf ids 0..L-1 in left-first depth-first order, in place."""
    for i, leaf in enumerate(iter_leaves(root)):
        leaf.leaf_id = i
    return root


def leaf_ids(root: TreeNode, X: np.ndarray) -> np.ndarray:
    """Leaf id reached by each row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    # iterative partition refinement: each stack entry routes a row subset
    stack: list[tuple[TreeNode, np.ndarray]] = [(root, np.arange(n))]
    while stack:
        node, rows = stack.pop()
        if isinstance(node, Leaf):
            out[rows] = node.leaf_id
            continue
        if node.var >= X.shape[1]:
            raise DimensionError(
                f"tree splits on column {node.var} but input has {X.shape[1]} columns"
            )
        go_left = X[rows, node.var] < node.threshold
        stack.append((node.left, rows[go_left]))
        stack.append((node.right, rows[~go_left]))
    return out


def leaf_values(root: TreeNode, X: np.ndarray) -> np.ndarray:
    """Leaf value reached by each row of ``X``."""
    table = np.array([leaf.value for leaf in iter_leaves(root)])
    return table[leaf_ids(root, X)]


# --- text serialization -----------------------------------------------------
#
# One node per line: `node_id kind var threshold left right value`, with `-`
# for fields a node kind does not use.  Node ids are depth-first preorder.
# Floats use %.17g so round trips are exact.


def _fmt(x: float) -> str:
    return "%.17g" % x


def _write_tree(root: TreeNode, lines: list[str]) -> None:
    ids: dict[int, int] = {}
    order: list[TreeNode] = []

    def assign(node: TreeNode) -> None:
        ids[id(node)] = len(order)
        order.append(node)
        if isinstance(node, Internal):
            assign(node.left)
            assign(node.right)

    assign(root)
    for node in order:
        nid = ids[id(node)]
        if isinstance(node, Leaf):
            lines.append(f"{nid} leaf - - - - {_fmt(node.value)}")
        else:
            lines.append(
                f"{nid} internal {node.var} {_fmt(node.threshold)} "
                f"{ids[id(node.left)]} {ids[id(node.right)]} -"
            )


def tree_to_text(root: TreeNode) -> str:
    lines: list[str] = []
    _write_tree(root, lines)
    return "\n".join(lines) + "\n"


def tree_from_text(text: str) -> TreeNode:
    nodes: dict[int, tuple] = {}
    for line in text.strip().splitlines():
        parts = line.split()
        if len(parts) != 7:
            raise DataFormatError(f"bad node line: {line!r}")
        nid = int(parts[0])
        nodes[nid] = tuple(parts[1:])
    if 0 not in nodes:
        raise DataFormatError("tree text has no root node (id 0)")

    def build(nid: int) -> TreeNode:
        kind, var, threshold, left, right, value = nodes[nid]
        if kind == "leaf":
            return Leaf(leaf_id=-1, value=float(value))
        if kind != "internal":
            raise DataFormatError(f"unknown node kind {kind!r}")
        return Internal(
            var=int(var),
            threshold=float(threshold),
            left=build(int(left)),
            right=build(int(right)),
        )

    root = build(0)
    return renumber_leaves(root)
