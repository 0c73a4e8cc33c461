import numpy as np
import pytest

from treebal.errors import DataFormatError, DimensionError
from treebal.trees import (
    Internal,
    Leaf,
    count_leaves,
    leaf_ids,
    renumber_leaves,
    tree_depth,
    tree_from_text,
    tree_to_text,
)


def _stump(var=0, thr=0.5):
    return renumber_leaves(
        Internal(var=var, threshold=thr, left=Leaf(-1, 1.0), right=Leaf(-1, 2.0))
    )


def test_single_leaf_routes_everything_to_zero():
    ids = leaf_ids(Leaf(leaf_id=0, value=7.0), np.random.default_rng(0).random((9, 3)))
    assert (ids == 0).all()


def test_stump_left_first_numbering():
    ids = leaf_ids(_stump(), np.array([[0.2], [0.8]]))
    np.testing.assert_array_equal(ids, [0, 1])


def test_threshold_boundary_goes_right():
    # routing rule is x[var] < threshold
    ids = leaf_ids(_stump(thr=0.5), np.array([[0.5]]))
    assert ids[0] == 1


def test_ids_below_leaf_count():
    root = Internal(
        var=0,
        threshold=0.0,
        left=_stump(var=1),
        right=Leaf(-1, 3.0),
    )
    renumber_leaves(root)
    X = np.random.default_rng(1).standard_normal((50, 2))
    ids = leaf_ids(root, X)
    assert ids.max() < count_leaves(root) == 3
    assert tree_depth(root) == 2


def test_dimension_mismatch_rejected():
    with pytest.raises(DimensionError):
        leaf_ids(_stump(var=3), np.zeros((2, 2)))


def test_text_roundtrip_exact():
    root = Internal(
        var=2,
        threshold=0.1234567890123456789,
        left=Leaf(-1, -1.5e-17),
        right=_stump(var=1, thr=np.pi),
    )
    renumber_leaves(root)
    back = tree_from_text(tree_to_text(root))
    assert tree_to_text(back) == tree_to_text(root)
    X = np.random.default_rng(2).standard_normal((20, 3))
    np.testing.assert_array_equal(leaf_ids(back, X), leaf_ids(root, X))


def test_malformed_text_rejected():
    with pytest.raises(DataFormatError):
        tree_from_text("0 leaf - -\n")
    with pytest.raises(DataFormatError):
        tree_from_text("1 leaf - - - - 3.0\n")
