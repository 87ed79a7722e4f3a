"""Path retrieval and negative sampling over hand-built trees."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protohier.errors import ConfigError
from protohier.hkmeans import PrototypeTree
from protohier.prototree import (
    all_paths_matrix,
    path_from_bottom,
    positive_path,
    sample_negative_paths,
    sample_negative_roots,
    validate_tree,
)


def make_tree(sizes, d=2, seed=0, n=6):
    rng = np.random.default_rng(seed)
    levels = [rng.normal(size=(m, d)) for m in sizes]
    parent = [
        rng.integers(0, sizes[i + 1], size=sizes[i]).astype(np.int32)
        for i in range(len(sizes) - 1)
    ]
    bottom = rng.integers(0, sizes[0], size=n).astype(np.int32)
    return PrototypeTree(levels=levels, parent=parent, bottom_assign=bottom)


def test_positive_path_follows_parents():
    tree = make_tree((4, 3, 2))
    tree.parent[0][:] = [0, 2, 1, 0]
    tree.parent[1][:] = [1, 0, 1]
    tree.bottom_assign[:] = [2, 0, 2, 1, 3, 0]
    path = positive_path(tree, 0)
    assert path.proto_idx.tolist() == [2, 1, 0]
    for level, idx in enumerate(path.proto_idx):
        assert np.array_equal(path.vectors[level], tree.levels[level][idx])


def test_single_level_path():
    tree = make_tree((5,))
    path = positive_path(tree, 3)
    assert path.proto_idx.tolist() == [int(tree.bottom_assign[3])]
    assert path.vectors.shape == (1, 2)


def test_same_bottom_same_path():
    tree = make_tree((4, 2), n=10)
    tree.bottom_assign[:] = 0
    a, b = positive_path(tree, 1), positive_path(tree, 7)
    assert np.array_equal(a.proto_idx, b.proto_idx)
    assert np.array_equal(a.vectors, b.vectors)


def test_index_errors():
    tree = make_tree((4, 2), n=5)
    with pytest.raises(IndexError):
        positive_path(tree, 5)
    with pytest.raises(IndexError):
        positive_path(tree, -1)
    with pytest.raises(IndexError):
        path_from_bottom(tree, 4)


def test_exhaustive_negatives_without_replacement():
    tree = make_tree((4, 2))
    rng = np.random.default_rng(0)
    paths = sample_negative_paths(tree, 2, 3, rng)
    roots = sorted(int(p.proto_idx[0]) for p in paths)
    assert roots == [0, 1, 3]


def test_negatives_with_replacement_stay_in_pool():
    tree = make_tree((4, 2))
    rng = np.random.default_rng(1)
    paths = sample_negative_paths(tree, 2, 10, rng)
    assert len(paths) == 10
    assert {int(p.proto_idx[0]) for p in paths} <= {0, 1, 3}


def test_thousand_negatives_all_distinct_on_wide_tree():
    tree = make_tree((1200,), n=3)
    rng = np.random.default_rng(2)
    paths = sample_negative_paths(tree, 17, 1000, rng)
    roots = [int(p.proto_idx[0]) for p in paths]
    assert len(roots) == 1000
    assert len(set(roots)) == 1000
    assert 17 not in roots


def test_negative_paths_are_parent_consistent():
    tree = make_tree((6, 3, 2), seed=5)
    rng = np.random.default_rng(3)
    for path in sample_negative_paths(tree, 1, 5, rng):
        for level in range(2):
            assert tree.parent[level][path.proto_idx[level]] == path.proto_idx[level + 1]


@pytest.mark.parametrize("m1", range(2, 17))
def test_distinct_negative_root_count_exhaustive(m1):
    tree = make_tree((m1,), n=4)
    rng = np.random.default_rng(m1)
    for pos in range(m1):
        paths = sample_negative_paths(tree, pos, m1 - 1, rng)
        roots = {int(p.proto_idx[0]) for p in paths}
        assert roots == set(range(m1)) - {pos}


def test_negative_sampling_errors():
    rng = np.random.default_rng(0)
    one = make_tree((1,))
    with pytest.raises(ConfigError):
        sample_negative_paths(one, 0, 1, rng)
    tree = make_tree((4, 2))
    with pytest.raises(ConfigError):
        sample_negative_paths(tree, 0, 0, rng)
    with pytest.raises(IndexError):
        sample_negative_paths(tree, 4, 1, rng)
    with pytest.raises(ConfigError):
        sample_negative_roots(1, np.zeros(2, dtype=int), 1, rng)
    with pytest.raises(ConfigError):
        sample_negative_roots(4, np.zeros(2, dtype=int), 0, rng)


@settings(max_examples=50, deadline=None)
@given(
    m1=st.integers(2, 20),
    b=st.integers(1, 8),
    n_neg=st.integers(1, 30),
    seed=st.integers(0, 2**20),
)
def test_batched_roots_avoid_positive_and_stay_in_range(m1, b, n_neg, seed):
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, m1, size=b)
    roots = sample_negative_roots(m1, pos, n_neg, np.random.default_rng(seed + 1))
    assert roots.shape == (b, n_neg)
    assert roots.min() >= 0 and roots.max() < m1
    assert (roots != pos[:, None]).all()
    if n_neg <= m1 - 1:
        for row in roots:
            assert len(set(row.tolist())) == n_neg


def test_batched_roots_uniform_within_3_sigma():
    # frozen-seed multinomial check: 1e5 single-negative draws over a pool
    # of 5 roots, each bin within 3 sigma of the uniform expectation
    m1, draws = 6, 100_000
    pos = np.full(draws, 3)
    roots = sample_negative_roots(m1, pos, 1, np.random.default_rng(123))
    counts = np.bincount(roots.ravel(), minlength=m1)
    assert counts[3] == 0
    expected = draws / (m1 - 1)
    sigma = np.sqrt(draws * (1 / (m1 - 1)) * (1 - 1 / (m1 - 1)))
    for root in (0, 1, 2, 4, 5):
        assert abs(counts[root] - expected) <= 3 * sigma, counts


def test_batched_roots_uniform_with_replacement():
    m1, draws = 4, 40_000
    pos = np.full(draws, 0)
    roots = sample_negative_roots(m1, pos, 5, np.random.default_rng(321))
    counts = np.bincount(roots.ravel(), minlength=m1)
    assert counts[0] == 0
    total = draws * 5
    expected = total / (m1 - 1)
    sigma = np.sqrt(total * (1 / (m1 - 1)) * (1 - 1 / (m1 - 1)))
    for root in (1, 2, 3):
        assert abs(counts[root] - expected) <= 3 * sigma, counts


def test_all_paths_matrix_matches_per_bottom_paths():
    tree = make_tree((5, 3, 2), seed=9)
    mat = all_paths_matrix(tree)
    assert mat.shape == (5, 3, 2)
    for bottom in range(5):
        path = path_from_bottom(tree, bottom)
        assert np.array_equal(mat[bottom], path.vectors)


def test_validate_tree_pass_and_counts():
    diag = validate_tree(make_tree((4, 2)))
    assert diag.ok
    assert diag.path_count == 4
    assert diag.edge_count == 4
    deep = validate_tree(make_tree((8, 4, 2)))
    assert deep.edge_count == 12
    assert deep.path_count == 8


def test_validate_tree_catches_dangling_parent():
    tree = make_tree((4, 2))
    tree.parent[0][1] = 2
    diag = validate_tree(tree)
    assert not diag.ok
    assert not diag.checks["parent_in_range"]


def test_validate_tree_catches_bad_shapes_and_values():
    grow = make_tree((4, 2))
    grow.levels[1] = np.zeros((5, 2))
    assert not validate_tree(grow).checks["sizes_strictly_decreasing"]

    nan_tree = make_tree((4, 2))
    nan_tree.levels[0][0, 0] = np.nan
    assert not validate_tree(nan_tree).checks["vectors_finite"]

    oob = make_tree((4, 2))
    oob.bottom_assign[0] = 4
    assert not validate_tree(oob).checks["bottom_assign_in_range"]

    missing = make_tree((4, 3, 2))
    missing.parent.pop()
    assert not validate_tree(missing).checks["parent_arrays_complete"]
