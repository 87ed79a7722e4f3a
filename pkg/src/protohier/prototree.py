"""Paths through the prototype tree and negative-path sampling.

A sample's positive path starts at its bottom prototype and follows parent
edges to the top, one prototype per level. Because bottom prototypes map
one-to-one onto root-to-bottom chains, a tree with ``M_1`` bottom prototypes
has exactly ``M_1`` distinct paths: one positive and ``M_1 - 1`` candidate
negatives per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# sample_negative_paths draws uniformly over the M_1 - 1 non-positive
# bottom prototypes: without replacement while n_neg fits, with replacement
# once n_neg exceeds the pool.


@dataclass
class SemanticPath:
    """One bottom-to-top chain: prototype index and vector per level."""

    proto_idx: np.ndarray
    vectors: np.ndarray


@dataclass
class TreeDiagnostics:
    checks: dict
    path_count: int
    edge_count: int

    @property
    def ok(self):
        return all(self.checks.values())


def path_from_bottom(tree, bottom):
    """Resolve the chain rooted at bottom prototype ``bottom``."""
    m1 = tree.levels[0].shape[0]
    if not 0 <= bottom < m1:
        raise IndexError(f"bottom prototype {bottom} out of range [0, {m1})")
    idx = np.empty(tree.n_levels, dtype=np.int32)
    idx[0] = bottom
    for i, par in enumerate(tree.parent):
        idx[i + 1] = par[idx[i]]
    vectors = np.stack([tree.levels[i][idx[i]] for i in range(tree.n_levels)])
    return SemanticPath(proto_idx=idx, vectors=vectors)


def positive_path(tree, sample_index):
    """The path of the bottom prototype ``sample_index`` was assigned to."""
    n = tree.bottom_assign.shape[0]
    if not 0 <= sample_index < n:
        raise IndexError(f"sample index {sample_index} out of range [0, {n})")
    return path_from_bottom(tree, int(tree.bottom_assign[sample_index]))


def sample_negative_paths(tree, positive_bottom, n_neg, rng):
    """Draw ``n_neg`` negative paths for a sample whose positive bottom is given.

    Uniform over the other ``M_1 - 1`` bottom prototypes; without replacement
    when ``n_neg`` fits in that pool, with replacement otherwise.
    """
    m1 = tree.levels[0].shape[0]
    if m1 < 2:
        raise ConfigError(f"negative sampling needs M_1 >= 2, got {m1}")
    if not 0 <= positive_bottom < m1:
        raise IndexError(f"positive bottom {positive_bottom} out of range [0, {m1})")
    if n_neg < 1:
        raise ConfigError(f"n_neg must be >= 1, got {n_neg}")
    pool = np.delete(np.arange(m1), positive_bottom)
    roots = rng.choice(pool, size=n_neg, replace=n_neg > m1 - 1)
    return [path_from_bottom(tree, int(r)) for r in roots]


def sample_negative_roots(m1, positive_bottoms, n_neg, rng):
    """Vectorized root sampler: one row of ``n_neg`` roots per sample.

    Matches the per-sample semantics of :func:`sample_negative_paths`
    (uniform, without replacement while the pool allows), drawn for a whole
    batch in one pass.
    """
    if m1 < 2:
        raise ConfigError(f"negative sampling needs M_1 >= 2, got {m1}")
    if n_neg < 1:
        raise ConfigError(f"n_neg must be >= 1, got {n_neg}")
    pos = np.asarray(positive_bottoms)
    b = pos.shape[0]
    if n_neg > m1 - 1:
        draw = rng.integers(0, m1 - 1, size=(b, n_neg))
    else:
        # first n_neg of a random permutation of each pool
        keys = rng.random((b, m1 - 1))
        draw = np.argsort(keys, axis=1)[:, :n_neg]
    # pool position -> bottom index, skipping the positive
    return draw + (draw >= pos[:, None])


def all_paths_matrix(tree):
    """Stack every bottom prototype's path vectors: (M_1, L, d)."""
    m1 = tree.levels[0].shape[0]
    idx = np.empty((m1, tree.n_levels), dtype=np.int64)
    idx[:, 0] = np.arange(m1)
    for i, par in enumerate(tree.parent):
        idx[:, i + 1] = par[idx[:, i]]
    return np.stack(
        [tree.levels[i][idx[:, i]] for i in range(tree.n_levels)], axis=1
    )


def validate_tree(tree):
    """Structural diagnostics; every named check must hold for a sound tree."""
    checks = {}
    sizes = tree.level_sizes
    checks["levels_nonempty"] = tree.n_levels >= 1 and all(m >= 1 for m in sizes)
    checks["sizes_strictly_decreasing"] = all(
        a > b for a, b in zip(sizes, sizes[1:])
    )
    checks["dims_consistent"] = all(lv.shape[1] == tree.d for lv in tree.levels)
    checks["vectors_finite"] = all(np.isfinite(lv).all() for lv in tree.levels)
    checks["parent_arrays_complete"] = len(tree.parent) == tree.n_levels - 1 and all(
        par.shape[0] == sizes[i] for i, par in enumerate(tree.parent)
    )
    parent_range = checks["parent_arrays_complete"]
    if parent_range:
        for i, par in enumerate(tree.parent):
            if par.size and (par.min() < 0 or par.max() >= sizes[i + 1]):
                parent_range = False
                break
    checks["parent_in_range"] = parent_range
    ba = tree.bottom_assign
    checks["bottom_assign_in_range"] = (
        ba is not None and ba.ndim == 1 and ba.size >= 1
        and ba.min() >= 0 and ba.max() < sizes[0]
    )
    path_count = sizes[0]
    edge_count = sum(sizes[:-1])
    return TreeDiagnostics(checks=checks, path_count=path_count, edge_count=edge_count)
