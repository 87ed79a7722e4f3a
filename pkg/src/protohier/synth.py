"""Synthetic embedding sets with a planted multi-level cluster hierarchy.

Cluster centers form a tree: each child center is its parent center plus a
Gaussian offset scaled by that level's separation, so coarse structure has
the largest spread and every finer level refines it. Samples are drawn
around leaf centers with isotropic noise. Ground-truth labels exist at every
level, which makes recovery measurable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data_io import EmbeddingSet
from .errors import ConfigError

MAX_SAMPLES = 5_000_000


@dataclass(frozen=True)
class HierarchySpec:
    """Recipe for one planted hierarchy.

    ``branching`` and ``separation`` are ordered coarse to fine and must have
    ``depth`` entries each; separations must be strictly decreasing so the
    coarse structure dominates.
    """

    depth: int
    branching: tuple
    samples_per_leaf: int
    d: int
    separation: tuple
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        branching = tuple(int(b) for b in self.branching)
        separation = tuple(float(s) for s in self.separation)
        object.__setattr__(self, "branching", branching)
        object.__setattr__(self, "separation", separation)
        if len(branching) != self.depth:
            raise ConfigError(
                f"branching needs {self.depth} entries, got {len(branching)}"
            )
        if any(b < 2 for b in branching):
            raise ConfigError(f"branching factors must all be >= 2, got {branching}")
        if len(separation) != self.depth:
            raise ConfigError(
                f"separation needs {self.depth} entries, got {len(separation)}"
            )
        if any(s <= 0 for s in separation):
            raise ConfigError(f"separations must be positive, got {separation}")
        if any(a <= b for a, b in zip(separation, separation[1:])):
            raise ConfigError(
                f"separation must strictly decrease coarse to fine, got {separation}"
            )
        if self.samples_per_leaf < 1:
            raise ConfigError(f"samples_per_leaf must be >= 1, got {self.samples_per_leaf}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if not (self.noise_sigma > 0):
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.n_samples > MAX_SAMPLES:
            raise ConfigError(
                f"spec would generate {self.n_samples} samples, cap is {MAX_SAMPLES}"
            )

    @property
    def n_leaves(self):
        return math.prod(self.branching)

    @property
    def n_samples(self):
        return self.samples_per_leaf * self.n_leaves


@dataclass
class SynthResult:
    """Planted data: embeddings (leaf labels attached), plus per-level truth.

    ``labels_by_level`` and ``centers_by_level`` run coarse to fine; the last
    entry of each is the leaf level. Node numbering at every level is
    depth-first, so the label at level ``k`` equals the leaf label integer-
    divided by the product of the finer branching factors.
    """

    embeddings: EmbeddingSet
    labels_by_level: list
    centers_by_level: list


def generate(spec):
    """Draw one :class:`SynthResult`. Same spec, same bits, every time.

    All randomness comes from a single PCG64 generator seeded with
    ``spec.seed``; draw order is fixed (center offsets level by level from
    the top, then sample noise), so outputs are bitwise reproducible.
    """
    rng = np.random.default_rng(spec.seed)
    centers_by_level = []
    centers = np.zeros((1, spec.d), dtype=np.float64)
    for level in range(spec.depth):
        parents = np.repeat(centers, spec.branching[level], axis=0)
        offsets = rng.standard_normal(parents.shape)
        centers = parents + spec.separation[level] * offsets
        centers_by_level.append(centers)

    leaf_centers = centers_by_level[-1]
    n = spec.n_samples
    noise = rng.standard_normal((n, spec.d))
    data = np.repeat(leaf_centers, spec.samples_per_leaf, axis=0)
    data = data + spec.noise_sigma * noise

    leaf_of_sample = np.repeat(
        np.arange(spec.n_leaves, dtype=np.int32), spec.samples_per_leaf
    )
    labels_by_level = []
    finer = 1
    divisors = []
    for level in range(spec.depth - 1, -1, -1):
        divisors.append(finer)
        if level > 0:
            finer *= spec.branching[level]
    divisors = divisors[::-1]
    for level in range(spec.depth):
        labels_by_level.append((leaf_of_sample // divisors[level]).astype(np.int32))

    embeddings = EmbeddingSet(
        data=data.astype(np.float32), labels=labels_by_level[-1]
    )
    return SynthResult(
        embeddings=embeddings,
        labels_by_level=labels_by_level,
        centers_by_level=centers_by_level,
    )
