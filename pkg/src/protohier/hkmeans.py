"""K-means and the stacked prototype tree built by re-clustering centroids.

The tree is produced bottom-up: cluster the input vectors into ``M_1``
prototypes, then cluster those prototypes into ``M_2`` coarser ones, and so
on. The assignment of each level's prototypes to the next level's centroids
becomes the parent edges, so every bottom prototype has exactly one chain to
the top and the structure is a forest of ``M_L`` trees covering ``M_1``
leaves. Level sizes must strictly decrease.

Reproducibility contract
------------------------
Given the same seed, results are bitwise identical run to run, single
threaded or not. To make that auditable the exact arithmetic is pinned down:

* init ``"kmeans++"``: with ``rng = numpy.random.default_rng(seed)``, the
  first centroid is ``rng.integers(n)``; each next one is
  ``rng.choice(n, p=d2 / d2.sum())`` where ``d2`` holds squared Euclidean
  distances to the nearest chosen centroid (uniform ``rng.integers(n)`` if
  ``d2`` sums to zero).
* assignment: squared Euclidean distances computed as the sum over
  coordinates of squared differences, points processed in fixed chunks of
  ``CHUNK`` rows; ties go to the lowest centroid index.
* update: per-cluster coordinate sums accumulate in point order (float64),
  then divide by the member count.
* empty clusters are reseeded to the point farthest from its assigned
  centroid (drawn only from clusters with at least two members, lowest
  point index on ties) and that point is moved to the empty cluster.
* convergence: stop when the largest centroid displacement (Euclidean, max
  over centroids) drops below ``tol``, then run one final assignment pass so
  assignments match the returned centroids.

Partial results (per-chunk label blocks, sums, counts, inertia terms) are
always combined in chunk index order, so a thread pool changes who computes
a chunk but never the floating-point result.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data_io import EmbeddingSet
from .errors import ConfigError, DataError, FormatError, IoError
from .util import STREAM_LEVEL, atomic_write_bytes, l2_normalize, rng_stream

TREE_MAGIC = b"HIRLTREE"
CHUNK = 1024


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    # inertia recorded after each assignment pass; non-increasing
    history: list = field(default_factory=list)


@dataclass
class PrototypeTree:
    """Stacked clustering. ``levels[0]`` is the bottom (largest) level.

    ``parent[i]`` maps a level-``i`` prototype index to its centroid's index
    in level ``i + 1``; ``bottom_assign`` maps each input row to its level-0
    prototype.
    """

    levels: list
    parent: list
    bottom_assign: np.ndarray

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def level_sizes(self):
        return tuple(lv.shape[0] for lv in self.levels)

    @property
    def d(self):
        return self.levels[0].shape[1]

    @property
    def n_samples(self):
        return self.bottom_assign.shape[0]


def _as_points(data):
    if isinstance(data, EmbeddingSet):
        return data.data
    return np.asarray(data)


def _chunk_slices(n):
    return [slice(start, min(start + CHUNK, n)) for start in range(0, n, CHUNK)]


def _assign_chunk(X, C, sl):
    diff = X[sl, None, :] - C[None, :, :]
    dist = (diff * diff).sum(axis=2)
    labels = dist.argmin(axis=1)
    dmin = dist[np.arange(dist.shape[0]), labels]
    k = C.shape[0]
    sums = np.zeros((k, X.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, X[sl])
    counts = np.bincount(labels, minlength=k)
    return labels.astype(np.int32), dmin, sums, counts, float(dmin.sum())


def _assign(X, C, n_threads=1):
    """Assignment pass: labels, per-point min distance, sums/counts, inertia."""
    slices = _chunk_slices(X.shape[0])
    if n_threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(lambda sl: _assign_chunk(X, C, sl), slices))
    else:
        parts = [_assign_chunk(X, C, sl) for sl in slices]
    labels = np.concatenate([p[0] for p in parts])
    dmin = np.concatenate([p[1] for p in parts])
    sums = np.zeros((C.shape[0], X.shape[1]), dtype=np.float64)
    counts = np.zeros(C.shape[0], dtype=np.int64)
    inertia = 0.0
    for p in parts:
        sums += p[2]
        counts += p[3]
        inertia += p[4]
    return labels, dmin, sums, counts, inertia


def _init_plusplus(X, k, rng):
    n = X.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    diff = X - X[chosen[0]]
    d2 = (diff * diff).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            chosen[i] = rng.choice(n, p=d2 / total)
        else:
            chosen[i] = rng.integers(n)
        diff = X - X[chosen[i]]
        d2 = np.minimum(d2, (diff * diff).sum(axis=1))
    return X[chosen].copy()


def _init_farthest(X, k):
    # seed-free: start at the point farthest from the data mean, then
    # repeatedly take the point farthest from the chosen set
    mean = X.mean(axis=0)
    diff = X - mean
    d2 = (diff * diff).sum(axis=1)
    chosen = [int(d2.argmax())]
    diff = X - X[chosen[0]]
    dmin = (diff * diff).sum(axis=1)
    while len(chosen) < k:
        idx = int(dmin.argmax())
        chosen.append(idx)
        diff = X - X[idx]
        dmin = np.minimum(dmin, (diff * diff).sum(axis=1))
    return X[chosen].copy()


def _repair_empty(X, C, labels, dmin, counts):
    """Reseed empty clusters; returns True if anything moved."""
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return False
    for j in empty:
        donors = counts[labels] >= 2
        if not donors.any():
            break
        cand = np.where(donors, dmin, -np.inf)
        p = int(cand.argmax())
        counts[labels[p]] -= 1
        counts[j] += 1
        C[j] = X[p]
        labels[p] = j
        dmin[p] = 0.0
    return True


def kmeans(points, k, seed=0, max_iter=100, tol=1e-6, init="kmeans++", n_threads=1):
    """Lloyd's algorithm with k-means++ seeding.

    ``init`` may also be ``"farthest"`` (deterministic, seed-free) or an
    explicit ``(k, d)`` array of starting centroids. Returns a
    :class:`KMeansResult`; ``history`` records inertia after every
    assignment pass and never increases.
    """
    X = _as_points(points)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DataError(f"points must be a non-empty 2-d array, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DataError("points contain NaN or Inf")
    n = X.shape[0]
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ConfigError(f"k must be a positive integer, got {k!r}")
    if k > n:
        raise ConfigError(f"k={k} exceeds the number of points n={n}")
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")
    if tol < 0:
        raise ConfigError(f"tol must be >= 0, got {tol}")
    X = np.ascontiguousarray(X, dtype=np.float64)

    if isinstance(init, str):
        if init == "kmeans++":
            C = _init_plusplus(X, k, np.random.default_rng(seed))
        elif init == "farthest":
            C = _init_farthest(X, k)
        else:
            raise ConfigError(f"unknown init {init!r}")
    else:
        C = np.ascontiguousarray(init, dtype=np.float64)
        if C.shape != (k, X.shape[1]):
            raise ConfigError(
                f"explicit init must have shape {(k, X.shape[1])}, got {C.shape}"
            )
        C = C.copy()

    history = []
    iterations = 0
    for _ in range(max_iter):
        labels, dmin, sums, counts, inertia = _assign(X, C, n_threads)
        history.append(inertia)
        iterations += 1
        new_C = C.copy()
        nonzero = counts > 0
        new_C[nonzero] = sums[nonzero] / counts[nonzero, None]
        _repair_empty(X, new_C, labels, dmin, counts)
        shift_sq = ((new_C - C) ** 2).sum(axis=1).max()
        C = new_C
        if np.sqrt(shift_sq) < tol:
            break

    labels, dmin, sums, counts, inertia = _assign(X, C, n_threads)
    if (counts == 0).any():
        # degenerate data (duplicate centroids); force the steal to stick
        _repair_empty(X, C, labels, dmin, counts)
        inertia = float(dmin.sum())
    history.append(inertia)
    return KMeansResult(
        centroids=C,
        assignments=labels,
        inertia=float(inertia),
        iterations=iterations,
        history=history,
    )


def validate_level_sizes(n, level_sizes):
    """Raise ConfigError unless sizes strictly decrease and fit ``n`` points."""
    sizes = tuple(int(m) for m in level_sizes)
    if len(sizes) < 1:
        raise ConfigError("level_sizes must not be empty")
    if any(m < 1 for m in sizes):
        raise ConfigError(f"level sizes must be >= 1, got {sizes}")
    if any(later >= earlier for earlier, later in zip(sizes, sizes[1:])):
        raise ConfigError(f"level sizes must strictly decrease, got {sizes}")
    if sizes[0] > n:
        raise ConfigError(f"bottom level size {sizes[0]} exceeds n={n}")
    return sizes


def level_seed(seed, level):
    """Per-level k-means seed, derived so levels draw independent streams."""
    ss = np.random.SeedSequence([int(seed), STREAM_LEVEL, int(level)])
    return int(ss.generate_state(1)[0])


def hierarchical_kmeans(
    embeddings, level_sizes, seed=0, n_threads=1, max_iter=100, tol=1e-6
):
    """Build a :class:`PrototypeTree` by clustering, then re-clustering.

    The bottom level clusters the input rows into ``level_sizes[0]``
    prototypes; every further level clusters the previous level's prototype
    vectors. Each level runs :func:`kmeans` with ``level_seed(seed, i)``.
    """
    X = _as_points(embeddings)
    sizes = validate_level_sizes(X.shape[0], level_sizes)
    levels = []
    parent = []
    bottom_assign = None
    current = X
    for i, m in enumerate(sizes):
        result = kmeans(
            current, m, seed=level_seed(seed, i),
            max_iter=max_iter, tol=tol, n_threads=n_threads,
        )
        if i == 0:
            bottom_assign = result.assignments
        else:
            parent.append(result.assignments)
        levels.append(result.centroids)
        current = result.centroids
    return PrototypeTree(levels=levels, parent=parent, bottom_assign=bottom_assign)


def extract_and_cluster(state, data, level_sizes, seed=0, n_threads=1, subsample=0):
    """Encode all rows with the model, L2-normalize, and build the tree.

    ``subsample > 0`` fits the tree on that many rows (chosen by the seed)
    and then assigns every row to its nearest bottom prototype, keeping
    ``bottom_assign`` full length.
    """
    X = _as_points(data)
    z = encode_all(state, X)
    zn = l2_normalize(z.astype(np.float64))
    n = zn.shape[0]
    sizes = validate_level_sizes(n, level_sizes)
    if subsample and 0 < subsample < n:
        if subsample < sizes[0]:
            raise ConfigError(
                f"subsample={subsample} smaller than bottom level {sizes[0]}"
            )
        pick = rng_stream(seed, STREAM_LEVEL, 999).choice(n, size=subsample, replace=False)
        pick.sort()
        tree = hierarchical_kmeans(zn[pick], sizes, seed=seed, n_threads=n_threads)
        labels, _, _, _, _ = _assign(zn, tree.levels[0], n_threads)
        tree.bottom_assign = labels
        return tree
    return hierarchical_kmeans(zn, sizes, seed=seed, n_threads=n_threads)


def encode_all(state, X, batch=8192):
    """Run the encoder in eval mode over all rows, in fixed-order batches."""
    outs = []
    for start in range(0, X.shape[0], batch):
        z, _ = state.encoder.forward_with_cache(X[start : start + batch], train=False)
        outs.append(z)
    return np.concatenate(outs, axis=0)


def write_tree(tree, path):
    """Serialize a tree: little-endian counts, float32 prototype payloads."""
    parts = [struct.pack("<8sI", TREE_MAGIC, tree.n_levels)]
    for lv in tree.levels:
        m, d = lv.shape
        parts.append(struct.pack("<II", m, d))
        parts.append(np.ascontiguousarray(lv, dtype="<f4").tobytes())
    for par in tree.parent:
        parts.append(np.ascontiguousarray(par, dtype="<u4").tobytes())
    ba = np.ascontiguousarray(tree.bottom_assign, dtype="<u4")
    parts.append(struct.pack("<I", ba.shape[0]))
    parts.append(ba.tobytes())
    try:
        atomic_write_bytes(path, b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_tree(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise FormatError(f"{path}: truncated at offset {off}")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    def take_array(dtype, count):
        nonlocal off
        size = count * 4
        if off + size > len(raw):
            raise FormatError(f"{path}: truncated at offset {off}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += size
        return arr

    magic, n_levels = take("<8sI")
    if magic != TREE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if n_levels < 1:
        raise DataError(f"{path}: no levels")
    levels = []
    d = None
    for _ in range(n_levels):
        m, dim = take("<II")
        if m < 1 or dim < 1:
            raise DataError(f"{path}: empty level block")
        if d is None:
            d = dim
        elif dim != d:
            raise DataError(f"{path}: inconsistent dimensions {dim} vs {d}")
        levels.append(take_array("<f4", m * dim).reshape(m, dim).astype(np.float64))
    sizes = [lv.shape[0] for lv in levels]
    if any(later >= earlier for earlier, later in zip(sizes, sizes[1:])):
        raise DataError(f"{path}: level sizes must strictly decrease, got {sizes}")
    parent = []
    for i in range(n_levels - 1):
        par = take_array("<u4", sizes[i]).astype(np.int32)
        if par.size and par.max() >= sizes[i + 1]:
            raise DataError(f"{path}: parent index out of range at level {i}")
        parent.append(par)
    (n,) = take("<I")
    if n < 1:
        raise DataError(f"{path}: empty bottom assignment")
    ba = take_array("<u4", n).astype(np.int32)
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    if ba.max() >= sizes[0]:
        raise DataError(f"{path}: bottom assignment out of range")
    if not all(np.isfinite(lv).all() for lv in levels):
        raise DataError(f"{path}: non-finite prototype")
    return PrototypeTree(levels=levels, parent=parent, bottom_assign=ba)
