"""Representation quality: weighted KNN classification and clustering scores.

KNN follows the memory-bank evaluation convention: cosine similarity,
exponential vote weights ``exp(sim / temperature)`` with temperature 0.07,
and the reported score is the best accuracy over the requested neighborhood
sizes.

Clustering quality runs k-means with restarts on the representations and
scores the best-inertia partition against ground truth three ways: accuracy
under an optimal one-to-one cluster/class matching, normalized mutual
information (arithmetic-mean normalization), and the chance-adjusted
variant, which subtracts the mutual information a random contingency of the
same marginals would get.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

from .errors import ConfigError, DataError, ShapeError
from .hkmeans import kmeans
from .util import STREAM_RESTART, l2_normalize

KNN_TEMPERATURE = 0.07
DEFAULT_K_LIST = (10, 20, 100, 200)


@dataclass
class KnnReport:
    best_k: int
    best_accuracy: float
    per_k: dict


@dataclass
class ClusterReport:
    accuracy: float
    nmi: float
    ami: float


@dataclass
class MatchResult:
    pairs: list
    matched: int


def _check_reps_labels(reps, labels, what):
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2:
        raise ShapeError(f"{what} representations must be 2-d, got {reps.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != reps.shape[0]:
        raise DataError(
            f"{what} labels must be a length-{reps.shape[0]} vector, got {labels.shape}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"{what} labels must be integers")
    if labels.min(initial=0) < 0:
        raise DataError(f"{what} labels must be non-negative")
    return reps, labels.astype(np.int64)


def knn_eval(
    train_reps,
    train_labels,
    test_reps,
    test_labels,
    k_list=DEFAULT_K_LIST,
    temperature=KNN_TEMPERATURE,
):
    """Weighted KNN accuracy; best over ``k_list`` plus the per-k table."""
    train_reps, train_labels = _check_reps_labels(train_reps, train_labels, "train")
    test_reps, test_labels = _check_reps_labels(test_reps, test_labels, "test")
    if train_reps.shape[1] != test_reps.shape[1]:
        raise ShapeError(
            f"train width {train_reps.shape[1]} != test width {test_reps.shape[1]}"
        )
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    k_list = tuple(int(k) for k in k_list)
    if not k_list:
        raise ConfigError("k_list must not be empty")
    n_train = train_reps.shape[0]
    for k in k_list:
        if not 1 <= k <= n_train:
            raise ConfigError(f"k={k} must lie in [1, {n_train}]")

    sims = l2_normalize(test_reps) @ l2_normalize(train_reps).T
    order = np.argsort(-sims, axis=1, kind="stable")
    n_test = test_reps.shape[0]
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    rows = np.arange(n_test)
    per_k = {}
    for k in k_list:
        top = order[:, :k]
        weights = np.exp(sims[rows[:, None], top] / temperature)
        votes = np.zeros((n_test, n_classes), dtype=np.float64)
        np.add.at(votes, (rows[:, None], train_labels[top]), weights)
        pred = votes.argmax(axis=1)
        per_k[k] = float((pred == test_labels).mean())
    best_k = min(k for k in k_list if per_k[k] == max(per_k.values()))
    return KnnReport(best_k=best_k, best_accuracy=per_k[best_k], per_k=per_k)


def hungarian_match(confusion):
    """Maximum-weight one-to-one matching of clusters to classes.

    Works on rectangular matrices; with more clusters than classes the
    unmatched clusters simply contribute nothing. Returns the matched pairs
    and the total count they cover.
    """
    cont = np.asarray(confusion)
    if cont.ndim != 2 or cont.size == 0:
        raise DataError(f"confusion must be a non-empty 2-d matrix, got {cont.shape}")
    if not np.issubdtype(cont.dtype, np.integer):
        raise DataError("confusion must hold integers")
    if cont.min() < 0:
        raise DataError("confusion must be non-negative")
    rows, cols = linear_sum_assignment(cont, maximize=True)
    matched = int(cont[rows, cols].sum())
    return MatchResult(pairs=list(zip(rows.tolist(), cols.tolist())), matched=matched)


def _contingency(labels_a, labels_b):
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise DataError(f"label vectors must match and be non-empty, got {a.shape} vs {b.shape}")
    if a.min() < 0 or b.min() < 0:
        raise DataError("labels must be non-negative")
    cont = np.zeros((int(a.max()) + 1, int(b.max()) + 1), dtype=np.int64)
    np.add.at(cont, (a, b), 1)
    return cont


def _is_identical_partition(cont):
    # identical up to relabeling: each used cluster maps to exactly one class
    # and each used class is covered by exactly one cluster
    nz = cont > 0
    return (nz.sum(axis=1) <= 1).all() and (nz.sum(axis=0) <= 1).all()


def _entropy(counts, n):
    pos = counts[counts > 0].astype(np.float64)
    p = pos / n
    return float(-(p * np.log(p)).sum())


def _mutual_info(cont):
    n = cont.sum()
    a = cont.sum(axis=1)
    b = cont.sum(axis=0)
    nz = cont > 0
    nij = cont[nz].astype(np.float64)
    outer = (a[:, None] * b[None, :])[nz].astype(np.float64)
    return float(((nij / n) * (np.log(n * nij) - np.log(outer))).sum())


def _expected_mutual_info(cont):
    """Mean mutual information over random contingencies with these marginals."""
    n = int(cont.sum())
    a = cont.sum(axis=1)
    b = cont.sum(axis=0)
    total = 0.0
    log_n = np.log(n)
    base = gammaln(n - a + 1).reshape(-1, 1) + gammaln(n - b + 1).reshape(1, -1)
    for i, ai in enumerate(a):
        if ai == 0:
            continue
        for j, bj in enumerate(b):
            if bj == 0:
                continue
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term = (nij / n) * (log_n + np.log(nij) - np.log(float(ai) * bj))
            log_weight = (
                gammaln(ai + 1)
                + gammaln(bj + 1)
                + base[i, j]
                - gammaln(n + 1)
                - gammaln(nij + 1)
                - gammaln(ai - nij + 1)
                - gammaln(bj - nij + 1)
                - gammaln(n - ai - bj + nij + 1)
            )
            total += float((term * np.exp(log_weight)).sum())
    return total


def nmi(labels_a, labels_b):
    """Mutual information normalized by the mean of the two entropies."""
    cont = _contingency(labels_a, labels_b)
    return _nmi_from_contingency(cont)


def _nmi_from_contingency(cont):
    if _is_identical_partition(cont):
        return 1.0
    n = cont.sum()
    mi = _mutual_info(cont)
    denom = 0.5 * (_entropy(cont.sum(axis=1), n) + _entropy(cont.sum(axis=0), n))
    if mi <= 0.0 or denom <= 0.0:
        return 0.0
    return float(min(1.0, mi / denom))


def ami(labels_a, labels_b):
    """Chance-adjusted mutual information: 0 expected for random partitions."""
    cont = _contingency(labels_a, labels_b)
    return _ami_from_contingency(cont)


def _ami_from_contingency(cont):
    if _is_identical_partition(cont):
        return 1.0
    n = cont.sum()
    mi = _mutual_info(cont)
    emi = _expected_mutual_info(cont)
    normalizer = 0.5 * (_entropy(cont.sum(axis=1), n) + _entropy(cont.sum(axis=0), n))
    denominator = normalizer - emi
    eps = np.finfo(np.float64).eps
    if denominator < 0:
        denominator = min(denominator, -eps)
    else:
        denominator = max(denominator, eps)
    return float((mi - emi) / denominator)


def restart_seed(seed, restart):
    ss = np.random.SeedSequence([int(seed), STREAM_RESTART, int(restart)])
    return int(ss.generate_state(1)[0])


def cluster_eval(reps, labels, k, seed=0, restarts=10, n_threads=1):
    """Cluster representations into ``k`` groups and score against labels.

    Rows are L2-normalized first so distances follow the cosine geometry the
    representations were trained under. K-means runs ``restarts`` times with
    derived seeds and the lowest-inertia partition wins.
    """
    reps, labels = _check_reps_labels(reps, labels, "eval")
    if not isinstance(k, (int, np.integer)) or k < 2:
        raise ConfigError(f"k must be an integer >= 2, got {k!r}")
    if k > reps.shape[0]:
        raise ConfigError(f"k={k} exceeds n={reps.shape[0]}")
    if restarts < 1:
        raise ConfigError(f"restarts must be >= 1, got {restarts}")
    X = l2_normalize(reps)
    best = None
    for r in range(restarts):
        result = kmeans(X, int(k), seed=restart_seed(seed, r), n_threads=n_threads)
        if best is None or result.inertia < best.inertia:
            best = result
    cont = _contingency(best.assignments, labels)
    accuracy = hungarian_match(cont).matched / labels.shape[0]
    return ClusterReport(
        accuracy=float(accuracy),
        nmi=_nmi_from_contingency(cont),
        ami=_ami_from_contingency(cont),
    )
