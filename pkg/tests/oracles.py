"""Independent reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way (explicit
Python loops, scalar arithmetic) so it shares no code with the package.
The naive k-means follows the same documented drawing protocol (RNG call
order, tie-breaking, empty-cluster repair) so results are comparable
bitwise at small n, d.
"""

import math
from itertools import permutations

import numpy as np


def sq_dist(a, b):
    s = 0.0
    for j in range(len(a)):
        diff = float(a[j]) - float(b[j])
        s += diff * diff
    return s


def naive_kmeans(X, k, seed=0, max_iter=100, tol=1e-6):
    """Plain-loop Lloyd with the shared seeding and repair protocol.

    Returns (centroids, assignments). Matches the library bitwise for
    d <= 3 (coordinate sums short enough that summation order coincides).
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    rng = np.random.default_rng(seed)

    # seeding: first uniform, then proportional to squared distance
    centers = np.empty((k, d), dtype=np.float64)
    centers[0] = X[int(rng.integers(n))]
    d2 = np.array([sq_dist(X[i], centers[0]) for i in range(n)])
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[c] = X[idx]
        for i in range(n):
            d2[i] = min(d2[i], sq_dist(X[i], centers[c]))

    def assign(C):
        labels = np.zeros(n, dtype=np.int32)
        dmin = np.zeros(n, dtype=np.float64)
        for i in range(n):
            best_j, best_d = 0, sq_dist(X[i], C[0])
            for j in range(1, k):
                dist = sq_dist(X[i], C[j])
                if dist < best_d:
                    best_j, best_d = j, dist
            labels[i] = best_j
            dmin[i] = best_d
        sums = np.zeros((k, d), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        for i in range(n):
            for c in range(d):
                sums[labels[i], c] += X[i, c]
            counts[labels[i]] += 1
        return labels, dmin, sums, counts

    def repair(C, labels, dmin, counts):
        for j in range(k):
            if counts[j] != 0:
                continue
            donor_found = False
            best_p, best_d = -1, -math.inf
            for i in range(n):
                if counts[labels[i]] >= 2:
                    donor_found = True
                    if dmin[i] > best_d:
                        best_p, best_d = i, dmin[i]
            if not donor_found:
                break
            counts[labels[best_p]] -= 1
            counts[j] += 1
            for c in range(d):
                C[j, c] = X[best_p, c]
            labels[best_p] = j
            dmin[best_p] = 0.0

    for _ in range(max_iter):
        labels, dmin, sums, counts = assign(centers)
        new_centers = centers.copy()
        for j in range(k):
            if counts[j] > 0:
                for c in range(d):
                    new_centers[j, c] = sums[j, c] / counts[j]
        repair(new_centers, labels, dmin, counts)
        shift_sq = 0.0
        for j in range(k):
            s = 0.0
            for c in range(d):
                diff = new_centers[j, c] - centers[j, c]
                s += diff * diff
            shift_sq = max(shift_sq, s)
        centers = new_centers
        if math.sqrt(shift_sq) < tol:
            break

    labels, dmin, sums, counts = assign(centers)
    if any(counts[j] == 0 for j in range(k)):
        repair(centers, labels, dmin, counts)
    return centers, labels


def naive_inertia(X, centers, labels):
    return sum(sq_dist(X[i], centers[labels[i]]) for i in range(len(X)))


def best_two_partition(X):
    """Exhaustive minimum-SSE split of the rows into two non-empty groups."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    best = None
    for mask in range(1, 2 ** (n - 1)):
        groups = ([], [])
        for i in range(n):
            groups[(mask >> i) & 1].append(i)
        sse = 0.0
        cents = []
        for g in groups:
            pts = X[list(g)]
            c = pts.mean(axis=0)
            cents.append(c)
            sse += float(((pts - c) ** 2).sum())
        if best is None or sse < best[0]:
            best = (sse, tuple(groups[0]), tuple(groups[1]), np.array(cents))
    return best


def central_diff_grad(f, x, step=1e-5):
    """Central finite differences of a scalar function over an array."""
    x = np.asarray(x, dtype=np.float64).copy()
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        f_plus = f(x)
        x[idx] = orig - step
        f_minus = f(x)
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
        it.iternext()
    return grad


def rel_err(analytic, numeric):
    num = np.abs(analytic - numeric)
    den = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((num / den).max())


def brute_force_match_score(confusion):
    """Best one-to-one cluster/class total by trying every permutation."""
    M = np.asarray(confusion)
    k, c = M.shape
    best = 0
    if k <= c:
        for perm in permutations(range(c), k):
            best = max(best, sum(int(M[i, perm[i]]) for i in range(k)))
    else:
        for perm in permutations(range(k), c):
            best = max(best, sum(int(M[perm[j], j]) for j in range(c)))
    return best


def nearest_center_labels(X, centers):
    labels = []
    for i in range(len(X)):
        best_j, best_d = 0, sq_dist(X[i], centers[0])
        for j in range(1, len(centers)):
            dist = sq_dist(X[i], centers[j])
            if dist < best_d:
                best_j, best_d = j, dist
        labels.append(best_j)
    return np.asarray(labels)
