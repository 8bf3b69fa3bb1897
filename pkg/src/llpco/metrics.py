"""Clustering and classification quality metrics.

Accuracy is reported two ways: under the identity cluster-to-class map
(acc_p, meaningful when proportion priors tie cluster k to class k) and
under the optimal Hungarian map (acc_h). A cluster swap shows up as
acc_p < acc_h. NMI, ARI, a cosine kNN probe, a k-means baseline, and
sliding-window map prediction round out the report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import ModelState, encode, prototype_scores


@dataclass
class MetricsReport:
    acc_p: float
    acc_h: float
    nmi: float
    ari: float
    knn_acc: float
    permutation: np.ndarray
    confusion: np.ndarray

    @property
    def cluster_swap(self) -> bool:
        return bool(np.any(self.permutation != np.arange(self.permutation.size)))

    def to_dict(self) -> dict:
        return {
            "acc_p": self.acc_p,
            "acc_h": self.acc_h,
            "nmi": self.nmi,
            "ari": self.ari,
            "knn_acc": self.knn_acc,
            "permutation": self.permutation.tolist(),
            "cluster_swap": self.cluster_swap,
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(true_labels, pred_labels, class_count: int) -> np.ndarray:
    """Counts[i, j] = samples with true class i assigned to cluster j."""
    t = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    if t.shape != p.shape:
        raise ValueError("label arrays must have equal length")
    out = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(out, (t, p), 1)
    return out


def _assignment_value(M: np.ndarray) -> int:
    rows, cols = linear_sum_assignment(M, maximize=True)
    return int(M[rows, cols].sum())


def hungarian_match(confusion: np.ndarray) -> np.ndarray:
    """Cluster-to-class map maximizing sum_c confusion[perm[c], c].

    Solves the assignment problem exactly (Kuhn-Munkres), then refines ties
    so the returned permutation is the lexicographically smallest optimal
    one.
    """
    M = np.asarray(confusion)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {M.shape}")
    K = M.shape[0]
    gains = M.T.astype(np.int64)  # gains[c, t]: cluster c mapped to class t
    best = _assignment_value(gains)

    perm = np.empty(K, dtype=np.int64)
    available = list(range(K))
    fixed_gain = 0
    for c in range(K):
        for t in available:
            rest = [x for x in available if x != t]
            sub = gains[np.ix_(range(c + 1, K), rest)]
            sub_value = _assignment_value(sub) if sub.size else 0
            if fixed_gain + int(gains[c, t]) + sub_value == best:
                perm[c] = t
                fixed_gain += int(gains[c, t])
                available = rest
                break
    return perm


def accuracies(true_labels, cluster_assignments, class_count: int):
    """(acc_p, acc_h, permutation): identity-map accuracy, Hungarian-map
    accuracy, and the optimal cluster-to-class permutation."""
    t = np.asarray(true_labels)
    a = np.asarray(cluster_assignments)
    if t.shape != a.shape:
        raise ValueError("label arrays must have equal length")
    conf = confusion_matrix(t, a, class_count)
    perm = hungarian_match(conf)
    acc_p = float((t == a).mean())
    acc_h = float(conf[perm, np.arange(class_count)].sum() / t.size)
    return acc_p, acc_h, perm


def _contingency(u, v):
    _, ui = np.unique(u, return_inverse=True)
    _, vi = np.unique(v, return_inverse=True)
    table = np.zeros((ui.max() + 1, vi.max() + 1), dtype=np.int64)
    np.add.at(table, (ui, vi), 1)
    return table


def _canonical_labels(x) -> np.ndarray:
    """Relabel by order of first appearance, so equal partitions compare equal."""
    _, first, inverse = np.unique(x, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first)] = np.arange(first.size)
    return rank[inverse]


def _same_partition(u, v) -> bool:
    return bool(np.array_equal(_canonical_labels(u), _canonical_labels(v)))


def nmi(true_labels, assignments) -> float:
    """Mutual information normalized by the geometric mean of the two
    partition entropies. Two trivial (single-cluster) partitions score 1;
    a trivial partition against a non-trivial one scores 0."""
    u = np.asarray(true_labels)
    v = np.asarray(assignments)
    if u.size == 0 or u.shape != v.shape:
        raise ValueError("need non-empty label arrays of equal length")
    table = _contingency(u, v)
    n = u.size
    pij = table / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    h_u = float(-(pi[pi > 0] * np.log(pi[pi > 0])).sum())
    h_v = float(-(pj[pj > 0] * np.log(pj[pj > 0])).sum())
    if h_u == 0.0 and h_v == 0.0:
        return 1.0
    if h_u == 0.0 or h_v == 0.0:
        return 0.0
    nz = pij > 0
    mi = float((pij[nz] * (np.log(pij[nz]) - np.log(np.outer(pi, pj)[nz]))).sum())
    return float(min(1.0, max(0.0, mi / np.sqrt(h_u * h_v))))


def ari(true_labels, assignments) -> float:
    """Adjusted Rand index from contingency pair counts; degenerate
    denominators return 1 for identical partitions, else 0."""
    u = np.asarray(true_labels)
    v = np.asarray(assignments)
    if u.size == 0 or u.shape != v.shape:
        raise ValueError("need non-empty label arrays of equal length")
    table = _contingency(u, v)
    n = int(u.size)

    def comb2(x):
        x = np.asarray(x, dtype=np.int64)
        return (x * (x - 1)) // 2

    sum_ij = int(comb2(table).sum())
    sum_a = int(comb2(table.sum(axis=1)).sum())
    sum_b = int(comb2(table.sum(axis=0)).sum())
    total = int(comb2(n))
    expected = sum_a * sum_b / total if total else 0.0
    maximum = (sum_a + sum_b) / 2.0
    if maximum == expected:
        return 1.0 if _same_partition(u, v) else 0.0
    return float((sum_ij - expected) / (maximum - expected))


def knn_classify(train_Z, train_labels, test_Z, k: int = 25) -> np.ndarray:
    """Majority vote over the k cosine-nearest training embeddings.

    Assumes unit-norm rows, so cosine ranking equals Euclidean ranking.
    Vote ties go to the class of the nearest neighbor among the tied
    classes; similarity ties are broken by training index.
    """
    train_Z = np.asarray(train_Z)
    test_Z = np.asarray(test_Z)
    labels = np.asarray(train_labels)
    if k < 1 or k > train_Z.shape[0]:
        raise ValueError(f"k={k} outside [1, {train_Z.shape[0]}]")
    sims = test_Z @ train_Z.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    out = np.empty(test_Z.shape[0], dtype=labels.dtype)
    for i in range(test_Z.shape[0]):
        votes = labels[order[i]]
        counts = np.bincount(votes)
        tied = np.flatnonzero(counts == counts.max())
        if tied.size == 1:
            out[i] = tied[0]
        else:
            nearest = votes[np.isin(votes, tied).argmax()]
            out[i] = nearest
    return out


@dataclass
class KMeansResult:
    assignments: np.ndarray
    inertia: float
    per_seed: list[tuple[np.ndarray, float]]


def _farthest_point_centroids(Z, K, rng) -> np.ndarray:
    n = Z.shape[0]
    centroids = np.empty((K, Z.shape[1]))
    centroids[0] = Z[rng.integers(n)]
    d2 = ((Z - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        centroids[k] = Z[int(d2.argmax())]
        d2 = np.minimum(d2, ((Z - centroids[k]) ** 2).sum(axis=1))
    return centroids


def kmeans(Z, K: int, seeds=(0, 1, 2, 3, 4), max_iters: int = 300) -> KMeansResult:
    """Lloyd iterations with farthest-point seeding, run once per seed.

    Stops when assignments stabilize or after max_iters. An emptied cluster
    is re-seeded at the point farthest from its current centroid. Reports
    every seed's result so the seed-to-seed spread is measurable; the best
    run (lowest inertia) is the headline assignment.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if K < 1 or K > n:
        raise ValueError(f"K={K} outside [1, {n}]")
    per_seed = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        centroids = _farthest_point_centroids(Z, K, rng)
        assign = np.full(n, -1)
        for _ in range(max_iters):
            d2 = ((Z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_assign = d2.argmin(axis=1)
            for k in range(K):
                members = new_assign == k
                if members.any():
                    centroids[k] = Z[members].mean(axis=0)
                else:
                    far = int(d2.min(axis=1).argmax())
                    centroids[k] = Z[far]
                    new_assign[far] = k
            if np.array_equal(new_assign, assign):
                break
            assign = new_assign
        inertia = float(((Z - centroids[assign]) ** 2).sum())
        per_seed.append((assign, inertia))
    best_idx = int(np.argmin([inertia for _, inertia in per_seed]))
    best_assign, best_inertia = per_seed[best_idx]
    return KMeansResult(assignments=best_assign, inertia=best_inertia, per_seed=per_seed)


def predict_map(
    state: ModelState,
    raster,
    permutation: np.ndarray | None = None,
    batch_size: int = 1024,
) -> np.ndarray:
    """Sliding-window class map: every pixel with a full patch window gets
    its argmax-prototype cluster (mapped through `permutation` if given);
    border pixels stay -1."""
    h = raster.patch_size // 2
    H, W = raster.height, raster.width
    out = np.full((H, W), -1, dtype=np.int32)
    if permutation is None:
        permutation = np.arange(state.config.cluster_count)
    permutation = np.asarray(permutation)

    coords = [(r, c) for r in range(h, H - h) for c in range(h, W - h)]
    for start in range(0, len(coords), batch_size):
        chunk = coords[start : start + batch_size]
        batch = np.stack(
            [raster.values[:, r - h : r + h + 1, c - h : c + h + 1].ravel() for r, c in chunk]
        )
        Z, _ = encode(state, batch)
        clusters = prototype_scores(state, Z).argmax(axis=0)
        for (r, c), k in zip(chunk, clusters):
            out[r, c] = permutation[k]
    return out
