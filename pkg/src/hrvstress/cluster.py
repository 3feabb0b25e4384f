"""Clustering and labeling: K-means baseline, DBSCAN, KNN.

K-means runs on z-scored feature vectors; DBSCAN and KNN run on raw 2D
latent codes (the autoencoder already fixes their scale).  DBSCAN noise
carries the label -1 and cluster ids are remapped so cluster 0 is always
the largest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NOISE = -1

KMEANS_MAX_ITER = 300
DEFAULT_MIN_PTS = 5
DEFAULT_KNN_K = 5


def zscore(points: np.ndarray) -> np.ndarray:
    """Column-wise standardization; constant columns become zeros."""
    x = np.asarray(points, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (x - mu) / sd


# ---------------------------------------------------------------------------
# K-means


@dataclass
class KmeansModel:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def kmeans(points: np.ndarray, k: int = 2, seed: int = 0, max_iter: int = KMEANS_MAX_ITER) -> KmeansModel:
    """Lloyd iterations from a k-means++ start, to an assignment fixpoint.

    An emptied cluster is re-seeded at the point farthest from its centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k:
        raise ValueError(f"need at least {k} points, got shape {x.shape}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(x.shape[0])]
    for j in range(1, k):
        d2 = _sq_dists(x, centroids[:j]).min(axis=1)
        total = d2.sum()
        if total == 0.0:
            centroids[j] = x[rng.integers(x.shape[0])]
        else:
            centroids[j] = x[rng.choice(x.shape[0], p=d2 / total)]

    labels = np.full(x.shape[0], -1, dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        for j in range(k):
            members = x[new_labels == j]
            if members.shape[0] == 0:
                far = d2.min(axis=1).argmax()
                centroids[j] = x[far]
                new_labels[far] = j
            else:
                centroids[j] = members.mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return KmeansModel(centroids=centroids, labels=labels, inertia=inertia, n_iter=n_iter)


# ---------------------------------------------------------------------------
# DBSCAN


@dataclass
class DbscanResult:
    labels: np.ndarray
    eps: float
    min_pts: int
    cluster_sizes: list[int] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def n_noise(self) -> int:
        return int(np.sum(self.labels == NOISE))


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> DbscanResult:
    """Classic density clustering; a point is core when at least min_pts
    points (itself included) lie within eps of it.

    Cluster ids are remapped by decreasing size (ties by discovery order), so
    cluster 0 is the largest.  Noise keeps the label -1.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 2:
        raise ValueError("min_pts must be at least 2")
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    dist = np.sqrt(np.maximum(_sq_dists(x, x), 0.0))
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    is_core = np.array([len(nb) >= min_pts for nb in neighbors])

    labels = np.full(n, NOISE, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    cluster_id = 0
    for start in range(n):
        if visited[start] or not is_core[start]:
            continue
        queue = [start]
        visited[start] = True
        labels[start] = cluster_id
        while queue:
            p = queue.pop()
            for q in neighbors[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster_id
                if not visited[q] and is_core[q]:
                    visited[q] = True
                    queue.append(q)
        cluster_id += 1

    sizes = [int(np.sum(labels == c)) for c in range(cluster_id)]
    order = sorted(range(cluster_id), key=lambda c: (-sizes[c], c))
    remap = {old: new for new, old in enumerate(order)}
    relabeled = np.array([remap[l] if l != NOISE else NOISE for l in labels], dtype=np.int64)
    return DbscanResult(
        labels=relabeled, eps=eps, min_pts=min_pts,
        cluster_sizes=[sizes[c] for c in order],
    )


def k_distance_curve(points: np.ndarray, k: int) -> np.ndarray:
    """Each point's distance to its k-th nearest neighbor (itself counted),
    sorted ascending.  The core-point test at eps = curve[i] admits exactly
    the points whose curve value is <= eps."""
    x = np.asarray(points, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"need at least {k} points for the k-distance curve")
    dist = np.sqrt(np.maximum(_sq_dists(x, x), 0.0))
    kth = np.sort(dist, axis=1)[:, k - 1]
    return np.sort(kth)


def knee_eps(points: np.ndarray, min_pts: int = DEFAULT_MIN_PTS) -> float:
    """Default eps: the knee of the sorted k-distance curve, located as the
    point of maximum distance to the chord between the curve's endpoints.

    The deviation is measured on log-scaled distances.  Distances are
    ratio-scale data that commonly span orders of magnitude between a dense
    cluster interior and the outlier fringe; on a linear axis the chord
    hugs the flat run and the detected elbow slides to the fringe's base,
    below the density level of sparser clusters.  The log axis weighs the
    fringe and the interior evenly, putting the elbow at the transition.
    """
    curve = k_distance_curve(points, min_pts)
    n = curve.size
    if n < 3 or curve[-1] == curve[0]:
        return float(max(curve[-1], 1e-12))
    floor = max(curve[-1] * 1e-9, 1e-300)
    logc = np.log(np.maximum(curve, floor))
    if logc[-1] == logc[0]:
        return float(max(curve[-1], 1e-12))
    u = np.arange(n, dtype=np.float64) / (n - 1)
    v = (logc - logc[0]) / (logc[-1] - logc[0])
    knee = int(np.argmax(np.abs(v - u)))
    return float(max(curve[knee], 1e-12))


# ---------------------------------------------------------------------------
# KNN


@dataclass
class KnnModel:
    points: np.ndarray
    labels: np.ndarray
    k: int


def knn_fit(latents: np.ndarray, labels: np.ndarray, k: int = DEFAULT_KNN_K) -> KnnModel:
    """Reference set for majority-vote labeling; noise must be filtered out
    by the caller, only labels 0 and 1 are accepted."""
    pts = np.asarray(latents, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if pts.shape[0] == 0:
        raise ValueError("empty reference set")
    if pts.shape[0] != lab.shape[0]:
        raise ValueError("latents and labels differ in length")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("reference labels must be 0 or 1 (exclude noise first)")
    if k % 2 == 0:
        raise ValueError("k must be odd")
    if k > pts.shape[0]:
        raise ValueError(f"k={k} exceeds reference count {pts.shape[0]}")
    return KnnModel(points=pts, labels=lab, k=k)


def knn_predict(model: KnnModel, queries: np.ndarray) -> np.ndarray:
    """Majority label among the k nearest references (Euclidean).  Equal
    distances are broken by reference index, which keeps results stable."""
    q = np.asarray(queries, dtype=np.float64)
    if q.size == 0:
        return np.zeros(0, dtype=np.int64)
    d = np.sqrt(np.maximum(_sq_dists(q, model.points), 0.0))
    nearest = np.argsort(d, axis=1, kind="stable")[:, : model.k]
    votes = model.labels[nearest].sum(axis=1)
    return (votes * 2 > model.k).astype(np.int64)
