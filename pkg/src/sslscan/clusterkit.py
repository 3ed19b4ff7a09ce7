"""K-Means, silhouette scoring and sliding-window knee estimation of K."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import rng_stream


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def members(self) -> list[np.ndarray]:
        """Sample indices of each cluster, in cluster-id order."""
        return [np.flatnonzero(self.assignments == k) for k in range(self.K)]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = np.sum(x * x, axis=1)[:, None] - 2 * x @ c.T + np.sum(c * c, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _plus_plus(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int):
    K = centers.shape[0]
    history = []
    assign = np.argmin(_sq_dists(x, centers), axis=1)
    for _ in range(max_iter):
        for k in range(K):
            members = assign == k
            if members.any():
                centers[k] = x[members].mean(axis=0)
        d = _sq_dists(x, centers)
        history.append(float(d[np.arange(len(x)), assign].sum()))
        new = np.argmin(d, axis=1)
        # an emptied cluster is re-seeded at the point farthest from its centroid
        for k in range(K):
            if not np.any(new == k):
                far = int(np.argmax(d[np.arange(len(x)), new]))
                centers[k] = x[far]
                new[far] = k
                d = _sq_dists(x, centers)
        if np.array_equal(new, assign):
            break
        assign = new
    for k in range(K):
        members = assign == k
        if members.any():
            centers[k] = x[members].mean(axis=0)
    inertia = float(_sq_dists(x, centers)[np.arange(len(x)), assign].sum())
    history.append(inertia)
    return centers, assign, inertia, history


def kmeans(
    reps: np.ndarray,
    K: int,
    rng: np.random.Generator,
    restarts: int = 3,
    max_iter: int = 100,
) -> ClusterModel:
    """k-means++ seeded Lloyd iterations; best inertia over ``restarts``.

    Rows are put in lexicographic order before seeding, so the resulting
    partition does not depend on the order samples are presented in.
    """
    x = np.asarray(reps, dtype=np.float64)
    n = x.shape[0]
    if K < 1 or n < K:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    order = np.lexsort(x.T[::-1]) if x.shape[1] else np.arange(n)
    xs = x[order]
    best = None
    for _ in range(max(1, restarts)):
        centers, assign, inertia, history = _lloyd(xs, _plus_plus(xs, K, rng), max_iter)
        if best is None or inertia < best[2]:
            best = (centers, assign, inertia, history)
    centers, assign, inertia, history = best
    out = np.empty(n, dtype=np.int64)
    out[order] = assign
    return ClusterModel(centers, out, inertia, history)


def silhouette(reps: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points in singleton clusters contribute 0.
    """
    x = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(assignments)
    uniq, lab = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    n = x.shape[0]
    dist = np.sqrt(_sq_dists(x, x))
    np.fill_diagonal(dist, 0.0)
    onehot = np.zeros((n, uniq.size))
    onehot[np.arange(n), lab] = 1.0
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot
    own = sizes[lab]
    a = np.where(own > 1, sums[np.arange(n), lab] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(n), lab] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(s))


@dataclass
class SwkConfig:
    k_list: list[int] = field(default_factory=lambda: list(range(2, 31)))
    window: int = 3
    restarts: int = 3
    max_iter: int = 100
    seed: int = 0
    silhouette_max: int = 2000

    def validate(self) -> None:
        ks = list(self.k_list)
        if len(ks) < 3:
            raise ValueError("K_list needs at least 3 candidates")
        if ks[0] < 2 or any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("K_list must be strictly increasing with K >= 2")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(
                f"window must be a small odd positive integer (got {self.window}); "
                "the sliding window is centred on each candidate K"
            )


@dataclass
class SwkTrace:
    k_list: list[int]
    s_list: list[float]
    swk_s_list: list[float]
    d_list: list[float]
    k_chosen: int
    models: dict[int, ClusterModel] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "k_list": list(self.k_list),
            "s_list": list(self.s_list),
            "swk_s_list": list(self.swk_s_list),
            "d_list": list(self.d_list),
            "k_chosen": int(self.k_chosen),
        }


def _normalize(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _argmax_first(d: np.ndarray, tol: float = 1e-12) -> int:
    return int(np.flatnonzero(d >= d.max() - tol)[0])


def window_average(s_list, window: int) -> np.ndarray:
    """Mean of each entry with its ``window // 2`` neighbours, zero padded."""
    s = np.asarray(s_list, dtype=np.float64)
    half = window // 2
    padded = np.concatenate([np.zeros(half), s, np.zeros(half)])
    return np.array([padded[i : i + window].mean() for i in range(s.size)])


def knee_distances(curve, k_list) -> np.ndarray:
    return _normalize(np.asarray(curve, dtype=np.float64)) - _normalize(
        np.asarray(k_list, dtype=np.float64)
    )


def kneedle_direct(s_list, k_list) -> int:
    """Knee of the raw silhouette curve: farthest point above the diagonal."""
    if len(s_list) != len(k_list):
        raise ValueError("s_list and K_list lengths differ")
    if len(k_list) < 3:
        raise ValueError("knee detection needs at least 3 candidates")
    return int(k_list[_argmax_first(knee_distances(s_list, k_list))])


def swk_from_scores(s_list, k_list, window: int = 3) -> SwkTrace:
    """Sliding-window knee on a precomputed silhouette curve."""
    if len(s_list) != len(k_list):
        raise ValueError("s_list and K_list lengths differ")
    swk = window_average(s_list, window)
    d = knee_distances(swk, k_list)
    return SwkTrace(
        list(map(int, k_list)),
        [float(v) for v in s_list],
        swk.tolist(),
        d.tolist(),
        int(k_list[_argmax_first(d)]),
    )


def silhouette_curve(reps: np.ndarray, cfg: SwkConfig) -> tuple[list[float], dict[int, ClusterModel]]:
    x = np.asarray(reps, dtype=np.float64)
    n = x.shape[0]
    if n < max(cfg.k_list):
        raise ValueError(f"{n} samples cannot support K up to {max(cfg.k_list)}")
    order = np.lexsort(x.T[::-1])
    sub = order
    if n > cfg.silhouette_max:
        pick = rng_stream(cfg.seed, "silhouette-subsample").choice(n, cfg.silhouette_max, replace=False)
        sub = order[np.sort(pick)]
    scores, models = [], {}
    for K in cfg.k_list:
        model = kmeans(x, K, rng_stream(cfg.seed, "kmeans", K), cfg.restarts, cfg.max_iter)
        models[K] = model
        labels = model.assignments[sub]
        scores.append(silhouette(x[sub], labels) if np.unique(labels).size > 1 else 0.0)
    return scores, models


def swk_estimate(reps: np.ndarray, cfg: SwkConfig) -> SwkTrace:
    """Estimate the cluster count of ``reps`` over ``cfg.k_list``."""
    cfg.validate()
    scores, models = silhouette_curve(reps, cfg)
    trace = swk_from_scores(scores, cfg.k_list, cfg.window)
    trace.models = models
    return trace
