"""k-means, elbow selection and cluster validity metrics (Silhouette, DBI, CHI, ARI)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb

from .errors import ContractError, MetricUndefinedError, ParameterError

MAX_LLOYD_ITER = 300


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    k: int
    seed: int
    n_iter: int = 0
    inertia_trace: tuple[float, ...] = ()

    def predict(self, X) -> np.ndarray:
        return assign(np.asarray(X, dtype=float), self.centroids)[0]


@dataclass(frozen=True)
class ValidityReport:
    silhouette: float
    davies_bouldin: float
    calinski_harabasz: float

    def to_dict(self) -> dict:
        return {
            "silhouette": self.silhouette,
            "davies_bouldin": self.davies_bouldin,
            "calinski_harabasz": self.calinski_harabasz,
        }


def sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def assign(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = sq_distances(X, C)
    labels = d.argmin(axis=1)
    return labels, d[np.arange(len(X)), labels]


def _kmeans_pp(X: np.ndarray, k: int, rng) -> np.ndarray:
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    closest = sq_distances(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a centre; pick any unused index
            unused = np.setdiff1d(np.arange(n), centers)
            idx = int(rng.choice(unused))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(idx)
        closest = np.minimum(closest, sq_distances(X, X[idx : idx + 1])[:, 0])
    return X[centers].copy()


def _lloyd(X: np.ndarray, C: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, float, int, list[float]]:
    k = C.shape[0]
    labels, d = assign(X, C)
    trace = [float(d.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        newC = C.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                newC[j] = X[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            # reseed an empty cluster at the point farthest from its centre
            far = int(np.argmax(d))
            newC[j] = X[far]
            d[far] = 0.0
        C = newC
        new_labels, d = assign(X, C)
        trace.append(float(d.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return C, labels, float(d.sum()), it, trace


def kmeans(X, k: int, seed: int = 0, restarts: int = 10, max_iter: int = MAX_LLOYD_ITER) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeds, best of ``restarts`` by inertia."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, N={n}], got {k}")
    if restarts < 1:
        raise ParameterError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        C, labels, inertia, n_iter, trace = _lloyd(X, _kmeans_pp(X, k, rng), max_iter)
        if best is None or inertia < best[2]:
            best = (C, labels, inertia, n_iter, trace)
    C, labels, inertia, n_iter, trace = best
    return ClusterModel(C, labels, inertia, k, seed, n_iter, tuple(trace))


@dataclass(frozen=True)
class ElbowResult:
    k: int
    inertias: tuple[float, ...]  # index 0 is k = 1
    curvature: tuple[float, ...]  # second differences at k = 2 .. k_max - 1
    low_confidence: bool
    models: tuple = field(default=(), repr=False)


def elbow(X, k_max: int = 10, seed: int = 0, restarts: int = 10) -> ElbowResult:
    """Pick k at the largest second difference of the inertia curve over k = 1..k_max."""
    if k_max < 3:
        raise ParameterError("elbow needs k_max >= 3")
    X = np.asarray(X, dtype=float)
    k_max = min(k_max, X.shape[0])
    if k_max < 3:
        raise ParameterError("elbow needs at least 3 points")
    models = [kmeans(X, k, seed, restarts) for k in range(1, k_max + 1)]
    inertias = [m.inertia for m in models]
    k, curvature, low = elbow_choice(inertias)
    return ElbowResult(k, tuple(inertias), curvature, low, tuple(models))


def elbow_choice(inertias) -> tuple[int, tuple[float, ...], bool]:
    """Chosen k, curvature at k = 2 .. len - 1, and the low-confidence flag for an inertia curve."""
    inertias = np.asarray(inertias, dtype=float)
    if inertias.size < 3:
        raise ParameterError("elbow needs inertias for at least k = 1..3")
    curvature = inertias[:-2] - 2 * inertias[1:-1] + inertias[2:]
    best = int(np.argmax(curvature))
    drop = inertias[0] - inertias[-1]
    low = bool(drop <= 0 or curvature[best] < 0.05 * drop)
    return best + 2, tuple(curvature.tolist()), low


# ---------------------------------------------------------------------------
# validity metrics


def _check_labels(X, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    if X.ndim == 1:
        X = X[:, None]
    if labels.shape != (X.shape[0],):
        raise ContractError(f"{labels.shape[0] if labels.ndim else 0} labels for {X.shape[0]} points")
    uniq, codes = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise MetricUndefinedError("metric undefined for a single cluster")
    return X, codes, uniq


def silhouette(X, labels) -> float:
    X, codes, uniq = _check_labels(X, labels)
    k = uniq.size
    n = X.shape[0]
    counts = np.bincount(codes, minlength=k)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), codes] = 1.0
    # per-point distance sums to every cluster from exact differences, in row blocks
    sums = np.empty((n, k))
    step = max(1, 2_000_000 // max(1, n * X.shape[1]))
    for s in range(0, n, step):
        diff = X[s : s + step, None, :] - X[None, :, :]
        d = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))
        sums[s : s + step] = d @ onehot
    own = counts[codes]
    a = np.where(own > 1, sums[np.arange(n), codes] / np.maximum(own - 1, 1), 0.0)
    other = sums / counts[None, :]
    other[np.arange(n), codes] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def _centroids(X, codes, k):
    return np.array([X[codes == j].mean(axis=0) for j in range(k)])


def davies_bouldin(X, labels) -> float:
    X, codes, uniq = _check_labels(X, labels)
    k = uniq.size
    C = _centroids(X, codes, k)
    scatter = np.array([np.linalg.norm(X[codes == j] - C[j], axis=1).mean() for j in range(k)])
    sep = np.linalg.norm(C[:, None, :] - C[None, :, :], axis=2)
    np.fill_diagonal(sep, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (scatter[:, None] + scatter[None, :]) / sep
    ratio[~np.isfinite(ratio)] = np.where(
        (scatter[:, None] + scatter[None, :])[~np.isfinite(ratio)] > 0, np.inf, 0.0
    )
    np.fill_diagonal(ratio, -np.inf)
    return float(ratio.max(axis=1).mean())


def calinski_harabasz(X, labels) -> float:
    X, codes, uniq = _check_labels(X, labels)
    k = uniq.size
    n = X.shape[0]
    if n <= k:
        raise MetricUndefinedError("Calinski-Harabasz needs more points than clusters")
    mean = X.mean(axis=0)
    between = within = 0.0
    for j in range(k):
        members = X[codes == j]
        c = members.mean(axis=0)
        between += len(members) * float(np.sum((c - mean) ** 2))
        within += float(np.sum((members - c) ** 2))
    if within == 0.0:
        return float("inf")
    return float((between / (k - 1)) / (within / (n - k)))


def validity_report(X, labels) -> ValidityReport:
    return ValidityReport(silhouette(X, labels), davies_bouldin(X, labels), calinski_harabasz(X, labels))


def contingency(labels_a, labels_b) -> np.ndarray:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"label lengths differ: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ContractError("ARI needs at least 2 samples")
    _, ca = np.unique(a, return_inverse=True)
    _, cb = np.unique(b, return_inverse=True)
    table = np.zeros((ca.max() + 1, cb.max() + 1), dtype=np.int64)
    np.add.at(table, (ca, cb), 1)
    return table


def adjusted_rand_index(labels_a, labels_b) -> float:
    table = contingency(labels_a, labels_b)
    n = int(table.sum())
    sum_ij = float(comb(table, 2, exact=False).sum())
    sum_a = float(comb(table.sum(axis=1), 2, exact=False).sum())
    sum_b = float(comb(table.sum(axis=0), 2, exact=False).sum())
    total = n * (n - 1) / 2.0
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        # both partitions trivial in the same way (all-one or all-singletons)
        return 1.0 if sum_a == sum_b else 0.0
    return float((sum_ij - expected) / (max_index - expected))


def ari_bootstrap_ci(labels_a, labels_b, resamples: int = 1000, seed: int = 0, level: float = 0.95):
    """ARI with a percentile bootstrap interval over resampled sample indices."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    ari = adjusted_rand_index(a, b)
    rng = np.random.default_rng(seed)
    n = a.size
    stats = np.empty(resamples)
    for r in range(resamples):
        idx = rng.integers(0, n, n)
        stats[r] = adjusted_rand_index(a[idx], b[idx])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return ari, float(lo), float(hi)
