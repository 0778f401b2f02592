"""k-means pseudo-labelling, batch prototypes and nearest-centroid inference."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as tc
from .errors import (
    EmptyClusterSet,
    EmptyInput,
    LabelOutOfRange,
    MissingClassMap,
    NoAnchors,
    TooFewPoints,
)
from .tensor import Node

SINGLETON_STD_FRACTION = 0.1


@dataclass(frozen=True)
class ClusterSet:
    centroids: np.ndarray
    stds: np.ndarray
    counts: np.ndarray
    class_map: dict[int, int] | None = None
    inertia: float = 0.0

    def __len__(self):
        return len(self.centroids)

    def with_class_map(self, class_map: dict[int, int]) -> "ClusterSet":
        return ClusterSet(self.centroids, self.stds, self.counts, dict(class_map), self.inertia)

    def to_json(self) -> str:
        return json.dumps({
            "centroids": self.centroids.tolist(),
            "stds": self.stds.tolist(),
            "counts": self.counts.tolist(),
            "class_map": None if self.class_map is None else {str(k): v for k, v in self.class_map.items()},
            "inertia": self.inertia,
        })

    @classmethod
    def from_json(cls, text: str) -> "ClusterSet":
        d = json.loads(text)
        cmap = d.get("class_map")
        return cls(
            centroids=np.asarray(d["centroids"], dtype=np.float64),
            stds=np.asarray(d["stds"], dtype=np.float64),
            counts=np.asarray(d["counts"], dtype=np.int64),
            class_map=None if cmap is None else {int(k): int(v) for k, v in cmap.items()},
            inertia=float(d.get("inertia", 0.0)),
        )


@dataclass
class LloydResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    closest = _sq_dists(points, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total)
        centers.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None, :])[:, 0])
    return np.array(centers)


def lloyd(points: np.ndarray, init: np.ndarray, max_iters: int = 100, tol: float = 1e-8) -> LloydResult:
    """Plain Lloyd iterations; ``history`` holds the objective after each assignment."""
    centroids = init.copy()
    k = len(centroids)
    history = []
    labels = np.zeros(len(points), dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d = _sq_dists(points, centroids)
        labels = np.argmin(d, axis=1)
        point_cost = d[np.arange(len(points)), labels]
        history.append(float(point_cost.sum()))
        new = np.empty_like(centroids)
        counts = np.bincount(labels, minlength=k)
        for c in range(k):
            if counts[c]:
                new[c] = points[labels == c].mean(axis=0)
            else:
                # relocate an empty centroid onto the worst-served point
                far = int(np.argmax(point_cost))
                new[c] = points[far]
                point_cost[far] = 0.0
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(points, centroids)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(points)), labels].sum())
    history.append(inertia)
    return LloydResult(centroids, labels, inertia, history, n_iter)


def _transfer_deltas(points, labels, counts, sums):
    """Cost change of moving each point to its best other cluster, and that cluster."""
    rows = np.arange(len(points))
    d = _sq_dists(points, sums / np.maximum(counts, 1)[:, None])
    own = counts[labels]
    with np.errstate(divide="ignore", invalid="ignore"):
        leave = np.where(own > 1, own / (own - 1) * d[rows, labels], -np.inf)
    join = counts[None, :] / (counts[None, :] + 1) * d
    join[rows, labels] = np.inf
    target = np.argmin(join, axis=1)
    return join[rows, target] - leave, target, float(d[rows, labels].sum())


def transfer_refine(points: np.ndarray, labels: np.ndarray, k: int, max_passes: int = 1000) -> LloydResult:
    """Single-point transfers (Hartigan's rule) starting from a Lloyd solution.

    Moving x from cluster a to b changes the objective by
    n_b/(n_b+1) ||x - c_b||^2 - n_a/(n_a-1) ||x - c_a||^2. Each pass finds the
    points with a negative change in one vectorised sweep, then re-checks and
    moves them one at a time against the current cluster sums. This escapes
    many Lloyd fixed points and never raises the objective.
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, labels, points)
    history = []
    for _ in range(max_passes):
        delta, _, cost = _transfer_deltas(points, labels, counts, sums)
        history.append(cost)
        cand = np.flatnonzero(delta < -1e-12)
        if cand.size == 0:
            break
        for i in cand[np.argsort(delta[cand], kind="stable")]:
            a, x = labels[i], points[i]
            if counts[a] <= 1:
                continue
            d = ((sums / np.maximum(counts, 1)[:, None] - x) ** 2).sum(axis=1)
            join = counts / (counts + 1) * d
            join[a] = np.inf
            b = int(np.argmin(join))
            if join[b] < counts[a] / (counts[a] - 1) * d[a] - 1e-12:
                labels[i] = b
                counts[a] -= 1
                counts[b] += 1
                sums[a] -= x
                sums[b] += x
    centroids = sums / np.maximum(counts, 1)[:, None]
    inertia = float(((points - centroids[labels]) ** 2).sum())
    return LloydResult(centroids, labels, inertia, history, len(history))


def cluster_stds(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster sigma (mean over dims of per-dim std) and member counts.

    Singleton or empty clusters fall back to a tenth of the median pairwise
    centroid distance.
    """
    k = len(centroids)
    counts = np.bincount(labels, minlength=k)
    stds = np.zeros(k)
    for c in range(k):
        if counts[c] >= 2:
            stds[c] = points[labels == c].std(axis=0).mean()
    lonely = counts < 2
    if lonely.any():
        if k >= 2:
            iu = np.triu_indices(k, 1)
            pair = np.sqrt(_sq_dists(centroids, centroids)[iu])
            fallback = SINGLETON_STD_FRACTION * float(np.median(pair))
        else:
            fallback = 0.0
        stds[lonely] = fallback
    return stds, counts


def kmeans(points, n_clusters: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-8,
           n_init: int = 1) -> tuple[ClusterSet, np.ndarray]:
    """Best-of-``n_init`` k-means with k-means++ seeding.

    Returns the cluster set and each point's assignment.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise EmptyInput("kmeans needs a non-empty (n, d) array")
    if max_iters < 1 or n_clusters < 1:
        raise ValueError("n_clusters and max_iters must be >= 1")
    n_distinct = len(np.unique(points, axis=0))
    if n_clusters > n_distinct:
        raise TooFewPoints(f"{n_clusters} clusters requested but only {n_distinct} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = kmeans_plusplus(points, n_clusters, rng)
        res = lloyd(points, init, max_iters, tol)
        if len(np.unique(res.labels)) == n_clusters:
            refined = transfer_refine(points, res.labels, n_clusters)
            if refined.inertia < res.inertia:
                res = refined
        if best is None or res.inertia < best.inertia:
            best = res
    stds, counts = cluster_stds(points, best.labels, best.centroids)
    return ClusterSet(best.centroids, stds, counts, None, best.inertia), best.labels


# ---------------------------------------------------------------------------

class Prototypes(NamedTuple):
    vectors: object   # unit-normalised means of present clusters (Node or array)
    means: object     # the same before normalisation
    present: np.ndarray  # cluster ids that had members in the batch, ascending


def averaging_matrix(labels: Sequence[int], n_clusters: int) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_clusters):
        raise LabelOutOfRange(f"labels must lie in [0, {n_clusters})")
    counts = np.bincount(labels, minlength=n_clusters)
    present = np.flatnonzero(counts)
    a = (labels[None, :] == present[:, None]).astype(np.float64)
    a /= counts[present][:, None]
    return a, present


def batch_prototypes(embeddings, pseudo_labels: Sequence[int], n_clusters: int) -> Prototypes:
    """Per-cluster mean embeddings, L2-normalised. Absent clusters are left out."""
    a, present = averaging_matrix(pseudo_labels, n_clusters)
    if isinstance(embeddings, Node):
        means = tc.matmul(embeddings.graph.constant(a), embeddings)
        return Prototypes(tc.l2_normalize(means, axis=1), means, present)
    emb = np.asarray(embeddings, dtype=np.float64)
    means = a @ emb
    return Prototypes(tc.numeric(lambda m: tc.l2_normalize(m, axis=1), means), means, present)


def assign(z, clusters: ClusterSet) -> int:
    if len(clusters) == 0:
        raise EmptyClusterSet("no clusters")
    return int(assign_many(np.asarray(z, dtype=np.float64)[None, :], clusters.centroids)[0])


def assign_many(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per row; ``argmin`` already resolves ties to the lowest id."""
    if len(centroids) == 0:
        raise EmptyClusterSet("no clusters")
    return np.argmin(_sq_dists(np.asarray(points, dtype=np.float64), centroids), axis=1)


def map_clusters_to_classes(clusters: ClusterSet, anchors: np.ndarray, anchor_classes: Sequence[int]) -> ClusterSet:
    """Label each cluster by majority vote of the labelled anchors it captures."""
    anchors = np.asarray(anchors, dtype=np.float64)
    anchor_classes = np.asarray(anchor_classes, dtype=np.int64)
    if len(anchors) == 0:
        raise NoAnchors("at least one labelled anchor is required")
    if len(clusters) == 0:
        raise EmptyClusterSet("no clusters")
    owner = assign_many(anchors, clusters.centroids)
    class_map: dict[int, int] = {}
    for c in range(len(clusters)):
        votes = anchor_classes[owner == c]
        if votes.size:
            labels, counts = np.unique(votes, return_counts=True)  # sorted, so ties -> smallest id
            class_map[c] = int(labels[np.argmax(counts)])
    bearing = np.array(sorted(class_map))
    for c in range(len(clusters)):
        if c not in class_map:
            d = _sq_dists(clusters.centroids[c][None, :], clusters.centroids[bearing])[0]
            class_map[c] = class_map[int(bearing[np.argmin(d)])]
    return clusters.with_class_map(class_map)


def pooled_centroids(accumulated: Sequence[ClusterSet]) -> tuple[np.ndarray, np.ndarray]:
    cents, classes = [], []
    for cs in accumulated:
        if cs.class_map is None:
            raise MissingClassMap("every cluster set needs a class map before inference")
        for c in range(len(cs)):
            if cs.counts[c] > 0:
                cents.append(cs.centroids[c])
                classes.append(cs.class_map[c])
    if not cents:
        raise EmptyClusterSet("no populated clusters")
    return np.array(cents), np.array(classes, dtype=np.int64)


def nearest_class(z: np.ndarray, centroids: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Class of the nearest pooled centroid; exact ties go to the smallest class id."""
    d = _sq_dists(np.atleast_2d(z), centroids)
    tied = d == d.min(axis=1, keepdims=True)
    return np.where(tied, classes[None, :], np.iinfo(np.int64).max).min(axis=1)


def classify_batch(state, accumulated: Sequence[ClusterSet], x) -> np.ndarray:
    from .model import represent

    centroids, classes = pooled_centroids(accumulated)
    return nearest_class(represent(state, np.atleast_2d(x)), centroids, classes)


def classify(state, accumulated: Sequence[ClusterSet], x) -> int:
    return int(classify_batch(state, accumulated, np.asarray(x)[None, :])[0])


def matched_accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    """Clustering accuracy under the best one-to-one label matching (Hungarian)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("pred and truth must be non-empty and equally long")
    p_ids, p_idx = np.unique(pred, return_inverse=True)
    t_ids, t_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((len(p_ids), len(t_ids)), dtype=np.int64)
    np.add.at(table, (p_idx, t_idx), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum()) / pred.size
