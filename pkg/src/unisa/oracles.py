"""Independent reference computations used to check the main implementation.

Every function here is written from the definition (brute force, closed form,
finite differences, plain loops) and shares no code with the module it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn(x.copy())
        x[idx] = old - h
        down = fn(x.copy())
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(floor, np.max(np.abs(a)), np.max(np.abs(b))))


def brute_force_kmeans(points, k: int) -> tuple[float, np.ndarray]:
    """Global k-means optimum by enumerating every labelling with all k clusters used."""
    pts = np.asarray(points, dtype=np.float64)
    best, best_labels = math.inf, None
    for labels in itertools.product(range(k), repeat=len(pts)):
        labels = np.array(labels)
        if labels[0] != 0 or len(set(labels.tolist())) < k:   # fix label 0 to skip mirror images
            continue
        cost = 0.0
        for c in range(k):
            members = pts[labels == c]
            cost += float(((members - members.mean(axis=0)) ** 2).sum())
        if cost < best - 1e-12:
            best, best_labels = cost, labels
    return best, best_labels


def nearest_index(z, centroids) -> int:
    """Exhaustive nearest centroid with a first-wins tie rule."""
    best, best_d = 0, math.inf
    for i, c in enumerate(centroids):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(z, c))
        if d < best_d:
            best, best_d = i, d
    return best


def info_nce_loop(z, z_pos, negatives, tau: float) -> float:
    z = np.asarray(z, dtype=np.float64)
    pos = float(z @ np.asarray(z_pos)) / tau
    neg = sum(math.exp(float(z @ np.asarray(n)) / tau) for n in negatives)
    return -pos + math.log(neg)


def psl_loop(c, c_aug, tau: float) -> float:
    c, c_aug = np.asarray(c, dtype=np.float64), np.asarray(c_aug, dtype=np.float64)
    n = len(c)
    align = sum(-float(c[i] @ c_aug[i]) / tau for i in range(n)) / n
    spread = sum(math.log(sum(math.exp(float(c[s] @ c[j]) / tau) for j in range(n) if j != s))
                 for s in range(n)) / n
    return align + spread


def kl_uniform_sum(probs) -> float:
    """KL(p || uniform) with the 0 log 0 = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    m = len(p)
    return sum(float(pi) * math.log(float(pi) * m) for pi in p if pi > 0)


def ball_triplet_loop(samples, owners, centroids, r: float) -> float:
    total = 0.0
    for z, i in zip(samples, owners):
        d_own = math.dist(z, centroids[i])
        for j, c in enumerate(centroids):
            if j != i:
                total += max(0.0, d_own + r - math.dist(z, c))
    return total


def drift_loop(c, c_star) -> float:
    return sum(math.dist(a, b) for a, b in zip(c, c_star))


def mas_penalty_loop(theta: dict, theta_prev: dict, gamma: dict, lambda5: float) -> float:
    total = 0.0
    for name in theta:
        for t, p, g in zip(np.ravel(theta[name]), np.ravel(theta_prev[name]), np.ravel(gamma[name])):
            total += float(g) * (float(t) - float(p)) ** 2
    return lambda5 * total


def radial_cdf(r, sigma: float, dim: int):
    """P(||z - C|| <= r) for z uniform in a dim-ball of radius sigma."""
    return np.clip(np.asarray(r, dtype=np.float64) / sigma, 0.0, 1.0) ** dim


def ks_statistic(samples, cdf) -> float:
    """One-sample Kolmogorov-Smirnov distance against a continuous, vectorised CDF."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(x)
    f = np.asarray(cdf(x), dtype=np.float64)
    hi = np.arange(1, n + 1) / n - f
    lo = f - np.arange(0, n) / n
    return float(max(hi.max(), lo.max()))


def half_normal_mean(sigma: float) -> float:
    return sigma * math.sqrt(2.0 / math.pi)


def hungarian_free_accuracy(pred, truth) -> float:
    """Best accuracy over all label permutations, by enumeration (small label sets only)."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    pl, tl = sorted(set(pred.tolist())), sorted(set(truth.tolist()))
    k = max(len(pl), len(tl))
    if k > 8:
        raise ValueError("enumeration oracle limited to 8 labels")
    tl = tl + [None] * (k - len(tl))
    best = 0
    for perm in itertools.permutations(tl, k):
        mapping = dict(zip(pl, perm))
        best = max(best, sum(mapping.get(p) == t for p, t in zip(pred.tolist(), truth.tolist())))
    return best / len(pred)


# ---------------------------------------------------------------------------

def derived_values(seed: int = 0) -> dict[str, float]:
    """Reference values printed by ``unisa oracle`` and frozen in the tests."""
    out: dict[str, float] = {}

    out["info_nce.aligned_one_orthogonal_negative"] = info_nce_loop([1, 0], [1, 0], [[0, 1]], 1.0)
    out["info_nce.all_orthogonal"] = info_nce_loop([1, 0, 0], [0, 1, 0], [[0, 0, 1]], 1.0)
    out["psl.identical_prototypes"] = psl_loop([[1, 0], [1, 0]], [[1, 0], [1, 0]], 1.0)
    out["psl.orthogonal_prototypes"] = psl_loop([[1, 0], [0, 1]], [[1, 0], [0, 1]], 1.0)
    out["kl.half_half_zero_zero"] = kl_uniform_sum([0.5, 0.5, 0.0, 0.0])
    out["mas.scalar_gamma"] = abs(2 * 1.0 * 1.0**2)

    cost, labels = brute_force_kmeans([[0, 0], [0, 1], [10, 0], [10, 1]], 2)
    out["kmeans.four_points.inertia"] = cost
    pts = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    cents = sorted(tuple(pts[labels == c].mean(axis=0)) for c in range(2))
    out["kmeans.four_points.c0_y"] = cents[0][1]
    out["kmeans.four_points.c1_x"] = cents[1][0]

    out["ball.fraction_within_half_radius_d2"] = float(radial_cdf(0.5, 1.0, 2))
    out["augment.half_normal_mean_sigma_0.1"] = half_normal_mean(0.1)

    # nearest-mean accuracy on well-separated classes, computed with plain loops
    from .data import generate_blobs
    ds = generate_blobs(5, 8, 60, class_sep=10.0, cluster_std=1.0, seed=seed)
    means = [ds.x[ds.y == c].mean(axis=0) for c in range(5)]
    hits = sum(nearest_index(x, means) == y for x, y in zip(ds.x, ds.y))
    out["blobs.sep10_nearest_mean_accuracy"] = hits / len(ds.y)

    return out
