"""Synthetic latent samples drawn uniformly inside per-cluster balls."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterSet
from .errors import EmptyClusterSet, ZeroDirection
from .model import ModelState, project_feature
from .tensor import Graph

MIN_DIRECTION_NORM = 1e-12
MAX_REDRAWS = 8


@dataclass
class SyntheticBatch:
    samples: object          # projected samples, (S, D_hat) array or graph Node
    owners: np.ndarray       # owning cluster id per sample
    source_raw: np.ndarray   # ball samples before projection


def ball_point(centroid, sigma: float, u: float, omega) -> np.ndarray:
    """C + u^(1/d) * sigma * omega / ||omega||, d the dimension of the ball space."""
    centroid = np.asarray(centroid, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    n = np.linalg.norm(omega)
    if n < MIN_DIRECTION_NORM:
        raise ZeroDirection("direction vector has (near) zero norm")
    return centroid + u ** (1.0 / centroid.size) * sigma * omega / n


def _directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    omega = rng.standard_normal((n, d))
    norms = np.linalg.norm(omega, axis=1)
    for _ in range(MAX_REDRAWS):
        bad = norms < MIN_DIRECTION_NORM
        if not bad.any():
            break
        omega[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(omega, axis=1)
    else:
        if (norms < MIN_DIRECTION_NORM).any():
            raise ZeroDirection(f"direction still degenerate after {MAX_REDRAWS} redraws")
    return omega / norms[:, None]


def sample_ball_many(centroid, sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    centroid = np.asarray(centroid, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    d = centroid.size
    if d < 2:
        raise ValueError("ball sampling needs at least 2 dimensions")
    u = rng.uniform(size=n)
    dirs = _directions(rng, n, d)
    return centroid[None, :] + (u ** (1.0 / d) * sigma)[:, None] * dirs


def sample_ball(centroid, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return sample_ball_many(centroid, sigma, 1, rng)[0]


def round_robin_owners(clusters: ClusterSet, s_count: int) -> np.ndarray:
    populated = np.flatnonzero(np.asarray(clusters.counts) > 0)
    if len(populated) == 0:
        raise EmptyClusterSet("no populated cluster to sample from")
    return populated[np.arange(s_count) % len(populated)]


def synth_batch(clusters: ClusterSet, s_count: int, state: ModelState, rng: np.random.Generator,
                graph: Graph | None = None) -> SyntheticBatch:
    """Draw ``s_count`` ball samples (owners cycle over clusters) and project them.

    With ``graph`` the projected samples are a Node, differentiable through the
    projection module's parameters.
    """
    if len(clusters) == 0:
        raise EmptyClusterSet("no clusters")
    if s_count < 1:
        raise ValueError("s_count must be >= 1")
    owners = round_robin_owners(clusters, s_count)
    d = clusters.centroids.shape[1]
    u = rng.uniform(size=s_count)
    dirs = _directions(rng, s_count, d)
    radii = u ** (1.0 / d) * clusters.stds[owners]
    raw = clusters.centroids[owners] + radii[:, None] * dirs
    projected = project_feature(state, raw, graph)
    return SyntheticBatch(projected, owners, raw)
