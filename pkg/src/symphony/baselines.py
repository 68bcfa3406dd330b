"""Comparison methods: k-means++/Lloyd clustering and multiplicative-update NMF."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import RngStream

EPS = 1e-12


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_trace: list


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (np.sum(points**2, axis=1)[:, None] - 2 * points @ centers.T
         + np.sum(centers**2, axis=1)[None, :])
    return np.maximum(d, 0.0)


def kmeans_pp_seed(points: np.ndarray, K: int, gen: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[gen.integers(n)]]
    closest = _sq_dists(points, np.array(centers))[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            idx = gen.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), gen.uniform() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None, :])[:, 0])
    return np.array(centers)


def lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = 300) -> KMeansResult:
    centers = centers.copy()
    trace = []
    labels = None
    for _ in range(max_iter):
        dist = _sq_dists(points, centers)
        new_labels = np.argmin(dist, axis=1)
        trace.append(float(dist[np.arange(len(points)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(centers.shape[0]):
            members = labels == k
            if members.any():
                centers[k] = points[members].mean(axis=0)
        trace.append(float(_sq_dists(points, centers)[np.arange(len(points)), labels].sum()))
    return KMeansResult(labels, centers, trace[-1], trace)


def baseline_kmeans(X: np.ndarray, K: int, seed: int = 0, n_init: int = 10,
                    max_iter: int = 300, cells_as_columns: bool = True) -> np.ndarray:
    """Cluster cells with k-means++ seeding and Lloyd iterations.

    ``X`` is genes x cells by default. The best of ``n_init`` restarts (lowest
    inertia, earliest restart on ties) is returned.
    """
    return kmeans(X, K, seed, n_init, max_iter, cells_as_columns).labels


def kmeans(X: np.ndarray, K: int, seed: int = 0, n_init: int = 10, max_iter: int = 300,
           cells_as_columns: bool = True) -> KMeansResult:
    points = np.asarray(X, dtype=float)
    points = points.T if cells_as_columns else points
    if K > points.shape[0]:
        raise ValueError("K exceeds the number of points")
    best = None
    for run in range(n_init):
        gen = RngStream(seed, 1000 + run).gen
        res = lloyd(points, kmeans_pp_seed(points, K, gen), max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


@dataclass
class NmfResult:
    W: np.ndarray  # l x K profiles, rescaled so that W @ h reproduces the mean fit
    h: np.ndarray  # K mixing weights on the simplex
    H: np.ndarray  # K x r raw coefficients
    objective_trace: list


def baseline_nmf_deconvolve(C: np.ndarray, K: int, iters: int = 500, seed: int = 0) -> NmfResult:
    """Deconvolve bulk replicates with Lee-Seung multiplicative updates.

    Factorises C ~ W H under the Frobenius loss, then converts the coefficients
    to one weight vector on the simplex and rescales the profiles to match.
    """
    C = np.asarray(C, dtype=float)
    if np.any(C < 0):
        raise ValueError("NMF needs a nonnegative matrix")
    l, r = C.shape
    gen = RngStream(seed, 2000).gen
    scale = np.sqrt(max(C.mean(), EPS) / K)
    W = scale * gen.uniform(0.5, 1.5, size=(l, K))
    H = scale * gen.uniform(0.5, 1.5, size=(K, r))
    trace = [float(np.sum((C - W @ H) ** 2))]
    for _ in range(iters):
        H *= (W.T @ C) / np.maximum(W.T @ W @ H, EPS)
        W *= (C @ H.T) / np.maximum(W @ H @ H.T, EPS)
        trace.append(float(np.sum((C - W @ H) ** 2)))
    mean_h = H.mean(axis=1)
    total = mean_h.sum()
    h = mean_h / total if total > 0 else np.full(K, 1.0 / K)
    return NmfResult(W * total, h, H, trace)
