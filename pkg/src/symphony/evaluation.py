"""Metrics, cluster alignment and post-fit transforms."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import LengthMismatch, ShapeMismatch
from .model import Dataset, LatentState

MAX_EXHAUSTIVE_K = 8


# --------------------------------------------------------------------------
# clustering scores


def _pair_counts(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    """Same-cluster pair counts: (both, in a, in b)."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)

    def pairs(x):
        return float(np.sum(x * (x - 1) / 2.0))

    return pairs(table), pairs(table.sum(axis=1)), pairs(table.sum(axis=0))


def pairwise_precision_recall(inferred, truth) -> tuple[float, float]:
    inferred = np.asarray(inferred)
    truth = np.asarray(truth)
    if inferred.shape != truth.shape:
        raise LengthMismatch(f"label vectors have lengths {inferred.size} and {truth.size}")
    both, pred, true = _pair_counts(inferred, truth)
    precision = both / pred if pred > 0 else 1.0
    recall = both / true if true > 0 else 1.0
    return precision, recall


def f_score_clustering(inferred, truth) -> float:
    """Pairwise F-measure over same-cluster pairs.

    A labelling with no same-cluster pairs has precision 1 by convention (and
    likewise recall 1 when the truth has none).
    """
    p, r = pairwise_precision_recall(inferred, truth)
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def contingency(inferred, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    inferred = np.asarray(inferred)
    truth = np.asarray(truth)
    if inferred.shape != truth.shape:
        raise LengthMismatch(f"label vectors have lengths {inferred.size} and {truth.size}")
    a_ids, ai = np.unique(inferred, return_inverse=True)
    b_ids, bi = np.unique(truth, return_inverse=True)
    table = np.zeros((a_ids.size, b_ids.size), dtype=int)
    np.add.at(table, (ai, bi), 1)
    return table, a_ids, b_ids


@dataclass
class ClusterAlignment:
    mapping: dict  # inferred id -> truth id
    table: np.ndarray = field(repr=False)
    inferred_ids: np.ndarray = field(repr=False)
    truth_ids: np.ndarray = field(repr=False)


def align_clusters(inferred, truth) -> ClusterAlignment:
    """One-to-one matching of inferred to true clusters maximising overlap."""
    table, a_ids, b_ids = contingency(inferred, truth)
    rows, cols = linear_sum_assignment(-table)
    mapping = {int(a_ids[i]): int(b_ids[j]) for i, j in zip(rows, cols)}
    return ClusterAlignment(mapping, table, a_ids, b_ids)


def matched_f_score(inferred, truth) -> float:
    """Per-cluster F1 after one-to-one matching, weighted by true cluster size.

    Unmatched true clusters contribute zero.
    """
    table, a_ids, b_ids = contingency(inferred, truth)
    rows, cols = linear_sum_assignment(-table)
    n = table.sum()
    total = 0.0
    for i, j in zip(rows, cols):
        tp = table[i, j]
        if tp == 0:
            continue
        f = 2.0 * tp / (table[i].sum() + table[:, j].sum())
        total += f * table[:, j].sum() / n
    return float(total)


# --------------------------------------------------------------------------
# deconvolution score


def best_permutation(inferred: np.ndarray, truth: np.ndarray) -> tuple[int, ...]:
    """Row permutation of ``inferred`` minimising the squared error to ``truth``.

    Exhaustive for K <= 8 (ties go to the lexicographically first
    permutation), assignment-based above that.
    """
    K = truth.shape[0]
    cost = ((inferred[:, None, :] - truth[None, :, :]) ** 2).sum(axis=2)  # cost[i, k]
    if K <= MAX_EXHAUSTIVE_K:
        best, best_cost = None, np.inf
        for perm in itertools.permutations(range(K)):
            c = sum(cost[perm[k], k] for k in range(K))
            if c < best_cost:
                best, best_cost = perm, c
        return tuple(best)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(K, dtype=int)
    perm[cols] = rows
    return tuple(int(i) for i in perm)


def rmse_peaks(inferred, truth) -> float:
    """Root-mean-square error over all K x l entries after cluster alignment."""
    inferred = np.atleast_2d(np.asarray(inferred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if inferred.shape != truth.shape:
        raise ShapeMismatch(f"shapes {inferred.shape} and {truth.shape} differ")
    perm = best_permutation(inferred, truth)
    return float(np.sqrt(np.mean((inferred[list(perm)] - truth) ** 2)))


# --------------------------------------------------------------------------
# normalisation


def normalize_cells(data: Dataset | np.ndarray, state: LatentState, z=None) -> np.ndarray:
    """y_j = x_j / beta_j + (1 - alpha_j / beta_j) mu_{z_j}.

    Cells with alpha = beta = 1 are unchanged and a cell sitting exactly at
    alpha_j mu_k maps to mu_k.
    """
    X = data.X if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    z = state.z if z is None else np.asarray(z, dtype=int)
    mu = state.mu[z].T  # d x n
    return X / state.beta + (1.0 - state.alpha / state.beta) * mu


def denormalize_cells(Y: np.ndarray, state: LatentState, z=None) -> np.ndarray:
    """Inverse of :func:`normalize_cells`."""
    z = state.z if z is None else np.asarray(z, dtype=int)
    mu = state.mu[z].T
    return state.beta * (Y - (1.0 - state.alpha / state.beta) * mu)


# --------------------------------------------------------------------------
# weighted-sum validation


@dataclass
class WeightedSumCheck:
    correlation: float
    observed: np.ndarray  # row means of the bulk matrix
    predicted: np.ndarray  # sum_k pi_k p_hat_k

    def table(self) -> list[tuple[int, float, float]]:
        return [(m, float(o), float(p)) for m, (o, p) in enumerate(zip(self.observed, self.predicted))]


def weighted_sum_check(C: np.ndarray, p_hat: np.ndarray, pi: np.ndarray) -> WeightedSumCheck:
    """Pearson correlation between the bulk row means and the weighted profile sum."""
    C = np.asarray(C, dtype=float)
    C = C[:, None] if C.ndim == 1 else C
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
    pi = np.asarray(pi, dtype=float)
    if p_hat.shape != (pi.size, C.shape[0]):
        raise ShapeMismatch(f"profiles {p_hat.shape} do not match weights {pi.size} and {C.shape[0]} regions")
    obs = C.mean(axis=1)
    pred = pi @ p_hat
    a = obs - obs.mean()
    b = pred - pred.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    corr = float(np.sum(a * b) / denom) if denom > 0 else float("nan")
    return WeightedSumCheck(corr, obs, pred)


# --------------------------------------------------------------------------
# network export


@dataclass
class GrnEdge:
    cluster: int
    regulator: int
    target: int
    weight: float
    sign: int
    covariance: float
    weight_z: float | None = None
    covariance_z: float | None = None


@dataclass
class GrnExport:
    edges: list
    tau: float

    def __len__(self):
        return len(self.edges)


def _zscore(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    return (values - values.mean()) / sd if sd > 0 else np.zeros_like(values)


def export_grn(state: LatentState, tau: float, zscore: bool = False) -> GrnExport:
    """Edges with |R_k[target, regulator]| >= tau, with the matching covariance entry.

    With ``zscore`` the weight and covariance columns are also given
    standardised per cluster over all d^2 entries.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    edges = []
    for k in range(state.K):
        Rk = state.R[k]
        Sk = state.Sigma[k]
        wz = _zscore(Rk) if zscore else None
        cz = _zscore(Sk) if zscore else None
        for i, i2 in zip(*np.nonzero(np.abs(Rk) >= tau)):
            w = float(Rk[i, i2])
            edges.append(GrnEdge(k, int(i2), int(i), w, int(np.sign(w)), float(Sk[i, i2]),
                                 None if wz is None else float(wz[i, i2]),
                                 None if cz is None else float(cz[i, i2])))
    return GrnExport(edges, float(tau))
