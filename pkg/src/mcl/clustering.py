"""K-means over stage embeddings, pseudo-label bookkeeping, and diagnostics.

Pseudo labels are stored as an (M, j) integer array: column s holds the
cluster id each sample received after stage s. Stage 0 starts from an
(M, 0) array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import ConfigurationError, ContractError


@dataclass
class ClusterAssignment:
    """One stage's K-means result."""

    labels: np.ndarray          # (M,) ints in [0, K)
    centroids: np.ndarray       # (K, d)
    inertia: float
    stage: int = 0
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _assign(x: np.ndarray, centroids: np.ndarray):
    # squared euclidean distances via the expansion trick
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * x @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    labels = d2.argmin(axis=1)
    inertia = float(np.maximum(d2[np.arange(len(x)), labels], 0.0).sum())
    return labels, inertia


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    centroids[0] = x[rng.integers(m)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i:] = x[rng.integers(m, size=k - i)]
            break
        probs = d2 / total
        centroids[i] = x[rng.choice(m, p=probs)]
        d2 = np.minimum(d2, ((x - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(x: np.ndarray, k: int, max_iter: int = 100, seed: int = 0,
           tol: float = 1e-4, stage: int = 0) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    Deterministic given the seed. Empty clusters are repaired by moving
    the empty centroid onto the point farthest from the centroid of the
    largest cluster. inertia_history records the inertia after every
    assignment step (non-increasing in the absence of repairs).
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    m = x.shape[0]
    if k < 1 or m < k:
        raise ConfigurationError(f"kmeans needs 1 <= K <= M, got K={k}, M={m}")
    if not np.isfinite(x).all():
        raise ContractError("non-finite rows passed to kmeans")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    labels, inertia = _assign(x, centroids)
    history = [inertia]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # update step
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                largest = np.bincount(labels, minlength=k).argmax()
                pool = np.where(labels == largest)[0]
                far = pool[((x[pool] - centroids[largest]) ** 2).sum(axis=1).argmax()]
                centroids[c] = x[far]
                labels[far] = c
        new_labels, new_inertia = _assign(x, centroids)
        history.append(new_inertia)
        converged = bool((new_labels == labels).all())
        rel_drop = (inertia - new_inertia) / inertia if inertia > 0 else 0.0
        labels, inertia = new_labels, new_inertia
        if converged or rel_drop < tol:
            break
    return ClusterAssignment(labels=labels, centroids=centroids, inertia=inertia,
                             stage=stage, n_iter=n_iter, inertia_history=history)


def empty_pseudo_labels(m: int) -> np.ndarray:
    return np.zeros((m, 0), dtype=np.int64)


def extend_pseudo_labels(existing: np.ndarray, assignment: ClusterAssignment) -> np.ndarray:
    """Append one stage's cluster ids; prior entries are untouched."""
    existing = np.asarray(existing)
    if existing.ndim != 2:
        raise ContractError("pseudo labels must be a 2-d (M, j) array")
    if existing.shape[0] != assignment.labels.shape[0]:
        raise ContractError(
            f"pseudo labels cover {existing.shape[0]} samples but the "
            f"assignment covers {assignment.labels.shape[0]}")
    return np.concatenate([existing, assignment.labels[:, None].astype(np.int64)], axis=1)


@dataclass
class CapacityCheck:
    ok: bool
    clusters: int       # K^N, exact
    samples: int        # M
    batch_size: int     # b

    def __str__(self) -> str:
        rel = "<=" if self.ok else ">"
        return (f"K^N = {self.clusters} {rel} M/b = {self.samples / self.batch_size:g} "
                f"(M={self.samples}, b={self.batch_size})")


def validate_capacity(k: int, n: int, m: int, b: int) -> CapacityCheck:
    """Check K^N <= M/b in exact integer arithmetic (as K^N * b <= M)."""
    if min(k, n, m, b) < 1:
        raise ConfigurationError("K, N, M, b must all be positive")
    clusters = k ** n  # python ints, no overflow
    return CapacityCheck(ok=clusters * b <= m, clusters=clusters, samples=m, batch_size=b)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _expected_mi(a_counts: np.ndarray, b_counts: np.ndarray, n: int) -> float:
    """Expected mutual information under the permutation (hypergeometric) model."""
    emi = 0.0
    lg = gammaln
    for ai in a_counts:
        for bj in b_counts:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term1 = nij / n * np.log(nij * n / (ai * bj))
            log_p = (
                lg(ai + 1) + lg(bj + 1) + lg(n - ai + 1) + lg(n - bj + 1)
                - lg(n + 1) - lg(nij + 1) - lg(ai - nij + 1) - lg(bj - nij + 1)
                - lg(n - ai - bj + nij + 1)
            )
            emi += float((term1 * np.exp(log_p)).sum())
    return emi


def ami(labels_a, labels_b) -> float:
    """Adjusted mutual information between two partitions.

    Chance-corrected with the permutation-model expectation and the
    arithmetic mean of the entropies in the denominator. Degenerate
    denominators (both partitions single-cluster, or one single-cluster
    with zero adjusted numerator) return 0 by convention.
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ContractError("ami needs two equal-length label vectors, n >= 2")
    n = a.size
    _, a_ids = np.unique(a, return_inverse=True)
    _, b_ids = np.unique(b, return_inverse=True)
    ka, kb = a_ids.max() + 1, b_ids.max() + 1
    cont = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(cont, (a_ids, b_ids), 1)
    a_counts = cont.sum(axis=1)
    b_counts = cont.sum(axis=0)

    nz = cont > 0
    pij = cont[nz] / n
    outer = (a_counts[:, None] * b_counts[None, :])[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())

    emi = _expected_mi(a_counts, b_counts, n)
    h_mean = 0.5 * (_entropy(a_counts) + _entropy(b_counts))
    denom = h_mean - emi
    if abs(denom) < 1e-12:
        return 1.0 if abs(mi - emi) < 1e-12 and ka > 1 else 0.0
    return (mi - emi) / denom
