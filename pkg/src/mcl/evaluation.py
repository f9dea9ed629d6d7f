"""Representation quality metrics: linear probes, AMI diagnostics, retrieval.

The probe is a multinomial linear softmax classifier trained with
full-batch gradient descent on standardized, frozen features; only the
held-out accuracy of a stratified 80/20 split is reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ami
from .errors import EvaluationError

PROBE_EPOCHS = 500
PROBE_LR = 0.1


@dataclass
class ProbeResult:
    factor: str
    representation_id: str
    accuracy: float
    train_size: int
    test_size: int
    train_accuracy: float = 0.0


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int):
    """Per-class shuffled split; returns (train_idx, test_idx)."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.where(labels == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(len(idx) * test_fraction)))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def linear_probe(x: np.ndarray, labels: np.ndarray, split_seed: int = 0,
                 epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR,
                 factor: str = "", representation_id: str = "") -> ProbeResult:
    """Held-out accuracy of a linear softmax classifier over frozen features."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    classes = np.unique(labels)
    if len(classes) < 2:
        raise EvaluationError("linear probe needs at least 2 classes")
    y = np.searchsorted(classes, labels)
    k = len(classes)

    train_idx, test_idx = stratified_split(y, test_fraction=0.2, seed=split_seed)
    mu = x[train_idx].mean(axis=0)
    sigma = x[train_idx].std(axis=0)
    sigma[sigma < 1e-8] = 1.0
    xtr = ((x[train_idx] - mu) / sigma).astype(np.float32)
    xte = ((x[test_idx] - mu) / sigma).astype(np.float32)
    ytr, yte = y[train_idx], y[test_idx]

    n, d = xtr.shape
    w = np.zeros((d, k), dtype=np.float32)
    b = np.zeros(k, dtype=np.float32)
    onehot = np.zeros((n, k), dtype=np.float32)
    onehot[np.arange(n), ytr] = 1.0
    for _ in range(epochs):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (xtr.T @ g)
        b -= lr * g.sum(axis=0)

    train_acc = float(((xtr @ w + b).argmax(axis=1) == ytr).mean())
    test_acc = float(((xte @ w + b).argmax(axis=1) == yte).mean())
    return ProbeResult(factor=factor, representation_id=representation_id,
                       accuracy=test_acc, train_size=n, test_size=len(test_idx),
                       train_accuracy=train_acc)


def linear_probe_mean(x, labels, seeds=(0, 1, 2), **kwargs):
    """Probe repeated over split seeds; accuracy averaged."""
    results = [linear_probe(x, labels, split_seed=s, **kwargs) for s in seeds]
    mean = sum(r.accuracy for r in results) / len(results)
    first = results[0]
    return ProbeResult(factor=first.factor, representation_id=first.representation_id,
                       accuracy=mean, train_size=first.train_size,
                       test_size=first.test_size,
                       train_accuracy=sum(r.train_accuracy for r in results) / len(results)
                       ), [r.accuracy for r in results]


def stage_ami_matrix(assignments) -> np.ndarray:
    """Pairwise AMI between per-stage cluster assignments (symmetric, diag 1)."""
    n = len(assignments)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            value = ami(assignments[i].labels, assignments[j].labels)
            mat[i, j] = mat[j, i] = value
    return mat


def pseudo_label_histogram(pseudo_labels: np.ndarray) -> list[dict]:
    """Counts per unique pseudo label, largest bucket first."""
    labels = np.asarray(pseudo_labels)
    m = labels.shape[0]
    if labels.ndim != 2 or labels.shape[1] == 0:
        return [{"label": "", "count": int(m)}]
    uniq, counts = np.unique(labels, axis=0, return_counts=True)
    buckets = [{"label": ",".join(map(str, uniq[i])), "count": int(counts[i])}
               for i in range(len(uniq))]
    buckets.sort(key=lambda bkt: (-bkt["count"], bkt["label"]))
    return buckets


def topk_neighbors(x: np.ndarray, anchor: int, k: int) -> np.ndarray:
    """Indices of the k most cosine-similar rows to x[anchor], anchor excluded.

    Ties broken toward the smaller index.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    if not 0 <= anchor < m:
        raise EvaluationError(f"anchor {anchor} out of range for {m} samples")
    if k >= m:
        raise EvaluationError(f"k must be < M, got k={k}, M={m}")
    norms = np.linalg.norm(x, axis=1)
    norms[norms < 1e-12] = 1e-12
    sims = (x @ x[anchor]) / (norms * max(norms[anchor], 1e-12))
    sims[anchor] = -np.inf
    order = np.lexsort((np.arange(m), -sims))
    return order[:k]
