"""Batch planning: feature-aware group sampler and the plain stage-0 sampler.

The feature-aware plan groups the dataset by pseudo label and walks the
groups round-robin (group index = batch index mod group count, skipping
exhausted groups), so every emitted batch is homogeneous in pseudo label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SamplingError


@dataclass
class BatchPlan:
    epoch: int
    batches: list[np.ndarray]            # each an array of sample indices
    group_of_batch: list[int]            # group id per batch (-1 for uniform plans)
    merged_groups: dict[int, int] = field(default_factory=dict)  # source -> target

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)

    def to_jsonable(self) -> dict:
        return {
            "epoch": self.epoch,
            "batches": [b.tolist() for b in self.batches],
            "group_of_batch": list(self.group_of_batch),
            "merged_groups": {str(k): v for k, v in self.merged_groups.items()},
        }


def plan_epoch_uniform(m: int, b: int, seed: int, drop_last: bool = True,
                       epoch: int = 0) -> BatchPlan:
    """Uniformly shuffled batches over all M indices (stage-0 sampler)."""
    if b < 2:
        raise ContractError(f"batch size must be >= 2, got {b}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    batches, groups = [], []
    for start in range(0, m, b):
        chunk = order[start:start + b]
        if drop_last and len(chunk) < b:
            break
        batches.append(chunk)
        groups.append(-1)
    return BatchPlan(epoch=epoch, batches=batches, group_of_batch=groups)


def plan_epoch(pseudo_labels: np.ndarray, b: int, seed: int, drop_last: bool = True,
               epoch: int = 0, embeddings: np.ndarray | None = None) -> BatchPlan:
    """Group samples by pseudo label and emit homogeneous batches round-robin.

    Groups are indexed by sorted unique pseudo label. Within-group order
    is shuffled per (seed, epoch). Groups with a single member cannot host
    a contrastive batch; they are merged into the nearest group by mean
    embedding when embeddings are given, else into the largest group.
    """
    labels = np.asarray(pseudo_labels)
    if labels.ndim != 2 or labels.shape[1] == 0:
        raise ContractError("plan_epoch needs non-empty pseudo labels; "
                            "use plan_epoch_uniform at stage 0")
    if b < 2:
        raise ContractError(f"batch size must be >= 2, got {b}")
    m = labels.shape[0]

    uniq, group_ids = np.unique(labels, axis=0, return_inverse=True)
    n_groups = uniq.shape[0]
    members = [np.where(group_ids == g)[0] for g in range(n_groups)]
    sizes = np.array([len(mm) for mm in members])
    if sizes.max() < 2:
        raise SamplingError("every pseudo-label group has fewer than 2 members")

    merged: dict[int, int] = {}
    for g in range(n_groups):
        if sizes[g] >= 2 or sizes[g] == 0:
            continue
        candidates = [t for t in range(n_groups) if t != g and sizes[t] >= 2]
        if embeddings is not None:
            means = {t: embeddings[members[t]].mean(axis=0) for t in candidates}
            own = embeddings[members[g]].mean(axis=0)
            target = min(candidates, key=lambda t: float(((means[t] - own) ** 2).sum()))
        else:
            target = max(candidates, key=lambda t: sizes[t])
        members[target] = np.concatenate([members[target], members[g]])
        members[g] = np.empty(0, dtype=np.int64)
        merged[g] = target
    sizes = np.array([len(mm) for mm in members])

    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    shuffled = [mm[rng.permutation(len(mm))] if len(mm) else mm for mm in members]

    cursors = [0] * n_groups
    done = [len(shuffled[g]) == 0 for g in range(n_groups)]
    batches, group_of_batch = [], []
    j = 0
    while not all(done):
        k = j % n_groups
        j += 1
        if done[k]:
            continue
        remaining = len(shuffled[k]) - cursors[k]
        take = min(b, remaining)
        if take == remaining:
            done[k] = True
        if take < b and drop_last:
            continue
        batches.append(shuffled[k][cursors[k]:cursors[k] + take])
        group_of_batch.append(k)
        cursors[k] += take
    return BatchPlan(epoch=epoch, batches=batches, group_of_batch=group_of_batch,
                     merged_groups=merged)
