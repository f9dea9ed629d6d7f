"""Contrastive objectives: cosine similarity, masked InfoNCE, negative masks.

The masked loss restricts each anchor's denominator to negatives whose
pseudo label matches the anchor's. An all-true off-diagonal mask recovers
the plain InfoNCE loss. All functions are pure and operate on torch
tensors so they can sit inside the autograd graph during training.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ContractError

_NORM_EPS = 0.0  # zero rows are a contract violation, not something to mask


def cosine_similarity(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity between rows of z1 (n x d) and z2 (m x d)."""
    if z1.ndim != 2 or z2.ndim != 2 or z1.shape[1] != z2.shape[1]:
        raise ContractError(f"bad shapes for cosine similarity: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    n1 = torch.linalg.norm(z1, dim=1, keepdim=True)
    n2 = torch.linalg.norm(z2, dim=1, keepdim=True)
    if not bool(torch.all(n1 > 0)) or not bool(torch.all(n2 > 0)):
        raise ContractError("zero-norm row in cosine similarity input")
    sims = (z1 / n1) @ (z2 / n2).T
    return sims.clamp(-1.0, 1.0)


def build_mask(pseudo_labels) -> torch.Tensor:
    """Negative-eligibility mask from per-sample pseudo labels.

    pseudo_labels: (n, j) integer array; j may be 0 (stage 0), in which
    case every off-diagonal sample is an allowed negative. allowed[i, k]
    is True iff sample k has the same pseudo label as anchor i and k != i.
    """
    try:
        labels = np.asarray(pseudo_labels)
    except ValueError as exc:
        raise ContractError("ragged pseudo-label lengths in batch") from exc
    if labels.ndim == 1:
        raise ContractError("ragged pseudo-label lengths in batch")
    n = labels.shape[0]
    if labels.shape[1] == 0:
        allowed = np.ones((n, n), dtype=bool)
    else:
        allowed = (labels[:, None, :] == labels[None, :, :]).all(axis=2)
    np.fill_diagonal(allowed, False)
    return torch.from_numpy(allowed)


def info_nce(z: torch.Tensor, z_pos: torch.Tensor, mask: torch.Tensor,
             temperature: float) -> torch.Tensor:
    """Masked InfoNCE loss, mean over anchors.

    Row i of z_pos is the positive for row i of z; the allowed negatives
    for anchor i are the rows z_pos[k] with mask[i, k] True. An anchor
    with no allowed negatives contributes exactly zero. Computed with a
    masked log-sum-exp for stability.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if z.shape != z_pos.shape:
        raise ContractError("anchors and positives must be row-aligned")
    if not torch.isfinite(z).all() or not torch.isfinite(z_pos).all():
        raise ContractError("non-finite values in embeddings")
    n = z.shape[0]
    if mask.shape != (n, n):
        raise ContractError(f"mask must be {n}x{n}, got {tuple(mask.shape)}")

    sims = cosine_similarity(z, z_pos) / temperature
    pos = sims.diagonal()
    # the positive term always participates in the denominator
    keep = mask.to(torch.bool) | torch.eye(n, dtype=torch.bool, device=sims.device)
    denom = torch.where(keep, sims, sims.new_full((), float("-inf")))
    loss = torch.logsumexp(denom, dim=1) - pos
    return loss.mean()


def symmetric_info_nce(z1: torch.Tensor, z2: torch.Tensor, mask: torch.Tensor,
                       temperature: float) -> torch.Tensor:
    """InfoNCE averaged over both anchor/positive role assignments."""
    return 0.5 * (info_nce(z1, z2, mask, temperature)
                  + info_nce(z2, z1, mask, temperature))
