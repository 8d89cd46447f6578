"""Similarities between paired real/synthetic feature vectors.

``mse_similarity`` and ``cosine_similarity`` return similarities (higher is
more alike); the alignment loss is ``-weight * similarity``.
``contrastive_loss`` is already a loss (a symmetrised in-batch softmax
cross-entropy without temperature) and is weighted directly.
"""

from dataclasses import dataclass

import torch

from .errors import BatchTooSmall, ShapeMismatch

DEFAULT_WEIGHTS = {"mse": 1e-3, "cosine": 1e-3, "contrastive": 1e-2}


@dataclass
class AlignConfig:
    kind: str = "contrastive"
    weight: float = None
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in DEFAULT_WEIGHTS:
            raise ValueError(f"kind must be one of {sorted(DEFAULT_WEIGHTS)}")
        if self.weight is None:
            self.weight = DEFAULT_WEIGHTS[self.kind]
        if self.weight < 0 or self.eps <= 0:
            raise ValueError("weight must be >= 0 and eps > 0")


def _check(phi_x, phi_s):
    if phi_x.shape != phi_s.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(phi_x.shape)} vs {tuple(phi_s.shape)}")


def mse_similarity(phi_x, phi_s):
    """Negative squared Euclidean distance along the last axis."""
    _check(phi_x, phi_s)
    return -((phi_x - phi_s) ** 2).sum(-1)


def cosine_similarity(phi_x, phi_s, eps=1e-8):
    _check(phi_x, phi_s)
    denom = torch.clamp(phi_x.norm(dim=-1) * phi_s.norm(dim=-1), min=eps)
    return (phi_x * phi_s).sum(-1) / denom


def _one_direction(anchor, candidates):
    # row i: -log softmax_j(anchor_i . candidate_j) evaluated at j = i
    logits = anchor @ candidates.T
    return -(torch.diagonal(logits) - torch.logsumexp(logits, dim=1))


def contrastive_loss(phi_x, phi_s):
    """Mean over pairs of the real->synthetic plus synthetic->real terms.

    Features are L2-normalised first. ``phi_x``/``phi_s`` are (B, D) with
    row i of each forming a positive pair; every other row is a negative.
    """
    _check(phi_x, phi_s)
    if phi_x.dim() != 2 or phi_x.shape[0] < 2:
        raise BatchTooSmall("contrastive loss needs a (B, D) batch with B >= 2")
    x = phi_x / phi_x.norm(dim=1, keepdim=True)
    s = phi_s / phi_s.norm(dim=1, keepdim=True)
    return (_one_direction(x, s) + _one_direction(s, x)).mean()


def align_loss(phi_x, phi_s, cfg):
    if cfg.kind == "mse":
        return -cfg.weight * mse_similarity(phi_x, phi_s).mean()
    if cfg.kind == "cosine":
        return -cfg.weight * cosine_similarity(phi_x, phi_s, cfg.eps).mean()
    return cfg.weight * contrastive_loss(phi_x, phi_s)
