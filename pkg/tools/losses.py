# tools/losses.py
"""
Training objectives: pixelwise focal loss for the segmentation head and a
normalized-temperature cross-entropy contrastive loss for the classifier arm.

All functions take torch tensors and return differentiable scalars; numpy
arrays and ``ProbabilityMap`` objects are accepted for convenience.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from core.domain import ProbabilityMap
from core.errors import ShapeMismatchError, TrainingError, ZeroVectorError

logger = logging.getLogger(__name__)

EPS = 1e-7
ZERO_NORM = 1e-12

TensorLike = Union[torch.Tensor, np.ndarray, ProbabilityMap, Sequence[float]]


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0
    # weight of background pixels; None means the usual 1 - alpha
    alpha_background: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.alpha_background is not None and self.alpha_background < 0:
            raise ValueError(f"alpha_background must be >= 0, got {self.alpha_background}")

    @property
    def background_weight(self) -> float:
        return 1.0 - self.alpha if self.alpha_background is None else self.alpha_background

    @classmethod
    def cross_entropy(cls) -> 'FocalParams':
        """alpha_t = 1 and gamma = 0: plain binary cross-entropy."""
        return cls(alpha=1.0, gamma=0.0, alpha_background=1.0)


@dataclass(frozen=True)
class ContrastiveParams:
    tau: float = 0.5
    lambda_weight: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lambda_weight < 0:
            raise ValueError(f"lambda_weight must be >= 0, got {self.lambda_weight}")


def _as_tensor(value: TensorLike, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(value, ProbabilityMap):
        value = value.values
    if isinstance(value, torch.Tensor):
        return value
    dtype = like.dtype if like is not None else torch.float64
    device = like.device if like is not None else None
    return torch.as_tensor(np.asarray(value), dtype=dtype, device=device)


def focal_loss(prob_map: TensorLike, target: TensorLike, fp: FocalParams = FocalParams(),
               valid_mask: Optional[TensorLike] = None) -> torch.Tensor:
    """
    Mean over pixels of ``-alpha_t * (1 - p_t)**gamma * log(p_t)``.

    ``p_t`` is ``p`` on fiber pixels and ``1 - p`` on background; probabilities
    are clamped to ``[EPS, 1 - EPS]``. With ``valid_mask`` the mean runs over
    the masked pixels only (zero when nothing is valid).
    """
    probs = _as_tensor(prob_map)
    target = _as_tensor(target, like=probs).to(probs.dtype)
    if probs.shape != target.shape:
        raise ShapeMismatchError(f"probabilities {tuple(probs.shape)} vs target {tuple(target.shape)}")

    p = probs.clamp(EPS, 1.0 - EPS)
    positive = target > 0.5
    p_t = torch.where(positive, p, 1.0 - p)
    alpha_t = torch.where(
        positive,
        torch.full_like(p, fp.alpha),
        torch.full_like(p, fp.background_weight),
    )
    loss = -alpha_t * (1.0 - p_t) ** fp.gamma * torch.log(p_t)

    if valid_mask is None:
        return loss.mean()
    valid = _as_tensor(valid_mask, like=probs).to(torch.bool)
    if valid.shape != loss.shape:
        raise ShapeMismatchError(f"valid mask {tuple(valid.shape)} vs target {tuple(loss.shape)}")
    count = valid.sum()
    if count == 0:
        return (loss * 0.0).sum()
    return loss[valid].sum() / count


def cosine_similarity(x: TensorLike, y: TensorLike) -> torch.Tensor:
    """x^T y / (|x| |y|); raises ZeroVectorError for zero-norm inputs."""
    x = _as_tensor(x)
    y = _as_tensor(y, like=x).to(x.dtype)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatchError(f"cosine similarity needs equal 1-D vectors, got {tuple(x.shape)} and {tuple(y.shape)}")
    nx, ny = torch.linalg.vector_norm(x), torch.linalg.vector_norm(y)
    if nx <= ZERO_NORM or ny <= ZERO_NORM:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    return ((x @ y) / (nx * ny)).clamp(-1.0, 1.0)


def default_pairing(n_views: int) -> Tuple[Tuple[int, int], ...]:
    """Views i and i + N form the positive pairs of a 2N batch."""
    half = n_views // 2
    return tuple((i, i + half) for i in range(half))


def _partner_index(pairing: Sequence[Tuple[int, int]], n_views: int) -> torch.Tensor:
    partner = [-1] * n_views
    for a, b in pairing:
        a, b = int(a), int(b)
        if a == b or not (0 <= a < n_views and 0 <= b < n_views):
            raise ValueError(f"invalid positive pair ({a}, {b}) for {n_views} embeddings")
        if partner[a] != -1 or partner[b] != -1:
            raise ValueError(f"embedding appears in more than one positive pair: ({a}, {b})")
        partner[a], partner[b] = b, a
    unpaired = [i for i, p in enumerate(partner) if p == -1]
    if unpaired:
        raise ValueError(f"unpaired embeddings: {unpaired}")
    return torch.tensor(partner, dtype=torch.long)


def contrastive_loss(embeddings: TensorLike,
                     pairing: Optional[Sequence[Tuple[int, int]]] = None,
                     cp: ContrastiveParams = ContrastiveParams()) -> torch.Tensor:
    """
    Mean over all 2N anchors of
    ``-log(exp(sim(i, j) / tau) / sum_{k != i} exp(sim(i, k) / tau))``
    where ``j`` is the anchor's positive partner.
    """
    z = _as_tensor(embeddings)
    if z.ndim != 2:
        raise ShapeMismatchError(f"embeddings must be (2N, D), got {tuple(z.shape)}")
    n_views = z.shape[0]
    if n_views < 4 or n_views % 2:
        raise ValueError(f"contrastive loss needs an even number >= 4 of embeddings, got {n_views}")

    norms = torch.linalg.vector_norm(z, dim=1)
    if bool((norms <= ZERO_NORM).any()):
        raise ZeroVectorError("contrastive loss received a zero embedding")

    partner = _partner_index(pairing if pairing is not None else default_pairing(n_views), n_views)
    partner = partner.to(z.device)

    unit = z / norms[:, None]
    logits = (unit @ unit.T).clamp(-1.0, 1.0) / cp.tau
    self_mask = torch.eye(n_views, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float('-inf'))
    return F.cross_entropy(logits, partner)


def combined_loss(seg_term: torch.Tensor, contrastive_term: torch.Tensor,
                  cp: ContrastiveParams = ContrastiveParams()) -> torch.Tensor:
    """seg_term + lambda * contrastive_term."""
    for name, term in (('segmentation', seg_term), ('contrastive', contrastive_term)):
        value = float(term.detach()) if isinstance(term, torch.Tensor) else float(term)
        if not math.isfinite(value):
            raise TrainingError(f"{name} loss is not finite: {value}")
    if cp.lambda_weight == 0:
        return seg_term
    return seg_term + cp.lambda_weight * contrastive_term
