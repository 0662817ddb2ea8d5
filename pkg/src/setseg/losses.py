"""Set prediction loss: focal classification, box L1 + GIoU, embedding L2,
and dice on decoded masks, averaged over matched pairs, plus background
supervision of unmatched predictions. All functions are torch-differentiable;
`grad_check` provides the central finite-difference oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import geometry
from .codec import MaskCodec
from .matching import Assignment, CostWeights, GroundTruthSet, PredictionSet

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
DICE_EPS = 1.0
PROB_FLOOR = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass
class LossBreakdown:
    """Components of the set loss. `total` is the weighted sum; the box/cls/
    mask fields are unweighted per-pair averages (cls includes the background
    term for unmatched predictions, normalized separately over k - n)."""
    total: torch.Tensor
    box_l1: torch.Tensor
    box_giou: torch.Tensor
    cls: torch.Tensor
    mask_l2: torch.Tensor
    mask_dice: torch.Tensor
    matched: int

    def to_dict(self) -> dict:
        return {
            "total": float(self.total),
            "box_l1": float(self.box_l1),
            "box_giou": float(self.box_giou),
            "cls": float(self.cls),
            "mask_l2": float(self.mask_l2),
            "mask_dice": float(self.mask_dice),
            "matched": self.matched,
        }


def focal_loss(probs, target: int, alpha: float = FOCAL_ALPHA,
               gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """-alpha * (1 - p_t)^gamma * log(p_t) on an explicit distribution."""
    probs = _as_tensor(probs)
    if not 0 <= target < probs.shape[-1]:
        raise ValueError("target class index out of range")
    p_t = probs[..., target].clamp(min=PROB_FLOOR)
    return -alpha * (1 - p_t) ** gamma * torch.log(p_t)


def dice_loss(pred, gt, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2 * sum(pred * gt) + eps) / (sum(pred) + sum(gt) + eps)."""
    pred = _as_tensor(pred)
    gt = _as_tensor(gt)
    inter = (pred * gt).sum()
    return 1 - (2 * inter + eps) / (pred.sum() + gt.sum() + eps)


def l2_embedding_loss(a, b) -> torch.Tensor:
    """Squared L2 distance between two embedding vectors."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError("embedding dimension mismatch")
    return ((a - b) ** 2).sum()


def decode_soft(embedding: torch.Tensor, basis: torch.Tensor,
                mean: torch.Tensor | None, clamp: bool = True) -> torch.Tensor:
    """Differentiable mask decode: clamp(D r + mu, 0, 1), reshaped square."""
    side = int(round(basis.shape[0] ** 0.5))
    m = basis @ embedding
    if mean is not None:
        m = m + mean
    if clamp:
        m = m.clamp(0.0, 1.0)
    return m.reshape(side, side)


def codec_tensors(codec: MaskCodec, dtype=torch.float64):
    """Codec basis and mean as constant torch tensors for the loss path."""
    basis = torch.as_tensor(codec.basis, dtype=dtype)
    mean = None if codec.mean is None else torch.as_tensor(codec.mean, dtype=dtype)
    return basis, mean


def mask_loss(gt_mask, embedding, codec: MaskCodec,
              lam_mask: float = 2.0) -> torch.Tensor:
    """lambda_mask * (L2(g(m), r) + dice(m, f(r)))."""
    basis, mean = codec_tensors(codec)
    emb = torch.as_tensor(embedding, dtype=basis.dtype)
    m = torch.as_tensor(np.asarray(gt_mask, dtype=np.float64))
    target = basis.T @ (m.reshape(-1) - (mean if mean is not None else 0))
    l2 = l2_embedding_loss(emb, target)
    dice = dice_loss(decode_soft(emb, basis, mean), m)
    return lam_mask * (l2 + dice)


def set_loss_tensors(gt_boxes: torch.Tensor, gt_classes: torch.Tensor,
                     gt_masks: torch.Tensor, pred_boxes: torch.Tensor,
                     pred_probs: torch.Tensor, pred_embeddings: torch.Tensor,
                     indices, basis: torch.Tensor, mean: torch.Tensor | None,
                     w: CostWeights, alpha: float = FOCAL_ALPHA,
                     gamma: float = FOCAL_GAMMA) -> LossBreakdown:
    """Set loss on torch tensors (differentiable wrt the prediction tensors).

    Matched pairs contribute box L1 + GIoU, focal classification, embedding
    L2, and dice on the decoded mask, averaged over the n pairs. Every
    unmatched prediction is pushed toward the background class (last slot)
    with focal loss, averaged over k - n and weighted by lambda_cls.
    """
    k = pred_boxes.shape[0]
    n = gt_boxes.shape[0]
    idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
    if n and (idx.min() < 0 or idx.max() >= k):
        raise IndexError("assignment index out of range")
    dtype = pred_boxes.dtype
    zero = torch.zeros((), dtype=dtype)
    bg = pred_probs.shape[-1] - 1

    box_l1 = box_giou = cls = mask_l2 = mask_dice = zero
    if n > 0:
        pb = pred_boxes[idx]
        gt_c = geometry.box_xyxy_to_cxcywh(gt_boxes)
        pr_c = geometry.box_xyxy_to_cxcywh(pb)
        box_l1 = (gt_c - pr_c).abs().sum(dim=1).mean()
        giou = geometry.pairwise_giou(gt_boxes, pb).diagonal()
        box_giou = (1 - giou).mean()

        p_t = pred_probs[idx, gt_classes].clamp(min=PROB_FLOOR)
        cls = (-alpha * (1 - p_t) ** gamma * torch.log(p_t)).mean()

        flat = gt_masks.reshape(n, -1)
        target = (flat - (mean if mean is not None else 0)) @ basis
        emb = pred_embeddings[idx]
        mask_l2 = ((emb - target) ** 2).sum(dim=1).mean()

        decoded = emb @ basis.T
        if mean is not None:
            decoded = decoded + mean
        decoded = decoded.clamp(0.0, 1.0)
        inter = (decoded * flat).sum(dim=1)
        dice = 1 - (2 * inter + DICE_EPS) / (decoded.sum(dim=1) + flat.sum(dim=1) + DICE_EPS)
        mask_dice = dice.mean()

    if k > n:
        unmatched = torch.ones(k, dtype=torch.bool)
        if n:
            unmatched[idx] = False
        p_bg = pred_probs[unmatched, bg].clamp(min=PROB_FLOOR)
        cls = cls + (-alpha * (1 - p_bg) ** gamma * torch.log(p_bg)).mean()

    total = (w.l1 * box_l1 + w.giou * box_giou + w.cls * cls
             + w.mask * (mask_l2 + mask_dice))
    return LossBreakdown(total=total, box_l1=box_l1, box_giou=box_giou,
                         cls=cls, mask_l2=mask_l2, mask_dice=mask_dice,
                         matched=int(n))


def set_loss(gt: GroundTruthSet, pred: PredictionSet, assignment: Assignment,
             codec: MaskCodec, w: CostWeights | None = None,
             alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> LossBreakdown:
    """Set loss on plain prediction/ground-truth sets (no gradients needed)."""
    w = w or CostWeights()
    basis, mean = codec_tensors(codec)
    to = lambda x: torch.as_tensor(np.asarray(x, dtype=np.float64))
    return set_loss_tensors(
        to(gt.boxes), torch.as_tensor(gt.classes), to(gt.masks),
        to(pred.boxes), to(pred.probs), to(pred.embeddings),
        assignment.indices, basis, mean, w, alpha, gamma)


def grad_check(fn, params: list[torch.Tensor], h: float = 1e-4,
               n_directions: int = 3, rng: np.random.Generator | None = None) -> float:
    """Compare autograd against central finite differences along random
    directions; returns the max relative error over directions.

    `fn` maps a list of leaf tensors to a scalar. The relative error uses a
    floored denominator so near-zero derivatives do not amplify roundoff.
    """
    rng = rng or np.random.default_rng(0)
    leaves = [p.detach().clone().double().requires_grad_(True) for p in params]
    loss = fn(leaves)
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]

    worst = 0.0
    for _ in range(n_directions):
        vs = [torch.as_tensor(rng.standard_normal(p.shape)) for p in leaves]
        norm = torch.sqrt(sum((v ** 2).sum() for v in vs))
        vs = [v / norm for v in vs]
        analytic = float(sum((g * v).sum() for g, v in zip(grads, vs)))

        def eval_at(sign):
            shifted = [(p.detach() + sign * h * v) for p, v in zip(leaves, vs)]
            with torch.no_grad():
                return float(fn(shifted))

        fd = (eval_at(+1.0) - eval_at(-1.0)) / (2 * h)
        denom = max(abs(analytic), abs(fd), 1e-3)
        worst = max(worst, abs(analytic - fd) / denom)
    return worst
