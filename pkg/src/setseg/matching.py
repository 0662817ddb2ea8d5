"""Bipartite matching between ground truth and predicted instance sets.

Builds the n x k composite cost matrix (box L1 + GIoU, negative class
probability, negative cosine similarity of mask embeddings) and solves the
optimal rectangular assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import codec as codec_mod
from . import geometry


@dataclass(frozen=True)
class CostWeights:
    l1: float = 5.0
    giou: float = 2.0
    cls: float = 2.0
    mask: float = 2.0

    def __post_init__(self):
        if min(self.l1, self.giou, self.cls, self.mask) < 0:
            raise ValueError("cost weights must be nonnegative")


@dataclass
class GroundTruthSet:
    boxes: np.ndarray      # (n, 4) normalized corner boxes
    classes: np.ndarray    # (n,) category indices in [0, C)
    masks: np.ndarray      # (n, s, s) binary masks

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if not (len(self.boxes) == len(self.classes) == len(self.masks)):
            raise ValueError("ground truth fields must have equal lengths")

    @property
    def count(self) -> int:
        return len(self.boxes)


@dataclass
class PredictionSet:
    boxes: np.ndarray        # (k, 4) normalized corner boxes
    probs: np.ndarray        # (k, C+1) class distributions, last slot = background
    embeddings: np.ndarray   # (k, l) mask embeddings

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        k = len(self.boxes)
        if k < 1:
            raise ValueError("prediction set must contain at least one prediction")
        if len(self.probs) != k or len(self.embeddings) != k:
            raise ValueError("prediction fields must have equal lengths")
        if (self.probs < -1e-9).any() or np.abs(self.probs.sum(axis=1) - 1).max() > 1e-6:
            raise ValueError("class distributions must be nonnegative and sum to 1")

    @property
    def count(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class Assignment:
    """Injection of ground-truth rows into prediction columns."""
    indices: np.ndarray   # (n,) distinct prediction indices
    total_cost: float

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("assignment indices must be pairwise distinct")
        object.__setattr__(self, "indices", idx)


def class_cost(class_idx: int, probs, w: CostWeights) -> float:
    """-lambda_cls * p(class); in [-lambda_cls, 0]."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= class_idx < len(probs):
        raise ValueError("class index out of range")
    return float(-w.cls * probs[class_idx])


def box_cost(gt_box, pred_box, w: CostWeights) -> float:
    """lambda_L1 * sum |delta center-form coords| + lambda_giou * (1 - giou)."""
    a = geometry.box_xyxy_to_cxcywh(np.asarray(gt_box, dtype=np.float64))
    b = geometry.box_xyxy_to_cxcywh(np.asarray(pred_box, dtype=np.float64))
    l1 = (a - b).abs().sum().item()
    return w.l1 * l1 + w.giou * (1.0 - geometry.giou(gt_box, pred_box))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0  # degenerate embedding: neutral similarity
    return float(np.dot(a, b) / (na * nb))


def mask_cost(mask, embedding, codec: codec_mod.MaskCodec, w: CostWeights) -> float:
    """-0.5 * lambda_mask * (cos(r, g(m)) + 1); in [-lambda_mask, 0]."""
    r_gt = codec_mod.encode(codec, mask)
    r = np.asarray(embedding, dtype=np.float64)
    return -0.5 * w.mask * (_cosine(r, r_gt) + 1.0)


def build_cost_matrix(gt: GroundTruthSet, pred: PredictionSet,
                      codec: codec_mod.MaskCodec, w: CostWeights) -> np.ndarray:
    """Composite (n, k) cost matrix; cell (i, j) sums box, class, mask costs."""
    n, k = gt.count, pred.count
    if k < n:
        raise ValueError(f"more ground truths ({n}) than predictions ({k})")
    if n == 0:
        return np.zeros((0, k), dtype=np.float64)

    gt_c = geometry.box_xyxy_to_cxcywh(gt.boxes).numpy()
    pr_c = geometry.box_xyxy_to_cxcywh(pred.boxes).numpy()
    l1 = np.abs(gt_c[:, None, :] - pr_c[None, :, :]).sum(axis=2)
    giou = geometry.pairwise_giou(gt.boxes, pred.boxes).numpy()
    box = w.l1 * l1 + w.giou * (1.0 - giou)

    cls = -w.cls * pred.probs[:, gt.classes].T  # (n, k)

    r_gt = codec_mod.encode(codec, gt.masks)                 # (n, l)
    norm_gt = np.linalg.norm(r_gt, axis=1, keepdims=True)
    norm_pr = np.linalg.norm(pred.embeddings, axis=1, keepdims=True)
    safe_gt = np.where(norm_gt > 0, r_gt / np.where(norm_gt > 0, norm_gt, 1), 0)
    safe_pr = np.where(norm_pr > 0, pred.embeddings / np.where(norm_pr > 0, norm_pr, 1), 0)
    cos = safe_gt @ safe_pr.T
    mask = -0.5 * w.mask * (cos + 1.0)

    out = box + cls + mask
    if not np.isfinite(out).all():
        raise ValueError("cost matrix contains non-finite entries")
    return out


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injection of rows into columns (n <= k), exact.

    Shortest-augmenting-path formulation of the Kuhn-Munkres algorithm,
    O(n^2 k); ties break toward the lowest column index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, k = cost.shape
    if n == 0:
        return Assignment(indices=np.zeros(0, dtype=np.int64), total_cost=0.0)
    if n > k:
        raise ValueError("cost matrix must have n <= k")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN entries")

    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(k + 1)
    col_row = np.zeros(k + 1, dtype=np.int64)   # row matched to column (1-based)
    way = np.zeros(k + 1, dtype=np.int64)
    for i in range(1, n + 1):
        col_row[0] = i
        j0 = 0
        minv = np.full(k + 1, INF)
        used = np.zeros(k + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            delta = INF
            j1 = -1
            for j in range(1, k + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(k + 1):
                if used[j]:
                    u[col_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1

    indices = np.zeros(n, dtype=np.int64)
    for j in range(1, k + 1):
        if col_row[j] > 0:
            indices[col_row[j] - 1] = j - 1
    total = float(cost[np.arange(n), indices].sum())
    return Assignment(indices=indices, total_cost=total)


def match(gt: GroundTruthSet, pred: PredictionSet,
          codec: codec_mod.MaskCodec, w: CostWeights | None = None) -> Assignment:
    """Optimal assignment of ground truths to predictions under the composite cost."""
    w = w or CostWeights()
    return hungarian(build_cost_matrix(gt, pred, codec, w))
