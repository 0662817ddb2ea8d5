"""Box geometry: format conversion, IoU/GIoU, delta updates, RoIAlign, FPN levels.

Boxes live in normalized image-fraction coordinates. The canonical layout is
corner form ``(x0, y0, x1, y1)`` with ``x0 <= x1`` and ``y0 <= y1``; center
form is ``(cx, cy, w, h)``. All functions accept torch tensors (or anything
``torch.as_tensor`` accepts) with a trailing dimension of 4 and are
differentiable where the math allows, so they can sit on the training path.
"""

from __future__ import annotations

import math

import torch

DELTA_CLAMP = 4.0


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        # Preserve the caller's floating dtype (the training path is float64).
        return x if x.is_floating_point() else x.double()
    return torch.as_tensor(x, dtype=torch.float64)


def box_cxcywh_to_xyxy(b) -> torch.Tensor:
    """Convert boxes from (cx, cy, w, h) to (x0, y0, x1, y1)."""
    b = _as_tensor(b)
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h,
                        cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(b) -> torch.Tensor:
    """Convert boxes from (x0, y0, x1, y1) to (cx, cy, w, h)."""
    b = _as_tensor(b)
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2,
                        x1 - x0, y1 - y0], dim=-1)


def box_convert(b, target: str) -> torch.Tensor:
    """Convert to the requested format tag, 'xyxy' or 'cxcywh'."""
    if target == "xyxy":
        return box_cxcywh_to_xyxy(b)
    if target == "cxcywh":
        return box_xyxy_to_cxcywh(b)
    raise ValueError(f"unknown box format {target!r}")


def validate_boxes(b) -> torch.Tensor:
    """Check corner boxes: finite, x0 <= x1 and y0 <= y1. Returns the tensor."""
    b = _as_tensor(b)
    if b.shape[-1] != 4:
        raise ValueError("boxes must have a trailing dimension of 4")
    if not torch.isfinite(b).all():
        raise ValueError("box coordinates must be finite")
    if (b[..., 2] < b[..., 0]).any() or (b[..., 3] < b[..., 1]).any():
        raise ValueError("corner boxes must satisfy x0 <= x1 and y0 <= y1")
    return b


def box_area(b) -> torch.Tensor:
    b = _as_tensor(b)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def pairwise_iou(a, b):
    """IoU between every box in `a` (n,4) and `b` (m,4), corner form.

    Returns (iou, union), both (n, m). Pairs where the union is zero
    (two degenerate boxes) get IoU 0.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    area_a = box_area(a)
    area_b = box_area(b)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = torch.where(union > 0, inter / union.clamp(min=torch.finfo(a.dtype).tiny),
                      torch.zeros_like(union))
    return iou, union


def pairwise_giou(a, b) -> torch.Tensor:
    """Generalized IoU matrix (n, m): iou - (enclosing - union) / enclosing.

    A degenerate enclosing box falls back to plain IoU.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    iou, union = pairwise_iou(a, b)
    lt = torch.minimum(a[:, None, :2], b[None, :, :2])
    rb = torch.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    enclose = wh[..., 0] * wh[..., 1]
    penalty = torch.where(enclose > 0,
                          (enclose - union) / enclose.clamp(min=torch.finfo(a.dtype).tiny),
                          torch.zeros_like(enclose))
    return iou - penalty


def iou(a, b) -> float:
    """Scalar IoU of one box pair in corner form."""
    a = validate_boxes(a)
    b = validate_boxes(b)
    return pairwise_iou(a.reshape(1, 4), b.reshape(1, 4))[0].item()


def giou(a, b) -> float:
    """Scalar GIoU of one box pair in corner form, in (-1, 1]."""
    a = validate_boxes(a)
    b = validate_boxes(b)
    return pairwise_giou(a.reshape(1, 4), b.reshape(1, 4)).item()


def apply_box_delta(b, delta, clamp: float = DELTA_CLAMP, clip: bool = True) -> torch.Tensor:
    """Apply (d_cx, d_cy, d_w, d_h) residuals to corner boxes.

    Center offsets are in units of box width/height, sizes are log-scale.
    Size residuals are clamped to +-`clamp` before exponentiation. With
    `clip`, the result is clipped to the unit square.
    """
    b = _as_tensor(b)
    delta = _as_tensor(delta)
    cx, cy, w, h = box_xyxy_to_cxcywh(b).unbind(-1)
    d_cx, d_cy, d_w, d_h = delta.unbind(-1)
    cx = cx + d_cx * w
    cy = cy + d_cy * h
    w = w * torch.exp(d_w.clamp(-clamp, clamp))
    h = h * torch.exp(d_h.clamp(-clamp, clamp))
    out = box_cxcywh_to_xyxy(torch.stack([cx, cy, w, h], dim=-1))
    if clip:
        out = out.clamp(0.0, 1.0)
    return out


def invert_box_delta(src, dst) -> torch.Tensor:
    """Delta such that apply_box_delta(src, delta, clip=False) == dst."""
    scx, scy, sw, sh = box_xyxy_to_cxcywh(_as_tensor(src)).unbind(-1)
    dcx, dcy, dw, dh = box_xyxy_to_cxcywh(_as_tensor(dst)).unbind(-1)
    return torch.stack([(dcx - scx) / sw, (dcy - scy) / sh,
                        torch.log(dw / sw), torch.log(dh / sh)], dim=-1)


def _bilinear_sample(fm: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample fm (C,H,W) at continuous array positions, clamped to the border.

    ys/xs share an arbitrary shape S; result is (C, *S).
    """
    _, H, W = fm.shape
    ys = ys.clamp(0.0, H - 1.0)
    xs = xs.clamp(0.0, W - 1.0)
    y0 = ys.floor().clamp(max=H - 1)
    x0 = xs.floor().clamp(max=W - 1)
    wy = ys - y0
    wx = xs - x0
    y0i = y0.long()
    x0i = x0.long()
    y1i = (y0i + 1).clamp(max=H - 1)
    x1i = (x0i + 1).clamp(max=W - 1)
    v00 = fm[:, y0i, x0i]
    v01 = fm[:, y0i, x1i]
    v10 = fm[:, y1i, x0i]
    v11 = fm[:, y1i, x1i]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bot * wy


def roi_align(fm, boxes, out_size: int, sampling_ratio: int = 2) -> torch.Tensor:
    """RoIAlign: crop each normalized corner box into a (t, t, C) patch.

    `fm` is (C, H, W); `boxes` is (n, 4) in image fractions. Each output bin
    averages sampling_ratio^2 bilinear samples placed on a regular grid
    inside the bin, with half-pixel alignment (continuous coordinate c maps
    to array position c - 0.5). Samples outside the map clamp to the border.
    Returns (n, t, t, C). Differentiable in both `fm` and `boxes`.
    """
    fm = _as_tensor(fm)
    boxes = _as_tensor(boxes)
    if out_size < 1:
        raise ValueError("output size must be >= 1")
    C, H, W = fm.shape
    t, sr = out_size, sampling_ratio
    x0 = boxes[:, 0] * W
    y0 = boxes[:, 1] * H
    bw = (boxes[:, 2] - boxes[:, 0]) * W / t
    bh = (boxes[:, 3] - boxes[:, 1]) * H / t
    # Sample offsets within a bin, in bin units.
    off = (torch.arange(sr, dtype=fm.dtype) + 0.5) / sr
    bins = torch.arange(t, dtype=fm.dtype)
    # (t, sr) fractional positions along one axis, in bin units from the box edge.
    pos = bins[:, None] + off[None, :]
    xs = x0[:, None, None] + pos[None] * bw[:, None, None]  # (n, t, sr)
    ys = y0[:, None, None] + pos[None] * bh[:, None, None]
    # Expand to the full (n, t, sr, t, sr) grid and shift to array coords.
    xs = xs[:, None, None, :, :].expand(-1, t, sr, -1, -1) - 0.5
    ys = ys[:, :, :, None, None].expand(-1, -1, -1, t, sr) - 0.5
    sampled = _bilinear_sample(fm, ys, xs)           # (C, n, t, sr, t, sr)
    patch = sampled.mean(dim=(3, 5))                 # (C, n, t, t)
    return patch.permute(1, 2, 3, 0)


def pyramid_level_for_box(box, num_levels: int, image_size: int = 800,
                          canonical_size: int = 224) -> int:
    """Assign a box to a pyramid level; 0 is the finest, num_levels-1 coarsest.

    Uses the standard floor(log2(sqrt(area_px) / canonical)) rule anchored so
    a full-image box lands on the coarsest level at the default image size.
    """
    if num_levels < 1:
        raise ValueError("need at least one pyramid level")
    if num_levels == 1:
        return 0
    b = _as_tensor(box).reshape(4)
    area = float(box_area(b))
    if area <= 0:
        return 0
    scale_px = math.sqrt(area) * image_size
    idx = (num_levels - 1) + math.floor(math.log2(scale_px / canonical_size))
    return max(0, min(num_levels - 1, idx))
