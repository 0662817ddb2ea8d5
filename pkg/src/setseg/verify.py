"""Finite-difference verification suite for every loss-bearing path.

Each scope builds seeded random smooth evaluation points (kept away from
clamp/abs kinks) and compares autograd directional derivatives against
central differences via `losses.grad_check`.
"""

from __future__ import annotations

import numpy as np
import torch

from . import geometry, losses
from .attention import DynamicAttention, EncoderBlock
from .codec import MaskCodec, fit
from .matching import CostWeights
from .refine import MLP

TOLERANCE = 1e-4


def _soft_codec(rng: np.random.Generator, side: int = 8, dim: int = 6) -> MaskCodec:
    masks = rng.uniform(0.25, 0.75, (30, side, side))
    return fit(masks, dim=dim, center=True)


def _interior_embedding(rng, codec: MaskCodec) -> np.ndarray:
    # Small embeddings keep the decoded mask strictly inside (0, 1), so the
    # decode clamp stays inactive and the dice path is smooth.
    for scale in (0.05, 0.02, 0.005):
        r = scale * rng.standard_normal(codec.dim)
        decoded = codec.basis @ r + codec.mean
        if decoded.min() > 0.02 and decoded.max() < 0.98:
            return r
    raise RuntimeError("could not find an interior embedding")


def _separated_boxes(rng, n: int = 1) -> np.ndarray:
    cx = rng.uniform(0.3, 0.7, n)
    cy = rng.uniform(0.3, 0.7, n)
    w = rng.uniform(0.15, 0.3, n)
    h = rng.uniform(0.15, 0.3, n)
    return geometry.box_cxcywh_to_xyxy(np.stack([cx, cy, w, h], axis=1)).numpy()


def _maybe_corrupt(fn, corrupt: bool):
    if not corrupt:
        return fn
    # Negative control: scaling the output only in the grad path breaks the
    # analytic/finite-difference agreement.
    def bad(params):
        out = fn(params)
        return out + 0.5 * (out - out.detach())
    return bad


def check_focal(seed: int, corrupt: bool = False) -> float:
    rng = np.random.default_rng(seed)
    logits = torch.as_tensor(rng.standard_normal(5))
    target = int(rng.integers(5))

    def fn(params):
        probs = torch.softmax(params[0], dim=-1)
        return losses.focal_loss(probs, target)

    return losses.grad_check(_maybe_corrupt(fn, corrupt), [logits], rng=rng)


def check_dice(seed: int, corrupt: bool = False) -> float:
    rng = np.random.default_rng(seed)
    pred = torch.as_tensor(rng.uniform(0.1, 0.9, (8, 8)))
    gt = torch.as_tensor((rng.uniform(0, 1, (8, 8)) > 0.5).astype(np.float64))

    def fn(params):
        return losses.dice_loss(params[0], gt)

    return losses.grad_check(_maybe_corrupt(fn, corrupt), [pred], rng=rng)


def check_l2(seed: int, corrupt: bool = False) -> float:
    rng = np.random.default_rng(seed)
    a = torch.as_tensor(rng.standard_normal(12))
    b = torch.as_tensor(rng.standard_normal(12))

    def fn(params):
        return losses.l2_embedding_loss(params[0], b)

    return losses.grad_check(_maybe_corrupt(fn, corrupt), [a], rng=rng)


def check_box(seed: int, corrupt: bool = False) -> float:
    """L1 + GIoU box loss wrt the predicted box, away from abs kinks."""
    rng = np.random.default_rng(seed)
    gt = torch.as_tensor(_separated_boxes(rng))
    pred = torch.as_tensor(_separated_boxes(rng))
    # Keep each center-form coordinate at least 0.01 from its target so the
    # finite-difference step never crosses the |.| kink.
    gt_c = geometry.box_xyxy_to_cxcywh(gt)
    pr_c = geometry.box_xyxy_to_cxcywh(pred)
    close = (gt_c - pr_c).abs() < 0.01
    pr_c = torch.where(close, pr_c + 0.02, pr_c)
    pred = geometry.box_cxcywh_to_xyxy(pr_c)
    w = CostWeights()

    def fn(params):
        b = params[0]
        l1 = (geometry.box_xyxy_to_cxcywh(b) - gt_c).abs().sum()
        g = geometry.pairwise_giou(gt, b)[0, 0]
        return w.l1 * l1 + w.giou * (1 - g)

    return losses.grad_check(_maybe_corrupt(fn, corrupt), [pred], rng=rng)


def check_encoder(seed: int, corrupt: bool = False) -> float:
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    d, t, k = 8, 3, 3
    block = EncoderBlock(d, t)
    p = torch.as_tensor(rng.standard_normal((k, d)))
    e = torch.as_tensor(0.1 * rng.standard_normal((k, d)))
    u = torch.as_tensor(rng.standard_normal((k, t * t, d)))
    probe = torch.as_tensor(rng.standard_normal((k, d)))
    names = [n for n, _ in block.named_parameters()]
    base = [p0 for _, p0 in block.named_parameters()]

    def fn(leaves):
        out = torch.func.functional_call(block, dict(zip(names, leaves)), (p, e, u))
        return (out * probe).sum()

    # Softmax/layer-norm stacks have enough curvature that h=1e-4 leaves
    # visible O(h^2) truncation error; h=1e-5 is still far above roundoff.
    return losses.grad_check(_maybe_corrupt(fn, corrupt), base, h=1e-5, rng=rng)


def check_dynamic(seed: int, corrupt: bool = False) -> float:
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    d, t, k = 8, 2, 2
    dyn = DynamicAttention(d, t)
    u = torch.as_tensor(rng.standard_normal((k, t * t, d)))
    z = torch.as_tensor(rng.standard_normal((k, d)))
    probe = torch.as_tensor(rng.standard_normal((k, d)))
    names = [n for n, _ in dyn.named_parameters()]
    base = [p0 for _, p0 in dyn.named_parameters()]

    def fn(leaves):
        out = torch.func.functional_call(dyn, dict(zip(names, leaves)), (u, z))
        return (out * probe).sum()

    return losses.grad_check(_maybe_corrupt(fn, corrupt), base, rng=rng)


def check_heads(seed: int, corrupt: bool = False) -> float:
    """Class/box/mask head stacks through focal + L1 + L2 targets."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    d, n_cls, l = 8, 4, 6
    class_head = torch.nn.Linear(d, n_cls, dtype=torch.float64)
    box_head = MLP(d, d, 4, n_hidden=3)
    mask_head = torch.nn.Linear(d, l, dtype=torch.float64)
    x = torch.as_tensor(rng.standard_normal(d))
    target_cls = int(rng.integers(n_cls))
    target_box = torch.as_tensor(rng.uniform(0.5, 1.5, 4))
    target_emb = torch.as_tensor(rng.standard_normal(l))
    modules = [("cls", class_head), ("box", box_head), ("mask", mask_head)]
    names, base = [], []
    for tag, mod in modules:
        for n, p0 in mod.named_parameters():
            names.append((tag, n))
            base.append(p0)

    def fn(leaves):
        groups = {"cls": {}, "box": {}, "mask": {}}
        for (tag, n), leaf in zip(names, leaves):
            groups[tag][n] = leaf
        probs = torch.softmax(torch.func.functional_call(class_head, groups["cls"], (x,)), -1)
        box = torch.func.functional_call(box_head, groups["box"], (x,))
        emb = torch.func.functional_call(mask_head, groups["mask"], (x,))
        return (losses.focal_loss(probs, target_cls)
                + (box - target_box).abs().sum()
                + losses.l2_embedding_loss(emb, target_emb))

    return losses.grad_check(_maybe_corrupt(fn, corrupt), base, rng=rng)


def check_set_loss(seed: int, corrupt: bool = False) -> float:
    """Full set loss wrt predicted boxes, logits, and embeddings."""
    rng = np.random.default_rng(seed)
    codec = _soft_codec(rng)
    n, k = 2, 4
    gt_boxes = torch.as_tensor(_separated_boxes(rng, n))
    gt_classes = torch.as_tensor(rng.integers(0, 3, n))
    gt_masks = torch.as_tensor(rng.uniform(0.25, 0.75, (n, codec.side, codec.side)))
    pred_boxes = torch.as_tensor(_separated_boxes(rng, k) + 0.011)
    logits = torch.as_tensor(rng.standard_normal((k, 4)))
    embs = torch.as_tensor(np.stack([_interior_embedding(rng, codec) for _ in range(k)]))
    indices = rng.permutation(k)[:n]
    basis, mean = losses.codec_tensors(codec)
    w = CostWeights()

    def fn(params):
        b, lg, em = params
        probs = torch.softmax(lg, dim=-1)
        lb = losses.set_loss_tensors(gt_boxes, gt_classes, gt_masks,
                                     b, probs, em, indices, basis, mean, w)
        return lb.total

    return losses.grad_check(_maybe_corrupt(fn, corrupt),
                             [pred_boxes, logits, embs], rng=rng)


SCOPES = {
    "focal": check_focal,
    "dice": check_dice,
    "l2": check_l2,
    "box": check_box,
    "encoder": check_encoder,
    "dynamic": check_dynamic,
    "heads": check_heads,
    "set_loss": check_set_loss,
}

SCOPE_GROUPS = {
    "losses": ["focal", "dice", "l2", "box", "set_loss"],
    "attention": ["encoder", "dynamic"],
    "heads": ["heads"],
    "all": list(SCOPES),
}


def run_suite(scopes=None, n_points: int = 50, seed: int = 0,
              corrupt: bool = False) -> dict:
    """Run each scope at `n_points` seeded random points; reports the max
    relative error per scope and an overall pass flag at TOLERANCE."""
    names = SCOPE_GROUPS.get(scopes or "all", None)
    if names is None:
        names = [scopes] if isinstance(scopes, str) else list(scopes)
    report = {"tolerance": TOLERANCE, "n_points": n_points, "scopes": {}}
    ok = True
    for name in names:
        check = SCOPES[name]
        worst = float(max(check(seed * 100003 + i, corrupt=corrupt)
                          for i in range(n_points)))
        passed = bool(worst <= TOLERANCE)
        ok &= passed
        report["scopes"][name] = {"max_rel_error": worst, "pass": passed}
    report["pass"] = ok
    return report
