"""Deterministic synthetic shapes dataset: disks, rectangles, and triangles
rasterized onto small images with exact masks and tight boxes. Serves as the
desk-scale stand-in for a real mask corpus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .io import AnnotationDoc, ImageInfo, Instance, rle_encode

CATEGORIES = ("disk", "rectangle", "triangle")


@dataclass
class ShapesConfig:
    seed: int = 0
    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    min_radius: float = 6.0
    max_radius: float = 14.0
    noise: float = 0.02

    def __post_init__(self):
        if self.min_shapes < 0 or self.max_shapes < self.min_shapes:
            raise ValueError("invalid shape count range")
        if not 0 < self.min_radius <= self.max_radius:
            raise ValueError("invalid radius range")


def _disk_mask(size, cx, cy, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r).astype(np.float64)


def _rect_mask(size, cx, cy, hw, hh):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((np.abs(xx + 0.5 - cx) <= hw) & (np.abs(yy + 0.5 - cy) <= hh)).astype(np.float64)


def _triangle_mask(size, verts):
    yy, xx = np.mgrid[0:size, 0:size]
    px = xx + 0.5
    py = yy + 0.5
    inside = np.ones((size, size), dtype=bool)
    for i in range(3):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % 3]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside &= cross >= 0
    return inside.astype(np.float64)


def _tight_box(mask) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    size = mask.shape[0]
    return np.array([xs.min() / size, ys.min() / size,
                     (xs.max() + 1) / size, (ys.max() + 1) / size])


def _sample_instance(rng, cfg: ShapesConfig):
    size = cfg.image_size
    cat = int(rng.integers(len(CATEGORIES)))
    r = rng.uniform(cfg.min_radius, cfg.max_radius)
    cx = rng.uniform(r + 1, size - r - 1)
    cy = rng.uniform(r + 1, size - r - 1)
    if cat == 0:
        mask = _disk_mask(size, cx, cy, r)
    elif cat == 1:
        hw = r
        hh = rng.uniform(0.5, 1.0) * r
        mask = _rect_mask(size, cx, cy, hw, hh)
    else:
        angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
        # Keep triangles non-degenerate by spacing the vertex angles.
        angles = angles + np.array([0.0, 0.7, 1.4])
        verts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles]
        mask = _triangle_mask(size, verts)
        if mask.sum() < 4:
            mask = _disk_mask(size, cx, cy, r)
            cat = 0
    return cat, mask


def gen_shapes(cfg: ShapesConfig, n_images: int):
    """Generate the dataset: (AnnotationDoc, images (n, 3, H, W) float32).

    Each category renders with a distinct base channel; pixel noise is added
    on top. Masks are exact and boxes are tight by construction.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    images = np.zeros((n_images, 3, size, size), dtype=np.float32)
    doc_images = []
    doc_instances = []
    for idx in range(n_images):
        raster = rng.normal(0.0, cfg.noise, (3, size, size))
        count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        for _ in range(count):
            cat, mask = _sample_instance(rng, cfg)
            shade = rng.uniform(0.6, 1.0)
            raster[cat] = np.where(mask > 0, shade, raster[cat])
            doc_instances.append(Instance(
                image_id=idx, category=cat,
                bbox=[float(v) for v in _tight_box(mask)],
                rle=rle_encode(mask)))
        images[idx] = raster.astype(np.float32)
        doc_images.append(ImageInfo(id=idx, width=size, height=size,
                                    file=f"image_{idx}"))
    doc = AnnotationDoc(num_categories=len(CATEGORIES), images=doc_images,
                        instances=doc_instances)
    return doc, images


def mask_corpus(doc: AnnotationDoc, side: int = 28) -> np.ndarray:
    """Crop every annotated mask to its box and resample to (side, side)."""
    from .codec import crop_resize_mask

    out = []
    for inst in doc.instances:
        raster = doc.decode_mask(inst)
        out.append(crop_resize_mask(raster, inst.bbox, side))
    return np.stack(out) if out else np.zeros((0, side, side))
