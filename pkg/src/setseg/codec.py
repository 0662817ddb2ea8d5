"""Linear mask codec: fit an orthonormal basis to instance masks, encode masks
to low-dimensional embeddings, decode them back, and move masks between image
space and the fixed s x s frame.

The fitted basis D (s^2 x l, orthonormal columns) minimizes the total squared
reconstruction error sum ||m - D D^T m||^2 over the training masks, i.e. it
spans the top-l principal subspace of the (optionally centered) mask matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SIDE = 28
DEFAULT_DIM = 60


@dataclass(frozen=True)
class MaskCodec:
    """Orthonormal basis mapping s x s masks to l-dimensional embeddings."""

    basis: np.ndarray                 # (s^2, l), orthonormal columns
    mean: np.ndarray | None           # (s^2,) or None when fitted uncentered
    spectrum: np.ndarray              # (s^2,) per-component energies, nonincreasing
    side: int
    dim: int

    def __post_init__(self):
        if self.basis.shape != (self.side ** 2, self.dim):
            raise ValueError("basis shape inconsistent with side/dim")
        gram = self.basis.T @ self.basis
        if not np.allclose(gram, np.eye(self.dim), atol=1e-8):
            raise ValueError("basis columns are not orthonormal")


def _flatten(masks) -> np.ndarray:
    X = np.asarray(masks, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    n, h, w = X.shape
    if h != w:
        raise ValueError("masks must be square")
    return X.reshape(n, h * w), h


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column is made positive so fits are
    # reproducible across platforms.
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def fit(masks, dim: int = DEFAULT_DIM, center: bool = False) -> MaskCodec:
    """Fit the codec to a corpus of s x s masks.

    Uses an eigendecomposition of the s^2 x s^2 scatter matrix. When the data
    rank is below `dim`, the remaining columns are an arbitrary orthonormal
    complement with zero spectrum entries.
    """
    X, side = _flatten(masks)
    n, d2 = X.shape
    if n < 1:
        raise ValueError("need at least one mask")
    if dim < 1 or dim > d2:
        raise ValueError(f"embedding dim must be in [1, {d2}]")
    mean = X.mean(axis=0) if center else None
    Xc = X - mean if center else X
    scatter = Xc.T @ Xc
    evals, evecs = np.linalg.eigh(scatter)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    basis = _fix_signs(np.ascontiguousarray(evecs[:, :dim]))
    return MaskCodec(basis=basis, mean=mean, spectrum=evals,
                     side=side, dim=dim)


def encode(codec: MaskCodec, mask) -> np.ndarray:
    """Embedding r = D^T (m - mu). Accepts one mask (s,s) or a batch (n,s,s)."""
    X, side = _flatten(mask)
    if side != codec.side:
        raise ValueError(f"mask side {side} != codec side {codec.side}")
    if codec.mean is not None:
        X = X - codec.mean
    r = X @ codec.basis
    return r[0] if np.asarray(mask).ndim == 2 else r


def decode(codec: MaskCodec, embedding, clamp: bool = True) -> np.ndarray:
    """Soft mask m = D r + mu, clamped to [0, 1] unless `clamp` is off.

    Accepts one embedding (l,) or a batch (n, l); threshold at 0.5 for a
    binary mask.
    """
    r = np.asarray(embedding, dtype=np.float64)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    if r.shape[1] != codec.dim:
        raise ValueError(f"embedding dim {r.shape[1]} != codec dim {codec.dim}")
    X = r @ codec.basis.T
    if codec.mean is not None:
        X = X + codec.mean
    if clamp:
        X = np.clip(X, 0.0, 1.0)
    out = X.reshape(-1, codec.side, codec.side)
    return out[0] if single else out


def reconstruction_error(codec: MaskCodec, masks) -> float:
    """Total squared error sum ||m - decode(encode(m))||^2, pre-clamp."""
    X, _ = _flatten(masks)
    Xc = X - codec.mean if codec.mean is not None else X
    resid = Xc - (Xc @ codec.basis) @ codec.basis.T
    return float(np.sum(resid ** 2))


def energy_spectrum(masks, top: int | None = None, center: bool = False):
    """Per-component variance ratios of the full decomposition.

    Returns an (r, 2) array of (component index, energy ratio), sorted
    nonincreasing; ratios over all s^2 components sum to 1.
    """
    X, side = _flatten(masks)
    full = fit(masks, dim=1, center=center)  # cheap: spectrum is full either way
    total = full.spectrum.sum()
    ratios = full.spectrum / total if total > 0 else full.spectrum
    r = side * side if top is None else min(top, side * side)
    return np.stack([np.arange(r, dtype=np.float64), ratios[:r]], axis=1)


def mask_iou(a, b) -> float:
    """IoU of two binary masks; empty vs empty is 1 by convention."""
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def reconstruction_iou(codec: MaskCodec, mask) -> float:
    """IoU between a binary mask and its thresholded reconstruction."""
    recon = decode(codec, encode(codec, mask)) > 0.5
    return mask_iou(mask, recon)


def _bilinear_grid(raster: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear sample a 2D raster at continuous array positions (border clamp)."""
    H, W = raster.shape
    ys = np.clip(ys, 0.0, H - 1.0)
    xs = np.clip(xs, 0.0, W - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = ys - y0
    wx = xs - x0
    top = raster[y0, x0] * (1 - wx) + raster[y0, x1] * wx
    bot = raster[y1, x0] * (1 - wx) + raster[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _clip_box_to_image(box) -> np.ndarray:
    b = np.clip(np.asarray(box, dtype=np.float64).reshape(4), 0.0, 1.0)
    if b[2] <= b[0] or b[3] <= b[1]:
        raise ValueError("empty crop: box degenerate after clipping to the image")
    return b


def crop_resize_mask(raster, box, side: int = DEFAULT_SIDE) -> np.ndarray:
    """Crop the sub-raster under a normalized corner box and resample to s x s.

    Bilinear sampling with half-pixel alignment, thresholded at 0.5 to a
    binary mask. The box is clipped to the image first; a box fully outside
    raises.
    """
    raster = np.asarray(raster, dtype=np.float64)
    H, W = raster.shape
    b = _clip_box_to_image(box)
    x0, y0, x1, y1 = b * np.array([W, H, W, H])
    cell_w = (x1 - x0) / side
    cell_h = (y1 - y0) / side
    xs = x0 + (np.arange(side) + 0.5) * cell_w - 0.5
    ys = y0 + (np.arange(side) + 0.5) * cell_h - 0.5
    grid = _bilinear_grid(raster, ys[:, None].repeat(side, 1), xs[None, :].repeat(side, 0))
    return (grid >= 0.5).astype(np.float64)


def paste_mask(soft, box, image_hw) -> np.ndarray:
    """Inverse of crop_resize_mask: place an s x s soft mask into image space.

    Bilinear resize of the mask to the (clipped) box extent, zero elsewhere.
    """
    soft = np.asarray(soft, dtype=np.float64)
    side = soft.shape[0]
    H, W = image_hw
    b = _clip_box_to_image(box)
    out = np.zeros((H, W), dtype=np.float64)
    x0, y0, x1, y1 = b * np.array([W, H, W, H])
    px0, px1 = int(np.floor(x0)), int(np.ceil(x1))
    py0, py1 = int(np.floor(y0)), int(np.ceil(y1))
    px1 = min(px1, W)
    py1 = min(py1, H)
    xs = np.arange(px0, px1) + 0.5
    ys = np.arange(py0, py1) + 0.5
    inside_x = (xs >= x0) & (xs <= x1)
    inside_y = (ys >= y0) & (ys <= y1)
    # Map image pixel centers back into mask array coordinates.
    mx = (xs - x0) / (x1 - x0) * side - 0.5
    my = (ys - y0) / (y1 - y0) * side - 0.5
    vals = _bilinear_grid(soft, my[:, None].repeat(len(mx), 1), mx[None, :].repeat(len(my), 0))
    vals = vals * inside_y[:, None] * inside_x[None, :]
    out[py0:py1, px0:px1] = vals
    return out
