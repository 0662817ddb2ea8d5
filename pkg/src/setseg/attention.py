"""Transformer encoder pieces: image-feature pooling, scaled dot-product
self-attention, the multi-head variant, instance-conditioned dynamic
attention, and the encoder block that fuses image and RoI features.

Everything is a torch module in float64 so the finite-difference gradient
oracle is clean. The instance axis (size k) is treated as an unordered set:
all blocks are permutation-equivariant when the position embeddings are
permuted along.
"""

from __future__ import annotations

import math

import torch
from torch import nn

LAYER_NORM_EPS = 1e-5


def image_features(pyramid, pooling: str = "avg", k: int = 1) -> torch.Tensor:
    """Pool a feature pyramid into one d-vector, replicated k times.

    Levels are resampled (adaptive average pooling) to the coarsest level's
    grid and summed, then globally pooled with `pooling` ('avg' or 'max').
    """
    if len(pyramid) == 0:
        raise ValueError("empty feature pyramid")
    levels = [torch.as_tensor(f) for f in pyramid]
    d = levels[0].shape[0]
    if any(f.shape[0] != d for f in levels):
        raise ValueError("all pyramid levels must share the channel count")
    coarse_hw = min((f.shape[1] * f.shape[2], (f.shape[1], f.shape[2])) for f in levels)[1]
    total = sum(torch.nn.functional.adaptive_avg_pool2d(f[None], coarse_hw)[0]
                for f in levels)
    if pooling == "avg":
        pooled = total.mean(dim=(1, 2))
    elif pooling == "max":
        pooled = total.amax(dim=(1, 2))
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return pooled[None, :].expand(k, -1)


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention: softmax(Q K^T / sqrt(d)) V,
    with Q, K, V produced by three bias-free weight matrices."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.w_q = nn.Linear(d, d, bias=False, dtype=torch.float64)
        self.w_k = nn.Linear(d, d, bias=False, dtype=torch.float64)
        self.w_v = nn.Linear(d, d, bias=False, dtype=torch.float64)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        q = self.w_q(x)
        k = self.w_k(x)
        logits = q @ k.T / math.sqrt(self.d)
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.attention_weights(x) @ self.w_v(x)


class MultiHeadAttention(nn.Module):
    """h parallel attentions on d/h-dim projections, concatenated and
    output-projected."""

    def __init__(self, d: int, heads: int = 8):
        super().__init__()
        if d % heads:
            raise ValueError("d must be divisible by the head count")
        self.d = d
        self.heads = heads
        self.w_q = nn.Linear(d, d, bias=False, dtype=torch.float64)
        self.w_k = nn.Linear(d, d, bias=False, dtype=torch.float64)
        self.w_v = nn.Linear(d, d, bias=False, dtype=torch.float64)
        self.out = nn.Linear(d, d, bias=False, dtype=torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k_inst = x.shape[0]
        dh = self.d // self.heads
        q = self.w_q(x).reshape(k_inst, self.heads, dh).transpose(0, 1)
        k = self.w_k(x).reshape(k_inst, self.heads, dh).transpose(0, 1)
        v = self.w_v(x).reshape(k_inst, self.heads, dh).transpose(0, 1)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(dh), dim=-1)
        z = (weights @ v).transpose(0, 1).reshape(k_inst, self.d)
        return self.out(z)


class DynamicAttention(nn.Module):
    """Instance-conditioned fusion of RoI features with encoder output.

    For each instance j, a generator layer maps z_j to two parameter blocks
    W1 (d x d_mid) and W2 (d_mid x d). The RoI feature U_j (t^2, d) is then
    transformed as

        x = gelu(norm1(U_j @ W1))      # (t^2, d_mid)
        x = gelu(norm2(x @ W2))        # (t^2, d)
        o_j = out_proj(flatten(x))     # (d_out,)

    with layer normalization (eps 1e-5) and exact GELU. This composition is
    mirrored by an independent straight-line oracle in the tests.
    """

    def __init__(self, d: int, roi_size: int, d_mid: int | None = None,
                 d_out: int | None = None):
        super().__init__()
        self.d = d
        # A singleton normalized dimension would collapse norm1 to its
        # constant bias, severing the dependence on U and Z; floor at 2.
        self.d_mid = d_mid or max(2, d // 4)
        self.d_out = d_out or d
        self.roi_size = roi_size
        n_params = d * self.d_mid + self.d_mid * d
        self.param_gen = nn.Linear(d, n_params, dtype=torch.float64)
        self.norm1 = nn.LayerNorm(self.d_mid, eps=LAYER_NORM_EPS, dtype=torch.float64)
        self.norm2 = nn.LayerNorm(d, eps=LAYER_NORM_EPS, dtype=torch.float64)
        self.act = nn.GELU()
        self.out_proj = nn.Linear(roi_size * roi_size * d, self.d_out, dtype=torch.float64)

    def forward(self, u: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        k_inst, t2, d = u.shape
        gen = self.param_gen(z)
        w1 = gen[:, :d * self.d_mid].reshape(k_inst, d, self.d_mid)
        w2 = gen[:, d * self.d_mid:].reshape(k_inst, self.d_mid, d)
        x = self.act(self.norm1(u @ w1))
        x = self.act(self.norm2(x @ w2))
        return self.out_proj(x.reshape(k_inst, t2 * d))


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * d
        self.fc1 = nn.Linear(d, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, d, dtype=torch.float64)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    """One encoder stage: self-attention over pooled image features plus
    position embeddings, dynamic attention against RoI features, and a
    feed-forward block, each with residual + layer normalization."""

    def __init__(self, d: int, roi_size: int, heads: int = 1,
                 fusion: str = "dynamic"):
        super().__init__()
        self.d = d
        if heads == 1:
            self.attn = SelfAttention(d)
        else:
            self.attn = MultiHeadAttention(d, heads)
        self.norm_attn = nn.LayerNorm(d, eps=LAYER_NORM_EPS, dtype=torch.float64)
        if fusion == "dynamic":
            self.fusion = DynamicAttention(d, roi_size, d_out=d)
        elif fusion == "multihead":
            # Fuse by attending from Z to the flattened, mean-pooled RoI features.
            self.fusion = _PooledRoiFusion(d)
        else:
            raise ValueError(f"unknown fusion {fusion!r}")
        self.ffn = FeedForward(d)
        self.norm_ffn = nn.LayerNorm(d, eps=LAYER_NORM_EPS, dtype=torch.float64)

    def forward(self, p: torch.Tensor, e: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        x = p + e
        z = self.norm_attn(x + self.attn(x))
        o = self.fusion(u, z)
        return self.norm_ffn(o + self.ffn(o))


class _PooledRoiFusion(nn.Module):
    """Multi-head alternative to dynamic attention: the RoI feature is
    mean-pooled over its spatial bins, projected, and added to Z through a
    multi-head attention over the instance axis."""

    def __init__(self, d: int, heads: int = 8):
        super().__init__()
        self.proj = nn.Linear(d, d, dtype=torch.float64)
        self.mha = MultiHeadAttention(d, heads)

    def forward(self, u: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        fused = z + self.proj(u.mean(dim=1))
        return fused + self.mha(fused)
