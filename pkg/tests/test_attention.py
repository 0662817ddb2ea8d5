import math

import numpy as np
import pytest
import torch

from setseg.attention import (DynamicAttention, EncoderBlock, FeedForward,
                              MultiHeadAttention, SelfAttention, image_features)

# ---------------------------------------------------------------------------
# Straight-line numpy oracle: every building block re-derived from its
# mathematical definition, sharing no code with the torch implementation.
# ---------------------------------------------------------------------------

_erf = np.vectorize(math.erf)


def np_gelu(x):
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def np_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)  # biased, matching the definition
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_linear(x, module):
    w = module.weight.detach().numpy()
    out = x @ w.T
    if module.bias is not None:
        out = out + module.bias.detach().numpy()
    return out


def np_self_attention(x, mod):
    q = np_linear(x, mod.w_q)
    k = np_linear(x, mod.w_k)
    v = np_linear(x, mod.w_v)
    weights = np_softmax(q @ k.T / math.sqrt(mod.d))
    return weights @ v


def np_dynamic_attention(u, z, mod):
    k_inst, t2, d = u.shape
    gen = np_linear(z, mod.param_gen)
    w1 = gen[:, : d * mod.d_mid].reshape(k_inst, d, mod.d_mid)
    w2 = gen[:, d * mod.d_mid:].reshape(k_inst, mod.d_mid, d)
    g1 = mod.norm1.weight.detach().numpy()
    b1 = mod.norm1.bias.detach().numpy()
    g2 = mod.norm2.weight.detach().numpy()
    b2 = mod.norm2.bias.detach().numpy()
    x = np_gelu(np_layer_norm(np.einsum("ktd,kdm->ktm", u, w1), g1, b1))
    x = np_gelu(np_layer_norm(np.einsum("ktm,kmd->ktd", x, w2), g2, b2))
    return np_linear(x.reshape(k_inst, t2 * d), mod.out_proj)


def np_encoder_block(p, e, u, block):
    x = p + e
    z = np_layer_norm(x + np_self_attention(x, block.attn),
                      block.norm_attn.weight.detach().numpy(),
                      block.norm_attn.bias.detach().numpy())
    o = np_dynamic_attention(u, z, block.fusion)
    ffn = np_linear(np_gelu(np_linear(o, block.ffn.fc1)), block.ffn.fc2)
    return np_layer_norm(o + ffn,
                         block.norm_ffn.weight.detach().numpy(),
                         block.norm_ffn.bias.detach().numpy())


class TestImageFeatures:
    def test_constant_map(self):
        fm = torch.full((5, 6, 6), 3.0, dtype=torch.float64)
        out = image_features([fm], "avg", k=4)
        assert out.shape == (4, 5)
        assert torch.allclose(out, torch.full_like(out, 3.0))

    def test_avg_pool_value(self, rng):
        fm = torch.as_tensor(rng.standard_normal((3, 4, 4)))
        out = image_features([fm], "avg", k=1)
        assert torch.allclose(out[0], fm.mean(dim=(1, 2)))

    def test_max_pool_value(self, rng):
        fm = torch.as_tensor(rng.standard_normal((3, 4, 4)))
        out = image_features([fm], "max", k=1)
        assert torch.allclose(out[0], fm.amax(dim=(1, 2)))

    def test_multi_level_constant_sum(self):
        a = torch.full((2, 8, 8), 1.0, dtype=torch.float64)
        b = torch.full((2, 4, 4), 2.0, dtype=torch.float64)
        out = image_features([a, b], "avg", k=1)
        assert torch.allclose(out[0], torch.full((2,), 3.0, dtype=torch.float64))

    def test_rows_identical(self, rng):
        fm = torch.as_tensor(rng.standard_normal((3, 5, 5)))
        out = image_features([fm], "avg", k=6)
        assert torch.equal(out, out[0:1].expand(6, -1))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            image_features([torch.zeros(2, 4, 4), torch.zeros(3, 2, 2)])

    def test_empty_pyramid(self):
        with pytest.raises(ValueError):
            image_features([])

    def test_unknown_pooling(self):
        with pytest.raises(ValueError):
            image_features([torch.zeros(2, 4, 4)], "median")


class TestSelfAttention:
    def test_weights_rows_sum_to_one(self, rng):
        torch.manual_seed(0)
        mod = SelfAttention(6)
        x = torch.as_tensor(rng.standard_normal((4, 6)))
        w = mod.attention_weights(x)
        assert torch.allclose(w.sum(dim=-1), torch.ones(4, dtype=torch.float64))

    def test_zero_query_uniform_average(self, rng):
        # Zero Q makes all logits equal: output is the mean of the values.
        torch.manual_seed(0)
        mod = SelfAttention(6)
        with torch.no_grad():
            mod.w_q.weight.zero_()
        x = torch.as_tensor(rng.standard_normal((5, 6)))
        out = mod(x)
        expected = mod.w_v(x).mean(dim=0, keepdim=True).expand(5, -1)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_matches_numpy_oracle(self, rng):
        torch.manual_seed(1)
        mod = SelfAttention(8)
        x = rng.standard_normal((5, 8))
        out = mod(torch.as_tensor(x)).detach().numpy()
        assert np.allclose(out, np_self_attention(x, mod), atol=1e-12)

    def test_permutation_equivariant(self, rng):
        torch.manual_seed(2)
        mod = SelfAttention(6)
        x = torch.as_tensor(rng.standard_normal((5, 6)))
        perm = torch.as_tensor(rng.permutation(5))
        assert torch.allclose(mod(x[perm]), mod(x)[perm], atol=1e-12)


class TestMultiHeadAttention:
    def test_bad_head_count(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(6, heads=4)

    def test_permutation_equivariant(self, rng):
        torch.manual_seed(3)
        mod = MultiHeadAttention(8, heads=2)
        x = torch.as_tensor(rng.standard_normal((6, 8)))
        perm = torch.as_tensor(rng.permutation(6))
        assert torch.allclose(mod(x[perm]), mod(x)[perm], atol=1e-12)

    def test_single_head_is_projected_self_attention(self, rng):
        # With h=1 the computation reduces to self-attention followed by the
        # output projection.
        torch.manual_seed(4)
        mod = MultiHeadAttention(6, heads=1)
        single = SelfAttention(6)
        with torch.no_grad():
            single.w_q.weight.copy_(mod.w_q.weight)
            single.w_k.weight.copy_(mod.w_k.weight)
            single.w_v.weight.copy_(mod.w_v.weight)
        x = torch.as_tensor(rng.standard_normal((4, 6)))
        assert torch.allclose(mod(x), mod.out(single(x)), atol=1e-12)

    def test_heads_see_disjoint_slices(self, rng):
        # Zeroing the value rows of one head leaves the other head's output
        # slice unchanged after undoing the output projection.
        torch.manual_seed(5)
        mod = MultiHeadAttention(8, heads=2)
        with torch.no_grad():
            mod.out.weight.copy_(torch.eye(8, dtype=torch.float64))
        x = torch.as_tensor(rng.standard_normal((4, 8)))
        before = mod(x)
        with torch.no_grad():
            mod.w_v.weight[:4].zero_()  # head 0 value projection
        after = mod(x)
        assert torch.allclose(before[:, 4:], after[:, 4:], atol=1e-12)
        assert torch.allclose(after[:, :4], torch.zeros(4, 4, dtype=torch.float64))


class TestDynamicAttention:
    def test_output_shape(self, rng):
        torch.manual_seed(6)
        mod = DynamicAttention(8, 3, d_out=5)
        u = torch.as_tensor(rng.standard_normal((4, 9, 8)))
        z = torch.as_tensor(rng.standard_normal((4, 8)))
        assert mod(u, z).shape == (4, 5)

    def test_matches_numpy_oracle(self, rng):
        torch.manual_seed(7)
        mod = DynamicAttention(8, 2)
        u = rng.standard_normal((3, 4, 8))
        z = rng.standard_normal((3, 8))
        out = mod(torch.as_tensor(u), torch.as_tensor(z)).detach().numpy()
        oracle = np_dynamic_attention(u, z, mod)
        assert np.allclose(out, oracle, atol=1e-10)

    def test_instancewise_independence(self, rng):
        # Instance j's output depends only on (u_j, z_j).
        torch.manual_seed(8)
        mod = DynamicAttention(6, 2)
        u = torch.as_tensor(rng.standard_normal((3, 4, 6)))
        z = torch.as_tensor(rng.standard_normal((3, 6)))
        full = mod(u, z)
        solo = mod(u[1:2], z[1:2])
        assert torch.allclose(full[1:2], solo, atol=1e-12)

    def test_parameters_are_instance_conditioned(self, rng):
        # Different z rows with identical u rows give different outputs.
        torch.manual_seed(9)
        mod = DynamicAttention(8, 2)
        u = torch.as_tensor(rng.standard_normal((1, 4, 8))).expand(2, -1, -1)
        z = torch.as_tensor(rng.standard_normal((2, 8)))
        out = mod(u.contiguous(), z)
        assert not torch.allclose(out[0], out[1])


class TestFeedForward:
    def test_matches_numpy_oracle(self, rng):
        torch.manual_seed(10)
        mod = FeedForward(6)
        x = rng.standard_normal((3, 6))
        out = mod(torch.as_tensor(x)).detach().numpy()
        oracle = np_linear(np_gelu(np_linear(x, mod.fc1)), mod.fc2)
        assert np.allclose(out, oracle, atol=1e-12)


class TestEncoderBlock:
    def test_matches_numpy_oracle(self, rng):
        torch.manual_seed(11)
        block = EncoderBlock(8, 3)
        p = rng.standard_normal((4, 8))
        e = rng.standard_normal((4, 8))
        u = rng.standard_normal((4, 9, 8))
        out = block(torch.as_tensor(p), torch.as_tensor(e),
                    torch.as_tensor(u)).detach().numpy()
        oracle = np_encoder_block(p, e, u, block)
        assert np.allclose(out, oracle, atol=1e-10)

    def test_permutation_equivariant(self, rng):
        torch.manual_seed(12)
        block = EncoderBlock(8, 3)
        p = torch.as_tensor(rng.standard_normal((1, 8))).expand(5, -1)
        e = torch.as_tensor(rng.standard_normal((5, 8)))
        u = torch.as_tensor(rng.standard_normal((5, 9, 8)))
        perm = torch.as_tensor(rng.permutation(5))
        out = block(p, e, u)
        out_perm = block(p, e[perm], u[perm])
        assert torch.allclose(out_perm, out[perm], atol=1e-10)

    def test_identical_rows_stay_identical(self, rng):
        # With equal position embeddings and equal RoI features, no source
        # of asymmetry exists and all outputs coincide.
        torch.manual_seed(13)
        block = EncoderBlock(6, 2)
        p = torch.as_tensor(rng.standard_normal((1, 6))).expand(4, -1)
        e = torch.as_tensor(rng.standard_normal((1, 6))).expand(4, -1)
        u = torch.as_tensor(rng.standard_normal((1, 4, 6))).expand(4, -1, -1)
        out = block(p.contiguous(), e.contiguous(), u.contiguous())
        assert torch.allclose(out, out[0:1].expand(4, -1), atol=1e-12)

    def test_multihead_fusion_variant(self, rng):
        torch.manual_seed(14)
        block = EncoderBlock(8, 3, heads=2, fusion="multihead")
        p = torch.as_tensor(rng.standard_normal((4, 8)))
        e = torch.as_tensor(rng.standard_normal((4, 8)))
        u = torch.as_tensor(rng.standard_normal((4, 9, 8)))
        assert block(p, e, u).shape == (4, 8)

    def test_unknown_fusion(self):
        with pytest.raises(ValueError):
            EncoderBlock(8, 3, fusion="concat")
