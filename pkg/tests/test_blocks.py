"""Core block math against brute-force loop oracles."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from f2t2hit import (
    ChannelFFN,
    ConfigError,
    DualFeatureExtraction,
    F2T2Block,
    FFTLayer,
    HiTBlock,
    HiTWindowAttention,
    LayerNorm2d,
    NAFBlock,
    ShapeError,
    SimplifiedChannelAttention,
    SpatialFFN,
    channel_self_correlation,
    layer_norm_2d,
    simple_gate,
    spatial_self_correlation,
    window_merge,
    window_partition,
)
from f2t2hit.blocks import LAYER_NORM_EPS


def rand(*shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


class TestLayerNorm:
    def test_matches_loop_oracle(self):
        x = rand(4, 3, 5, seed=1).double()
        gamma = rand(4, seed=2).double()
        beta = rand(4, seed=3).double()
        got = layer_norm_2d(x, gamma, beta).numpy()

        xn = x.numpy()
        want = np.zeros_like(xn)
        for i in range(3):
            for j in range(5):
                column = xn[:, i, j]
                mu = sum(column) / len(column)
                var = sum((c - mu) ** 2 for c in column) / len(column)
                for c in range(4):
                    norm = (column[c] - mu) / math.sqrt(var + LAYER_NORM_EPS)
                    want[c, i, j] = norm * gamma.numpy()[c] + beta.numpy()[c]
        assert np.abs(got - want).max() < 1e-12

    def test_constant_channel_vector_maps_to_zero(self):
        x = torch.full((3, 2, 2), 0.7)
        out = layer_norm_2d(x, torch.ones(3), torch.zeros(3))
        assert out.abs().max() < 1e-6

    def test_prenormalized_input_is_affine_identity(self):
        # channel vectors with exact zero mean and unit (population) variance
        base = torch.tensor([1.0, -1.0])
        x = base.view(2, 1, 1).repeat(1, 4, 4)
        out = layer_norm_2d(x, torch.full((2,), 2.0), torch.ones(2))
        assert torch.allclose(out, 2 * x + 1, atol=1e-3)

    def test_normalized_stats(self):
        x = rand(4, 3, 3, seed=4)
        out = layer_norm_2d(x, torch.ones(4), torch.zeros(4))
        mean = out.mean(dim=0)
        var = out.var(dim=0, unbiased=False)
        assert mean.abs().max() < 1e-6
        assert ((var - 1).abs() < 1e-3).all()

    def test_rejects_single_channel(self):
        with pytest.raises(ConfigError):
            layer_norm_2d(torch.ones(1, 4, 4), torch.ones(1), torch.zeros(1))
        with pytest.raises(ConfigError):
            LayerNorm2d(1)

    def test_module_matches_function(self):
        x = rand(6, 4, 4, seed=5)
        module = LayerNorm2d(6)
        with torch.no_grad():
            module.gamma.copy_(rand(6, seed=6))
            module.beta.copy_(rand(6, seed=7))
        assert torch.equal(
            module(x), layer_norm_2d(x, module.gamma, module.beta))

    def test_batched_input(self):
        x = rand(2, 4, 3, 3, seed=8)
        out = layer_norm_2d(x, torch.ones(4), torch.zeros(4))
        for n in range(2):
            single = layer_norm_2d(x[n], torch.ones(4), torch.zeros(4))
            assert torch.equal(out[n], single)


class TestSimpleGate:
    def test_all_ones(self):
        assert torch.equal(simple_gate(torch.ones(4, 2, 2)), torch.ones(2, 2, 2))

    def test_zero_second_half(self):
        x = torch.cat([torch.ones(2, 2, 2), torch.zeros(2, 2, 2)])
        assert torch.equal(simple_gate(x), torch.zeros(2, 2, 2))

    def test_matches_loop_oracle(self):
        x = rand(6, 2, 2, seed=9)
        got = simple_gate(x).numpy()
        xn = x.numpy()
        for c in range(3):
            for i in range(2):
                for j in range(2):
                    assert got[c, i, j] == pytest.approx(
                        xn[c, i, j] * xn[c + 3, i, j], abs=1e-7)

    def test_odd_channels_rejected(self):
        with pytest.raises(ShapeError):
            simple_gate(torch.ones(3, 2, 2))


class TestSimplifiedChannelAttention:
    def test_zero_input(self):
        sca = SimplifiedChannelAttention(4)
        assert torch.equal(sca(torch.zeros(4, 3, 3)), torch.zeros(4, 3, 3))

    def test_identity_kernel_constant_input(self):
        sca = SimplifiedChannelAttention(3)
        with torch.no_grad():
            sca.proj.weight.copy_(torch.eye(3).view(3, 3, 1, 1))
            sca.proj.bias.zero_()
        x = torch.full((3, 4, 4), 0.5)
        assert torch.allclose(sca(x), torch.full((3, 4, 4), 0.25), atol=1e-7)

    def test_matches_two_loop_oracle(self):
        sca = SimplifiedChannelAttention(4)
        x = rand(4, 3, 5, seed=10)
        got = sca(x).detach().numpy()

        xn = x.numpy()
        weight = sca.proj.weight.detach().numpy()[:, :, 0, 0]
        bias = sca.proj.bias.detach().numpy()
        pooled = [xn[c].sum() / (3 * 5) for c in range(4)]
        scale = [
            sum(weight[c, c2] * pooled[c2] for c2 in range(4)) + bias[c]
            for c in range(4)
        ]
        for c in range(4):
            for i in range(3):
                for j in range(5):
                    assert got[c, i, j] == pytest.approx(
                        xn[c, i, j] * scale[c], abs=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            SimplifiedChannelAttention(4)(torch.ones(3, 2, 2))


class TestNAFBlock:
    def test_identity_at_init(self):
        block = NAFBlock(8)
        x = rand(2, 8, 16, 16, seed=11)
        assert torch.equal(block(x), x)

    def test_shape_preserved(self):
        block = NAFBlock(8)
        with torch.no_grad():
            block.body_gain.fill_(0.3)
            block.ffn_gain.fill_(0.2)
        out = block(rand(8, 16, 16, seed=12))
        assert out.shape == (8, 16, 16)
        assert torch.isfinite(out).all()

    def test_deterministic(self):
        x = rand(1, 8, 8, 8, seed=13)
        torch.manual_seed(21)
        a = NAFBlock(8)
        torch.manual_seed(21)
        b = NAFBlock(8)
        with torch.no_grad():
            for blk in (a, b):
                blk.body_gain.fill_(0.5)
                blk.ffn_gain.fill_(0.5)
        assert torch.equal(a(x), b(x))


class TestWindows:
    def test_partition_counts(self):
        x = rand(3, 16, 16, seed=14)
        windows = window_partition(x, 4)
        assert windows.shape == (16, 3, 4, 4)

    def test_full_window_is_identity(self):
        x = rand(3, 8, 8, seed=15)
        windows = window_partition(x, 8)
        assert windows.shape == (1, 3, 8, 8)
        assert torch.equal(windows[0], x)

    def test_row_major_order(self):
        # each 2x2 tile holds its row-major tile index
        tiles = torch.arange(4.0).view(2, 2)
        x = tiles.repeat_interleave(2, dim=0).repeat_interleave(2, dim=1)
        windows = window_partition(x.unsqueeze(0), 2)
        for index in range(4):
            assert torch.equal(windows[index], torch.full((1, 2, 2), float(index)))

    def test_roundtrip_bit_exact(self):
        x = rand(6, 16, 24, seed=16)
        assert torch.equal(window_merge(window_partition(x, 8), (16, 24)), x)

    def test_batched_roundtrip(self):
        x = rand(2, 3, 8, 12, seed=17)
        back = window_merge(window_partition(x, 4), (2, 8, 12))
        assert torch.equal(back, x)

    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(1, 3),
        c=st.integers(1, 5),
        tiles_h=st.integers(1, 4),
        tiles_w=st.integers(1, 4),
        ws=st.sampled_from([2, 3, 4, 8]),
        seed=st.integers(0, 2 ** 16),
    )
    def test_roundtrip_property(self, n, c, tiles_h, tiles_w, ws, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(n, c, tiles_h * ws, tiles_w * ws, generator=g)
        windows = window_partition(x, ws)
        assert windows.shape == (n * tiles_h * tiles_w, c, ws, ws)
        assert torch.equal(window_merge(windows, (n,) + x.shape[-2:]), x)

    def test_permuted_windows_differ(self):
        x = torch.zeros(1, 8, 8)
        x[..., :4, :4] = 1.0  # first window distinct from the rest
        windows = window_partition(x, 4)
        swapped = windows[[1, 0, 2, 3]]
        assert not torch.equal(window_merge(swapped, (8, 8)), x)

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            window_partition(rand(3, 10, 8, seed=18), 4)

    def test_merge_count_mismatch_rejected(self):
        windows = window_partition(rand(3, 8, 8, seed=19), 4)
        with pytest.raises(ShapeError):
            window_merge(windows, (16, 16))


def loop_channel_attention(q, k, v, window_size):
    """Independent loop oracle for the channel correlation path."""
    qn, kn, vn = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    channels, h, w = qn.shape
    out = np.zeros_like(qn)
    for top in range(0, h, window_size):
        for left in range(0, w, window_size):
            qw = qn[:, top:top + window_size, left:left + window_size].reshape(channels, -1)
            kw = kn[:, top:top + window_size, left:left + window_size].reshape(channels, -1)
            vw = vn[:, top:top + window_size, left:left + window_size].reshape(channels, -1)
            scores = np.zeros((channels, channels))
            for a in range(channels):
                for b in range(channels):
                    scores[a, b] = (qw[a] * kw[b]).sum() / (window_size ** 2)
            result = np.zeros((channels, window_size * window_size))
            for a in range(channels):
                row = np.exp(scores[a] - scores[a].max())
                weights = row / row.sum()
                result[a] = sum(weights[b] * vw[b] for b in range(channels))
            out[:, top:top + window_size, left:left + window_size] = (
                result.reshape(channels, window_size, window_size))
    return out


def loop_pooled_spatial_attention(q, k, v, window_size, grid=4):
    """Independent loop oracle for pooled-key window attention."""
    qn, kn, vn = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    channels, h, w = qn.shape
    pool = window_size // grid
    out = np.zeros_like(qn)
    for top in range(0, h, window_size):
        for left in range(0, w, window_size):
            qw = qn[:, top:top + window_size, left:left + window_size]
            kw = kn[:, top:top + window_size, left:left + window_size]
            vw = vn[:, top:top + window_size, left:left + window_size]
            kp = np.zeros((channels, grid, grid))
            vp = np.zeros((channels, grid, grid))
            for c in range(channels):
                for gi in range(grid):
                    for gj in range(grid):
                        patch_k = kw[c, gi * pool:(gi + 1) * pool, gj * pool:(gj + 1) * pool]
                        patch_v = vw[c, gi * pool:(gi + 1) * pool, gj * pool:(gj + 1) * pool]
                        kp[c, gi, gj] = patch_k.mean()
                        vp[c, gi, gj] = patch_v.mean()
            kf = kp.reshape(channels, -1)
            vf = vp.reshape(channels, -1)
            qf = qw.reshape(channels, -1)
            result = np.zeros((channels, window_size * window_size))
            for pos in range(window_size * window_size):
                scores = np.array([
                    (qf[:, pos] * kf[:, m]).sum() / math.sqrt(channels)
                    for m in range(grid * grid)
                ])
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                result[:, pos] = vf @ weights
            out[:, top:top + window_size, left:left + window_size] = (
                result.reshape(channels, window_size, window_size))
    return out


class TestCorrelations:
    def test_spatial_base_window_matches_plain_attention(self):
        from f2t2hit import attention_oracle
        q, k, v = (rand(5, 4, 4, seed=s).double() for s in (20, 21, 22))
        got = spatial_self_correlation(q, k, v, 4)
        want = torch.from_numpy(attention_oracle(q, k, v))
        assert (got - want).abs().max() < 1e-5

    def test_spatial_pooled_matches_loop_oracle(self):
        q, k, v = (rand(3, 16, 8, seed=s).double() for s in (23, 24, 25))
        got = spatial_self_correlation(q, k, v, 8).numpy()
        want = loop_pooled_spatial_attention(q, k, v, 8)
        assert np.abs(got - want).max() < 1e-10

    def test_spatial_weights_rows_sum_to_one(self):
        q, k, v = (rand(4, 8, 8, seed=s) for s in (26, 27, 28))
        _, weights = spatial_self_correlation(q, k, v, 8, return_weights=True)
        assert weights.shape == (1, 64, 16)
        assert (weights.sum(dim=-1) - 1).abs().max() < 1e-6

    def test_channel_matches_loop_oracle(self):
        q, k, v = (rand(4, 8, 8, seed=s).double() for s in (29, 30, 31))
        got = channel_self_correlation(q, k, v, 4).numpy()
        want = loop_channel_attention(q, k, v, 4)
        assert np.abs(got - want).max() < 1e-10

    def test_channel_weights_rows_sum_to_one(self):
        q, k, v = (rand(6, 8, 8, seed=s) for s in (32, 33, 34))
        _, weights = channel_self_correlation(q, k, v, 8, return_weights=True)
        assert weights.shape == (1, 6, 6)
        assert (weights.sum(dim=-1) - 1).abs().max() < 1e-6

    def test_single_position_returns_value(self):
        from f2t2hit import attention_oracle
        q, k, v = (rand(4, 1, 1, seed=s).double() for s in (35, 36, 37))
        out = attention_oracle(q, k, v)
        assert np.abs(out - v.numpy()).max() < 1e-12


class TestDualFeatureExtraction:
    def test_zero_input_zero_biases(self):
        dfe = DualFeatureExtraction(4)
        with torch.no_grad():
            dfe.to_q.bias.zero_()
            dfe.to_k.bias.zero_()
            dfe.spatial_value.bias.zero_()
        q, k, v = dfe(torch.zeros(4, 8, 8))
        assert torch.equal(q, torch.zeros(4, 8, 8))
        assert torch.equal(k, torch.zeros(4, 8, 8))
        assert torch.equal(v, torch.zeros(4, 8, 8))

    def test_identity_projections_zero_paths(self):
        dfe = DualFeatureExtraction(3)
        with torch.no_grad():
            eye = torch.eye(3).view(3, 3, 1, 1)
            dfe.to_q.weight.copy_(eye)
            dfe.to_q.bias.zero_()
            dfe.to_k.weight.copy_(eye)
            dfe.to_k.bias.zero_()
            dfe.spatial_value.weight.zero_()
            dfe.spatial_value.bias.zero_()
            dfe.channel_gate.weight.zero_()
            dfe.channel_gate.bias.fill_(-1000.0)  # sigmoid saturates to 0
        x = rand(3, 8, 8, seed=38)
        q, k, v = dfe(x)
        assert torch.equal(q, x)
        assert torch.equal(k, x)
        assert torch.equal(v, torch.zeros_like(x))

    def test_matches_composed_primitives(self):
        dfe = DualFeatureExtraction(5)
        x = rand(1, 5, 6, 6, seed=39)
        q, k, v = dfe(x)
        q2 = F.conv2d(x, dfe.to_q.weight, dfe.to_q.bias)
        k2 = F.conv2d(x, dfe.to_k.weight, dfe.to_k.bias)
        pooled = x.mean(dim=(-2, -1), keepdim=True)
        gate = torch.sigmoid(
            F.conv2d(pooled, dfe.channel_gate.weight, dfe.channel_gate.bias))
        v2 = F.conv2d(x, dfe.spatial_value.weight, dfe.spatial_value.bias,
                      padding=1, groups=5) + x * gate
        assert (q - q2).abs().max() < 1e-6
        assert (k - k2).abs().max() < 1e-6
        assert (v - v2).abs().max() < 1e-6


class TestHiTWindowAttention:
    def test_group_bounds(self):
        attn = HiTWindowAttention(16, (4, 8, 16))
        assert attn.group_bounds == [(0, 5), (5, 10), (10, 16)]

    def test_remainder_goes_to_largest_window(self):
        attn = HiTWindowAttention(17, (4, 8, 16))
        assert attn.group_bounds == [(0, 5), (5, 10), (10, 17)]

    def test_small_group_rejected(self):
        with pytest.raises(ConfigError):
            HiTWindowAttention(4, (4, 8, 16))

    def test_non_divisible_input_rejected(self):
        attn = HiTWindowAttention(16, (4, 8, 16))
        with pytest.raises(ShapeError):
            attn(rand(16, 8, 8, seed=40))

    def test_zero_input_zero_biases(self):
        attn = HiTWindowAttention(8, (4,))
        with torch.no_grad():
            for conv in (attn.dfe.to_q, attn.dfe.to_k, attn.dfe.spatial_value,
                         attn.dfe.channel_gate, attn.fuse):
                conv.bias.zero_()
        out = attn(torch.zeros(8, 4, 4))
        assert torch.equal(out, torch.zeros(8, 4, 4))

    def test_single_group_spatial_path_matches_oracle(self):
        from f2t2hit import attention_oracle
        attn = HiTWindowAttention(8, (4,)).double()
        with torch.no_grad():
            attn.fuse.weight.copy_(torch.eye(8).view(8, 8, 1, 1))
            attn.fuse.bias.zero_()
        x = rand(8, 4, 4, seed=41).double()
        out = attn(x)
        q, k, v = attn.dfe(x)
        want = attention_oracle(q[:4].detach(), k[:4].detach(), v[:4].detach())
        assert (out[:4].detach().numpy() - want).max() < 1e-5

    def test_shape_preserved_batched(self):
        attn = HiTWindowAttention(16, (4, 8, 16))
        out = attn(rand(2, 16, 32, 16, seed=42))
        assert out.shape == (2, 16, 32, 16)
        assert torch.isfinite(out).all()


class TestFFNs:
    def test_channel_ffn_zero(self):
        ffn = ChannelFFN(4)
        with torch.no_grad():
            ffn.expand.bias.zero_()
            ffn.project.bias.zero_()
        assert torch.equal(ffn(torch.zeros(4, 5, 5)), torch.zeros(4, 5, 5))

    def test_channel_ffn_shape(self):
        assert ChannelFFN(8)(rand(8, 8, 8, seed=43)).shape == (8, 8, 8)

    def test_spatial_ffn_zero(self):
        ffn = SpatialFFN(4)
        with torch.no_grad():
            ffn.expand.bias.zero_()
            for dw in (ffn.dw3, ffn.dw5, ffn.dw7):
                dw.bias.zero_()
            ffn.project.bias.zero_()
        assert torch.equal(ffn(torch.zeros(4, 6, 6)), torch.zeros(4, 6, 6))

    def test_spatial_ffn_delta_kernels(self):
        # centered-delta depthwise kernels turn the middle stage into 3x the
        # activated expansion
        ffn = SpatialFFN(3)
        with torch.no_grad():
            for dw, size in ((ffn.dw3, 3), (ffn.dw5, 5), (ffn.dw7, 7)):
                dw.weight.zero_()
                dw.weight[:, 0, size // 2, size // 2] = 1.0
                dw.bias.zero_()
        x = rand(3, 8, 8, seed=44)
        got = ffn(x)
        middle = 3 * F.gelu(ffn.expand(x))
        want = ffn.project(middle)
        assert (got - want).abs().max() < 1e-6


class TestFFTLayer:
    def test_zero_input_zero_biases(self):
        layer = FFTLayer(4)
        with torch.no_grad():
            for conv in (layer.spatial_dw, layer.spatial_pw, layer.freq_in,
                         layer.freq_out, layer.fuse):
                conv.bias.zero_()
        assert torch.equal(layer(torch.zeros(4, 8, 8)), torch.zeros(4, 8, 8))

    def test_frequency_branch_identity_kernels(self):
        layer = FFTLayer(3)
        with torch.no_grad():
            eye = torch.eye(6).view(6, 6, 1, 1)
            layer.freq_in.weight.copy_(eye)
            layer.freq_in.bias.zero_()
            layer.freq_out.weight.copy_(eye)
            layer.freq_out.bias.zero_()
        x = rand(3, 12, 10, seed=45)
        out = layer.frequency_branch(x, activate=False)
        assert (out - x).abs().max() < 1e-5

    def test_small_spatial_dims_rejected(self):
        layer = FFTLayer(4)
        with pytest.raises(ConfigError):
            layer(rand(4, 1, 8, seed=46))

    def test_output_real_finite_shape(self):
        layer = FFTLayer(4)
        out = layer(rand(2, 4, 9, 7, seed=47))
        assert out.shape == (2, 4, 9, 7)
        assert out.dtype == torch.float32
        assert torch.isfinite(out).all()


class TestCompositeBlocks:
    def test_hit_block_identity_at_init(self):
        block = HiTBlock(16, (4, 8, 16))
        x = rand(2, 16, 16, 16, seed=48)
        assert torch.equal(block(x), x)

    def test_hit_block_shape_9x32x32(self):
        block = HiTBlock(9, (4, 8, 16))
        with torch.no_grad():
            block.attn_gain.fill_(0.4)
            block.ffn_gain.fill_(0.3)
        out = block(rand(9, 32, 32, seed=49))
        assert out.shape == (9, 32, 32)
        assert torch.isfinite(out).all()

    def test_f2t2_block_identity_at_init(self):
        block = F2T2Block(4)
        x = rand(4, 16, 16, seed=50)
        assert torch.equal(block(x), x)

    def test_f2t2_block_shape_4x16x16(self):
        block = F2T2Block(4)
        with torch.no_grad():
            block.mixer_gain.fill_(0.4)
            block.ffn_gain.fill_(0.3)
        out = block(rand(4, 16, 16, seed=51))
        assert out.shape == (4, 16, 16)
        assert torch.isfinite(out).all()
