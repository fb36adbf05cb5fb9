"""Building blocks: normalization, gating, window attention and FFT mixing.

Every block takes a feature map shaped (C, H, W) or batched (N, C, H, W) and
returns the same shape. The three composite blocks (NAFBlock, HiTBlock,
F2T2Block) carry zero-initialized scalar residual gains, so a freshly built
block is the identity map.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

LAYER_NORM_EPS = 1e-6

# S-SC pools keys/values down to this grid inside each window, so the score
# matrix is (w*w) x 16 and cost stays linear in the window area.
ATTENTION_BASE_GRID = 4


def layer_norm_2d(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Normalize the channel vector at each spatial position, then apply affine.

    Args:
        x: (..., C, H, W) feature map with C >= 2.
        gamma, beta: per-channel scale and shift, shape (C,).
    """
    if x.shape[-3] < 2:
        raise ConfigError(f"layer_norm_2d needs at least 2 channels, got {x.shape[-3]}")
    mean = x.mean(dim=-3, keepdim=True)
    var = x.var(dim=-3, unbiased=False, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    return y * gamma.view(-1, 1, 1) + beta.view(-1, 1, 1)


class LayerNorm2d(nn.Module):
    def __init__(self, channels, eps=LAYER_NORM_EPS):
        super().__init__()
        if channels < 2:
            raise ConfigError(f"LayerNorm2d needs at least 2 channels, got {channels}")
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm_2d(x, self.gamma, self.beta, self.eps)


def simple_gate(x):
    """Split channels in half and multiply the halves elementwise."""
    if x.shape[-3] % 2:
        raise ShapeError(f"simple_gate needs an even channel count, got {x.shape[-3]}")
    a, b = x.chunk(2, dim=-3)
    return a * b


class SimpleGate(nn.Module):
    def forward(self, x):
        return simple_gate(x)


class SimplifiedChannelAttention(nn.Module):
    """Rescale channels by a pointwise map of the globally pooled feature."""

    def __init__(self, channels):
        super().__init__()
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        if x.shape[-3] != self.proj.in_channels:
            raise ShapeError(
                f"expected {self.proj.in_channels} channels, got {x.shape[-3]}"
            )
        return x * self.proj(x.mean(dim=(-2, -1), keepdim=True))


class NAFBlock(nn.Module):
    """Activation-free restoration block.

    First half: LN -> 1x1 expand (x2) -> 3x3 depthwise -> gate -> channel
    attention -> 1x1 project, added back through a zero-initialized scalar
    gain. Second half: LN -> 1x1 expand (x2) -> gate -> 1x1 project, same
    residual scheme.
    """

    def __init__(self, channels):
        super().__init__()
        wide = channels * 2
        self.norm1 = LayerNorm2d(channels)
        self.expand = nn.Conv2d(channels, wide, 1)
        self.dwconv = nn.Conv2d(wide, wide, 3, padding=1, groups=wide)
        self.sca = SimplifiedChannelAttention(channels)
        self.project = nn.Conv2d(channels, channels, 1)

        self.norm2 = LayerNorm2d(channels)
        self.ffn_expand = nn.Conv2d(channels, wide, 1)
        self.ffn_project = nn.Conv2d(channels, channels, 1)

        self.body_gain = nn.Parameter(torch.zeros(()))
        self.ffn_gain = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        h = self.norm1(x)
        h = self.dwconv(self.expand(h))
        h = self.sca(simple_gate(h))
        x = x + self.body_gain * self.project(h)

        h = self.ffn_project(simple_gate(self.ffn_expand(self.norm2(x))))
        return x + self.ffn_gain * h


def window_partition(x, window_size):
    """Cut a feature map into non-overlapping square windows, row-major.

    (C, H, W) -> (nH*nW, C, w, w); (N, C, H, W) -> (N*nH*nW, C, w, w).
    H and W must be divisible by the window size.
    """
    if x.dim() not in (3, 4):
        raise ShapeError(f"expected a 3- or 4-d feature map, got {x.dim()}-d")
    h, w = x.shape[-2:]
    if h % window_size or w % window_size:
        raise ShapeError(f"{h}x{w} map not divisible by window size {window_size}")
    batched = x if x.dim() == 4 else x.unsqueeze(0)
    n, c = batched.shape[:2]
    tiles = batched.reshape(n, c, h // window_size, window_size, w // window_size, window_size)
    tiles = tiles.permute(0, 2, 4, 1, 3, 5)
    return tiles.reshape(-1, c, window_size, window_size)


def window_merge(windows, origin_shape):
    """Exact inverse of window_partition.

    Args:
        windows: (num_windows, C, w, w) as produced by window_partition.
        origin_shape: (H, W) for an unbatched origin or (N, H, W) for a
            batched one; controls the rank of the result.
    """
    if windows.dim() != 4 or windows.shape[-2] != windows.shape[-1]:
        raise ShapeError("windows must be square and shaped (num_windows, C, w, w)")
    ws = windows.shape[-1]
    c = windows.shape[-3]
    if len(origin_shape) == 2:
        n, (h, w) = 1, origin_shape
        batched = False
    elif len(origin_shape) == 3:
        n, h, w = origin_shape
        batched = True
    else:
        raise ShapeError(f"origin_shape must be (H, W) or (N, H, W), got {origin_shape}")
    if h % ws or w % ws or windows.shape[0] != n * (h // ws) * (w // ws):
        raise ShapeError(
            f"{windows.shape[0]} windows of size {ws} do not tile origin {origin_shape}"
        )
    x = windows.reshape(n, h // ws, w // ws, c, ws, ws)
    x = x.permute(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)
    return x if batched else x.squeeze(0)


class DualFeatureExtraction(nn.Module):
    """Produce attention inputs from a spatial path and a channel path.

    Queries and keys come from 1x1 projections. The value map is the sum of a
    3x3 depthwise convolution (spatial domain) and the input gated by a
    sigmoid of a pointwise map of the pooled feature (channel domain).
    """

    def __init__(self, channels):
        super().__init__()
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Conv2d(channels, channels, 1)
        self.spatial_value = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.channel_gate = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        q = self.to_q(x)
        k = self.to_k(x)
        gate = torch.sigmoid(self.channel_gate(x.mean(dim=(-2, -1), keepdim=True)))
        v = self.spatial_value(x) + x * gate
        return q, k, v


def spatial_self_correlation(q, k, v, window_size, return_weights=False):
    """Window attention with keys/values pooled onto a 4x4 grid per window.

    Inside each window the (w*w, d) queries attend over 16 pooled positions:
    softmax(Q Kp^T / sqrt(d)) Vp. Identical to plain attention when the
    window size equals the base grid.
    """
    if window_size % ATTENTION_BASE_GRID:
        raise ShapeError(f"window size {window_size} not a multiple of {ATTENTION_BASE_GRID}")
    origin = tuple(q.shape[:1] + q.shape[-2:]) if q.dim() == 4 else tuple(q.shape[-2:])
    qw = window_partition(q, window_size)
    kw = window_partition(k, window_size)
    vw = window_partition(v, window_size)
    d = qw.shape[1]
    pool = window_size // ATTENTION_BASE_GRID
    if pool > 1:
        kw = F.avg_pool2d(kw, pool)
        vw = F.avg_pool2d(vw, pool)
    queries = qw.flatten(-2).transpose(-2, -1)          # (nW, w*w, d)
    keys = kw.flatten(-2).transpose(-2, -1)             # (nW, 16, d)
    values = vw.flatten(-2).transpose(-2, -1)
    scores = queries @ keys.transpose(-2, -1) / math.sqrt(d)
    weights = torch.softmax(scores, dim=-1)             # (nW, w*w, 16)
    out = (weights @ values).transpose(-2, -1).reshape(qw.shape[0], d, window_size, window_size)
    out = window_merge(out, origin)
    return (out, weights) if return_weights else out


def channel_self_correlation(q, k, v, window_size, return_weights=False):
    """Window attention across channels: softmax(Q^T K / w^2) applied to V^T."""
    origin = tuple(q.shape[:1] + q.shape[-2:]) if q.dim() == 4 else tuple(q.shape[-2:])
    qw = window_partition(q, window_size).flatten(-2).transpose(-2, -1)  # (nW, w*w, d)
    kw = window_partition(k, window_size).flatten(-2).transpose(-2, -1)
    vw = window_partition(v, window_size).flatten(-2).transpose(-2, -1)
    d = qw.shape[-1]
    scores = qw.transpose(-2, -1) @ kw / (window_size * window_size)     # (nW, d, d)
    weights = torch.softmax(scores, dim=-1)
    out = weights @ vw.transpose(-2, -1)                                 # (nW, d, w*w)
    out = out.reshape(-1, d, window_size, window_size)
    out = window_merge(out, origin)
    return (out, weights) if return_weights else out


class HiTWindowAttention(nn.Module):
    """Multi-window self-attention over hierarchical window sizes.

    Channels are split into one contiguous group per window size (remainder
    to the last, largest window). Each group is halved into a spatial
    self-correlation sub-path and a channel self-correlation sub-path; the
    group outputs are concatenated and fused by a 1x1 projection.
    """

    def __init__(self, channels, window_sizes=(4, 8, 16)):
        super().__init__()
        if not window_sizes:
            raise ConfigError("window_sizes must be non-empty")
        base = channels // len(window_sizes)
        sizes = [base] * (len(window_sizes) - 1) + [channels - base * (len(window_sizes) - 1)]
        if min(sizes) < 2:
            raise ConfigError(
                f"{channels} channels leave a window group below 2 for {window_sizes}"
            )
        self.window_sizes = tuple(window_sizes)
        bounds = [0]
        for s in sizes:
            bounds.append(bounds[-1] + s)
        self.group_bounds = list(zip(bounds[:-1], bounds[1:]))
        self.dfe = DualFeatureExtraction(channels)
        self.fuse = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        largest = max(self.window_sizes)
        if h % largest or w % largest:
            raise ShapeError(f"{h}x{w} map not divisible by window size {largest}")
        q, k, v = self.dfe(x)
        outs = []
        for (lo, hi), ws in zip(self.group_bounds, self.window_sizes):
            half = (hi - lo) // 2
            qg, kg, vg = q[..., lo:hi, :, :], k[..., lo:hi, :, :], v[..., lo:hi, :, :]
            outs.append(spatial_self_correlation(
                qg[..., :half, :, :], kg[..., :half, :, :], vg[..., :half, :, :], ws))
            outs.append(channel_self_correlation(
                qg[..., half:, :, :], kg[..., half:, :, :], vg[..., half:, :, :], ws))
        return self.fuse(torch.cat(outs, dim=-3))


class ChannelFFN(nn.Module):
    """1x1 expand (x2) -> GELU -> 1x1 project."""

    def __init__(self, channels):
        super().__init__()
        self.expand = nn.Conv2d(channels, channels * 2, 1)
        self.project = nn.Conv2d(channels * 2, channels, 1)

    def forward(self, x):
        return self.project(F.gelu(self.expand(x)))


class SpatialFFN(nn.Module):
    """Feed-forward with parallel 3/5/7 depthwise convolutions.

    1x1 expand (x2) -> GELU -> sum of depthwise convs at kernel sizes 3, 5
    and 7 -> 1x1 project.
    """

    def __init__(self, channels):
        super().__init__()
        wide = channels * 2
        self.expand = nn.Conv2d(channels, wide, 1)
        self.dw3 = nn.Conv2d(wide, wide, 3, padding=1, groups=wide)
        self.dw5 = nn.Conv2d(wide, wide, 5, padding=2, groups=wide)
        self.dw7 = nn.Conv2d(wide, wide, 7, padding=3, groups=wide)
        self.project = nn.Conv2d(wide, channels, 1)

    def forward(self, x):
        h = F.gelu(self.expand(x))
        h = self.dw3(h) + self.dw5(h) + self.dw7(h)
        return self.project(h)


class FFTLayer(nn.Module):
    """Dual-branch mixing layer: local spatial path plus a frequency path.

    Spatial branch: 3x3 depthwise -> 1x1. Frequency branch: real 2-d FFT,
    real/imaginary parts stacked as 2C channels, 1x1 -> GELU -> 1x1, then the
    inverse transform. The branch outputs are summed and fused by a 1x1.
    """

    def __init__(self, channels):
        super().__init__()
        self.spatial_dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.spatial_pw = nn.Conv2d(channels, channels, 1)
        self.freq_in = nn.Conv2d(channels * 2, channels * 2, 1)
        self.freq_out = nn.Conv2d(channels * 2, channels * 2, 1)
        self.fuse = nn.Conv2d(channels, channels, 1)

    def frequency_branch(self, x, activate=True):
        # activate=False bypasses the GELU so identity kernels give an exact
        # transform round trip.
        spectrum = torch.fft.rfft2(x, norm="ortho")
        z = torch.cat([spectrum.real, spectrum.imag], dim=-3)
        z = self.freq_in(z)
        if activate:
            z = F.gelu(z)
        z = self.freq_out(z)
        real, imag = z.chunk(2, dim=-3)
        return torch.fft.irfft2(torch.complex(real, imag), s=x.shape[-2:], norm="ortho")

    def forward(self, x):
        h, w = x.shape[-2:]
        if h < 2 or w < 2:
            raise ConfigError(f"FFTLayer needs spatial dims >= 2, got {h}x{w}")
        spatial = self.spatial_pw(self.spatial_dw(x))
        return self.fuse(spatial + self.frequency_branch(x))


class HiTBlock(nn.Module):
    """LN -> hierarchical window attention -> LN -> channel FFN, with
    zero-initialized scalar residual gains."""

    def __init__(self, channels, window_sizes=(4, 8, 16)):
        super().__init__()
        self.norm1 = LayerNorm2d(channels)
        self.attn = HiTWindowAttention(channels, window_sizes)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = ChannelFFN(channels)
        self.attn_gain = nn.Parameter(torch.zeros(()))
        self.ffn_gain = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        x = x + self.attn_gain * self.attn(self.norm1(x))
        return x + self.ffn_gain * self.ffn(self.norm2(x))


class F2T2Block(nn.Module):
    """LN -> FFT mixing layer -> LN -> spatial FFN, same residual scheme as
    HiTBlock."""

    def __init__(self, channels):
        super().__init__()
        self.norm1 = LayerNorm2d(channels)
        self.mixer = FFTLayer(channels)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = SpatialFFN(channels)
        self.mixer_gain = nn.Parameter(torch.zeros(()))
        self.ffn_gain = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        x = x + self.mixer_gain * self.mixer(self.norm1(x))
        return x + self.ffn_gain * self.ffn(self.norm2(x))
