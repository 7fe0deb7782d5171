"""Small torch building blocks shared by the segmentor and the flow module."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def conv3x3(cin: int, cout: int, stride: int = 1, padding_mode: str = "zeros") -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode=padding_mode)


class MLP(nn.Module):
    """Linear stack with GELU between layers; ``hidden`` hidden layers."""

    def __init__(self, din: int, dhidden: int, dout: int, hidden: int = 2):
        super().__init__()
        dims = [din] + [dhidden] * hidden + [dout]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class PixelMLP(nn.Module):
    """Per-pixel MLP over a B x C x H x W map, as 1x1 convolutions."""

    def __init__(self, din: int, dhidden: int, dout: int, hidden: int = 2):
        super().__init__()
        dims = [din] + [dhidden] * hidden + [dout]
        self.layers = nn.ModuleList(nn.Conv2d(a, b, 1) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, key, value):
        b, nq, c = query.shape
        nk = key.shape[1]
        hd = c // self.heads
        q = self.q(query).view(b, nq, self.heads, hd).transpose(1, 2)
        k = self.k(key).view(b, nk, self.heads, hd).transpose(1, 2)
        v = self.v(value).view(b, nk, self.heads, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, nq, c))


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SelfAttentionLayer(nn.Module):
    """Post-norm encoder layer: LN(MSA(z) + z) followed by LN(FFN(z) + z)."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, z):
        z = self.norm1(self.attn(z, z, z) + z)
        return self.norm2(self.ffn(z) + z)


class QueryDecoderBlock(nn.Module):
    """Cross-attention (queries -> map), self-attention, FFN; each post-norm."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.cross = MultiHeadAttention(dim, heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm_self = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def forward(self, queries, memory, memory_pos):
        q = self.norm_cross(self.cross(queries, memory + memory_pos, memory) + queries)
        q = self.norm_self(self.self_attn(q, q, q) + q)
        return self.norm_ffn(self.ffn(q) + q)


def sine_position_embedding(h: int, w: int, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed 2-D sinusoidal embedding, ``dim x h x w``.

    The first ``dim/2`` channels encode the row index, the rest the column
    index.  Within each half, channel ``i`` uses frequency
    ``temperature ** (2 * (i // 2) / (dim / 2))``, sine on even ``i`` and
    cosine on odd ``i``.
    """
    if dim % 4:
        raise ValueError("dim must be divisible by 4")
    half = dim // 2
    i = torch.arange(half, dtype=torch.float64)
    freq = temperature ** (2 * torch.div(i, 2, rounding_mode="floor") / half)
    ys = torch.arange(h, dtype=torch.float64)[:, None] / freq  # h x half
    xs = torch.arange(w, dtype=torch.float64)[:, None] / freq  # w x half
    even = (torch.arange(half) % 2 == 0)
    ey = torch.where(even, torch.sin(ys), torch.cos(ys))
    ex = torch.where(even, torch.sin(xs), torch.cos(xs))
    pos = torch.cat(
        [ey.T[:, :, None].expand(half, h, w), ex.T[:, None, :].expand(half, h, w)], dim=0
    )
    return pos


def upsample(x, factor: int):
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
