"""Shared network pieces built on the primitives in :mod:`text2pose.tensor`."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import tensor as T


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = positions.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(positions.dtype if positions.is_floating_point() else torch.float32)


def band_mask(length: int, window: int | None) -> torch.Tensor | None:
    """Boolean (length, length) mask allowing |i - j| <= window // 2; None means full attention."""
    if window is None or window >= 2 * length:
        return None
    idx = torch.arange(length)
    return (idx[:, None] - idx[None, :]).abs() <= window // 2


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim or dim, dim)
        self.v = nn.Linear(kv_dim or dim, dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights = None
        self.keep_weights = False

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        if self.keep_weights:
            self.last_weights = T.attention_weights(q, k, mask).detach()
        y = T.attention(q, k, v, mask)
        b, h, n, dh = y.shape
        return self.out(y.transpose(1, 2).reshape(b, n, h * dh))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm encoder block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.mlp(self.norm2(x))


class ResBlock1d(nn.Module):
    """Two kernel-3 convolutions over the length axis with an identity shortcut."""

    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        groups = math.gcd(groups, channels)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = T.conv1d(T.silu(self.norm1(x)), self.conv1.weight, self.conv1.bias, padding=1)
        h = T.conv1d(T.silu(self.norm2(h)), self.conv2.weight, self.conv2.bias, padding=1)
        return x + h
