"""Small tensor helpers shared by the fusion module and the denoiser."""

from __future__ import annotations

import math

import torch


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1):
    """Scaled dot-product attention over ``(..., n, d)`` tensors.

    Returns ``(out, weights)`` with ``weights`` shaped ``(..., heads, n_q, n_k)``.
    """
    *lead, n_q, d = q.shape
    n_k = k.shape[-2]
    dh = d // heads
    q = q.reshape(*lead, n_q, heads, dh).transpose(-3, -2)
    k = k.reshape(*lead, n_k, heads, dh).transpose(-3, -2)
    v = v.reshape(*lead, n_k, heads, v.shape[-1] // heads).transpose(-3, -2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    w = torch.softmax(scores, dim=-1)
    out = (w @ v).transpose(-3, -2).reshape(*lead, n_q, -1)
    return out, w


def sincos_1d(pos: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = pos.to(torch.float64)[:, None] * freq[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def grid_encoding(grid: tuple[int, int], dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sin/cos encoding, ``(rows*cols, dim)``; row and column each get ``dim/2``.

    ``dim`` must be divisible by 4.
    """
    if dim % 4:
        raise ValueError(f"grid encoding dim must be divisible by 4, got {dim}")
    rows, cols = grid
    r = torch.arange(rows).repeat_interleave(cols)
    c = torch.arange(cols).repeat(rows)
    return torch.cat([sincos_1d(r, dim // 2), sincos_1d(c, dim // 2)], dim=-1).to(dtype)


def time_encoding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of flow time ``t`` in [0, 1] (scaled by 1000)."""
    return sincos_1d(t.reshape(-1) * 1000.0, dim)
