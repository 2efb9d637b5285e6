"""Latent-bottleneck fusion of multi-modal cue tokens.

A small set of learned latents *reads* the ``K`` cue tokens with one
cross-attention, then ``N_tok`` positional query slots *write* the latents
back out to a per-position context. The cost is
``O(K * n_latents + N_tok * n_latents)``, linear in ``K``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .codec import MULTIMODAL_CONTEXT, TokenSequence
from .errors import ConfigError, InvalidInputError
from .layers import attention, grid_encoding


@dataclass
class FusionConfig:
    d_cue: int = 64
    n_latents: int = 16
    d_latent: int = 64
    d_out: int = 64
    n_modalities: int = 3
    heads: int = 1
    latent_self_attention: bool = False
    init_std: float = 0.02

    def validate(self, n_cue_tokens: int | None = None):
        if self.n_latents < 1:
            raise ConfigError("fusion: n_latents must be >= 1")
        if self.d_latent % 4 or self.d_latent % self.heads:
            raise ConfigError("fusion: d_latent must be divisible by 4 and by heads")
        if n_cue_tokens is not None and self.n_latents >= n_cue_tokens:
            raise ConfigError(f"fusion: n_latents={self.n_latents} must be < K={n_cue_tokens}")
        return self


class _Attn(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x_q, x_kv):
        out, w = attention(self.q(x_q), self.k(x_kv), self.v(x_kv), self.heads)
        return self.o(out), w


class FusionModel(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg.validate()
        d = cfg.d_latent
        self.latents = nn.Parameter(torch.randn(cfg.n_latents, d))
        self.cue_in = nn.Linear(cfg.d_cue, d)
        self.modality_emb = nn.Parameter(torch.zeros(cfg.n_modalities, d))
        self.read = _Attn(d, cfg.heads)
        self.self_attn = _Attn(d, cfg.heads) if cfg.latent_self_attention else None
        self.slot_in = nn.Linear(d, d)
        self.write = _Attn(d, cfg.heads)
        self.out = nn.Linear(d, cfg.d_out)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=cfg.init_std)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.modality_emb, std=cfg.init_std)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def embed_cues(self, cues: Sequence[torch.Tensor], grid: tuple[int, int]) -> torch.Tensor:
        """``cues[m]`` is ``(B, N_m, d_cue)``; returns ``(B, K, d_latent)``."""
        if len(cues) > self.cfg.n_modalities:
            raise InvalidInputError(f"fusion: got {len(cues)} modalities, model has {self.cfg.n_modalities}")
        n = grid[0] * grid[1]
        pos = grid_encoding(grid, self.cfg.d_latent, self.latents.dtype)
        parts = []
        for m, tok in enumerate(cues):
            if tok.shape[-2] != n:
                raise InvalidInputError(f"fusion: modality {m} has {tok.shape[-2]} tokens, grid {grid} needs {n}")
            parts.append(self.cue_in(tok) + self.modality_emb[m] + pos)
        return torch.cat(parts, dim=-2)

    def read_stage(self, x: torch.Tensor):
        lat = self.latents.expand(*x.shape[:-2], -1, -1)
        upd, w = self.read(lat, x)
        lat = lat + upd
        if self.self_attn is not None:
            upd2, _ = self.self_attn(lat, lat)
            lat = lat + upd2
        return lat, w

    def write_stage(self, lat: torch.Tensor, grid: tuple[int, int]):
        slots = self.slot_in(grid_encoding(grid, self.cfg.d_latent, lat.dtype))
        slots = slots.expand(*lat.shape[:-2], -1, -1)
        out, w = self.write(slots, lat)
        return self.out(out), w

    def forward(self, cues: Sequence[torch.Tensor], grid: tuple[int, int], return_attn: bool = False):
        x = self.embed_cues(cues, grid)
        lat, w_read = self.read_stage(x)
        out, w_write = self.write_stage(lat, grid)
        if return_attn:
            return out, (w_read, w_write)
        return out


def _check_grids(cue_tokens: Sequence[TokenSequence]) -> tuple[int, int]:
    if not cue_tokens:
        raise InvalidInputError("fuse: no cue tokens given")
    grids = {tuple(s.grid) for s in cue_tokens}
    if len(grids) != 1:
        raise InvalidInputError(f"fuse: cue modalities disagree on grid: {sorted(grids)}")
    return cue_tokens[0].grid


def fuse(cue_tokens: Sequence[TokenSequence], model: FusionModel) -> TokenSequence:
    """Fuse one image's cue token sequences into an ``N_tok x d_out`` context."""
    grid = _check_grids(cue_tokens)
    dtype = model.latents.dtype
    with torch.no_grad():
        out = model([torch.as_tensor(s.tokens, dtype=dtype) for s in cue_tokens], grid)
    return TokenSequence(out.double().numpy(), grid, MULTIMODAL_CONTEXT)


# -- dense loop reference ----------------------------------------------------------

def _np(p: torch.Tensor) -> np.ndarray:
    return p.detach().double().cpu().numpy()


def _lin(layer: nn.Linear):
    w, b = _np(layer.weight), _np(layer.bias)
    return lambda x: x @ w.T + b


def _dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    n_q, d = q.shape
    dh = d // heads
    dv = v.shape[1] // heads
    out = np.zeros((n_q, v.shape[1]))
    for h in range(heads):
        for i in range(n_q):
            s = np.array([np.dot(q[i, h * dh : (h + 1) * dh], k[j, h * dh : (h + 1) * dh]) for j in range(len(k))])
            s = s / np.sqrt(dh)
            e = np.exp(s - s.max())
            w = e / e.sum()
            out[i, h * dv : (h + 1) * dv] = (w[:, None] * v[:, h * dv : (h + 1) * dv]).sum(axis=0)
    return out


def _ref_attn(block: _Attn, x_q: np.ndarray, x_kv: np.ndarray, heads: int) -> np.ndarray:
    return _lin(block.o)(_dense_attention(_lin(block.q)(x_q), _lin(block.k)(x_kv), _lin(block.v)(x_kv), heads))


def fuse_reference(cue_tokens: Sequence[TokenSequence], model: FusionModel) -> TokenSequence:
    """Same maths as :func:`fuse` with explicit per-row softmax loops in float64. Test oracle."""
    grid = _check_grids(cue_tokens)
    cfg = model.cfg
    pos = grid_encoding(grid, cfg.d_latent, torch.float64).numpy()
    mod = _np(model.modality_emb)
    cue_in = _lin(model.cue_in)
    x = np.concatenate([cue_in(np.asarray(s.tokens, np.float64)) + mod[m] + pos for m, s in enumerate(cue_tokens)])
    lat = _np(model.latents)
    lat = lat + _ref_attn(model.read, lat, x, cfg.heads)
    if model.self_attn is not None:
        lat = lat + _ref_attn(model.self_attn, lat, lat, cfg.heads)
    slots = _lin(model.slot_in)(pos)
    out = _lin(model.out)(_ref_attn(model.write, slots, lat, cfg.heads))
    return TokenSequence(out, grid, MULTIMODAL_CONTEXT)


# -- complexity ----------------------------------------------------------------

def read_flops(K: int, cfg: FusionConfig) -> int:
    """Multiply-add FLOPs of the read stage that touch the ``K`` cue tokens.

    Cue embedding, key/value projections, scores and the weighted sum; all
    proportional to ``K``.
    """
    d, n = cfg.d_latent, cfg.n_latents
    return 2 * K * cfg.d_cue * d + 2 * (2 * K * d * d) + 2 * n * K * d + 2 * n * K * d


def latent_flops(cfg: FusionConfig) -> int:
    """Read-stage FLOPs independent of ``K`` (latent query/output projections)."""
    d, n = cfg.d_latent, cfg.n_latents
    return 2 * (2 * n * d * d)


def write_flops(n_tok: int, cfg: FusionConfig) -> int:
    d, n = cfg.d_latent, cfg.n_latents
    return 2 * n_tok * d * d + 2 * (2 * n * d * d) + 2 * (2 * n_tok * n * d) + 2 * n_tok * d * d + 2 * n_tok * d * cfg.d_out


def _grid_for(K: int) -> tuple[int, int]:
    r = int(np.sqrt(K))
    while K % r:
        r -= 1
    return r, K // r


def complexity_probe(
    model: FusionModel,
    K_values: Sequence[int],
    n_tok: int = 64,
    batch: int = 8,
    repeats: int = 7,
    seed: int = 0,
) -> list[dict]:
    """Time the read stage as ``K`` grows; ``n_latents`` and ``n_tok`` stay fixed.

    Each row reports the median wall time over ``repeats`` runs together with
    the analytic FLOP counts.
    """
    cfg = model.cfg
    gen = torch.Generator().manual_seed(seed)
    dtype = model.latents.dtype
    rows = []
    with torch.no_grad():
        for K in K_values:
            grid = _grid_for(K)
            cues = [torch.randn(batch, K, cfg.d_cue, generator=gen, dtype=dtype)]
            model.read_stage(model.embed_cues(cues, grid))  # warm-up
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                model.read_stage(model.embed_cues(cues, grid))
                times.append(time.perf_counter() - t0)
            rows.append(
                {
                    "K": int(K),
                    "wall_time": float(np.median(times)),
                    "read_flops": read_flops(K, cfg) * batch,
                    "latent_flops": latent_flops(cfg) * batch,
                    "write_flops": write_flops(n_tok, cfg) * batch,
                }
            )
    return rows


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ``log(ys)`` against ``log(xs)``."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
