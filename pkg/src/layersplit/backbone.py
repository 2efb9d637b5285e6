"""Compact diffusion transformer with LoRA adaptation.

The base model is an inpainting denoiser: it sees one background sequence
``concat(z_b, c_b)``. Adaptation widens the input projection for the fused
cue context, adds a foreground stream that shares every transformer block,
and inserts LoRA adapters into the attention and feed-forward linears while
the base weights stay frozen.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .codec import IMAGE_MASK_CONTEXT, PatchCodecConfig, TokenSequence, patch_encode
from .errors import ConfigError, InvalidInputError, NonFiniteError
from .imaging import as_mask, as_rgb
from .layers import attention, grid_encoding, time_encoding

log = logging.getLogger(__name__)

LORA_TARGETS = ("qkv", "proj", "fc1", "fc2")
FG, BG = 0, 1


@dataclass
class DenoiserConfig:
    d_state: int = 256
    d_ctx: int = 256
    d_mm: int = 64
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    time_dim: int = 64
    # "x": heads predict the clean layer, v = (z_t - x_hat) / max(t, t_floor)
    # "v": heads predict the velocity directly
    prediction: str = "x"
    t_floor: float = 0.02

    def validate(self):
        if self.d_model % self.heads or self.d_model % 4:
            raise ConfigError("denoiser: d_model must be divisible by heads and by 4")
        if self.prediction not in ("x", "v"):
            raise ConfigError("denoiser: prediction must be 'x' or 'v'")
        if not 0 < self.t_floor <= 1:
            raise ConfigError("denoiser: t_floor must be in (0, 1]")
        return self


@dataclass
class ImageMaskContext:
    fg: TokenSequence
    bg: TokenSequence


def build_image_mask_context(img: np.ndarray, mask: np.ndarray, patch: int = 8) -> ImageMaskContext:
    """Background context ``[I*(1-M), M]`` and foreground context ``[I*M, 1-M]``.

    In both, the mask channel is 1 where content has to be generated.
    """
    img = as_rgb(img)
    mask = as_mask(mask)
    if img.shape[:2] != mask.shape:
        raise InvalidInputError(f"context: image {img.shape[:2]} and mask {mask.shape} differ")
    m = mask[..., None]
    cfg = PatchCodecConfig(patch, 4)
    bg = patch_encode(np.concatenate([img * (1 - m), m], axis=-1), cfg, IMAGE_MASK_CONTEXT)
    fg = patch_encode(np.concatenate([img * m, 1 - m], axis=-1), cfg, IMAGE_MASK_CONTEXT)
    return ImageMaskContext(fg=fg, bg=bg)


def assemble_inputs(z_f, z_b, ctx_f, ctx_b, c_mm=None):
    """Channel-wise ``concat(z, c_IM, c_MM)`` for each stream (tensors ``(..., N, d)``).

    ``c_mm=None`` yields the base inpainting layout ``concat(z, c_IM)``;
    ``z_f=None`` skips the foreground stream.
    """
    def cat(z, c):
        if z.shape[-2] != c.shape[-2] or (c_mm is not None and c_mm.shape[-2] != z.shape[-2]):
            raise InvalidInputError("assemble_inputs: token-count mismatch between sequences")
        parts = [z, c] if c_mm is None else [z, c, c_mm]
        return torch.cat(parts, dim=-1)

    fg = None if z_f is None else cat(z_f, ctx_f)
    return fg, cat(z_b, ctx_b)


# -- LoRA ------------------------------------------------------------------------

class LoRALinear(nn.Module):
    """``W x + b + scale * B(A x)`` around a frozen ``nn.Linear``.

    ``A`` is ``d_in x r`` (Gaussian), ``B`` is ``r x d_out`` (zeros).
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float | None = None, generator=None):
        super().__init__()
        d_in, d_out = base.in_features, base.out_features
        if not 1 <= rank <= min(d_in, d_out):
            raise ConfigError(f"LoRA rank {rank} outside [1, {min(d_in, d_out)}]")
        self.base = base
        self.rank = rank
        self.scale = (float(rank) if alpha is None else float(alpha)) / rank
        w = base.weight
        a = torch.randn(d_in, rank, generator=generator, dtype=w.dtype) / math.sqrt(d_in)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(rank, d_out, dtype=w.dtype))

    def forward(self, x):
        return self.base(x) + self.scale * ((x @ self.lora_A) @ self.lora_B)

    def delta_weight(self) -> torch.Tensor:
        return self.scale * (self.lora_A @ self.lora_B).T


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)

    def forward(self, h):
        q, k, v = self.qkv(self.ln1(h)).chunk(3, dim=-1)
        a, _ = attention(q, k, v, self.heads)
        h = h + self.proj(a)
        return h + self.fc2(nn.functional.gelu(self.fc1(self.ln2(h))))


class Denoiser(nn.Module):
    """Velocity network over a joint ``[foreground; background]`` token sequence."""

    def __init__(self, cfg: DenoiserConfig, with_mm: bool = False):
        super().__init__()
        self.cfg = cfg.validate()
        d = cfg.d_model
        self.with_mm = with_mm
        d_in = cfg.d_state + cfg.d_ctx + (cfg.d_mm if with_mm else 0)
        self.in_proj = nn.Linear(d_in, d)
        self.role_emb = nn.Parameter(torch.randn(2, d) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_out = nn.LayerNorm(d)
        self.heads = nn.ModuleDict({"fg": nn.Linear(d, cfg.d_state), "bg": nn.Linear(d, cfg.d_state)})
        self._merged = False

    @property
    def input_width(self) -> int:
        return self.in_proj.in_features

    def embed(self, seq: torch.Tensor, role: int, t: torch.Tensor, grid) -> torch.Tensor:
        dtype = self.in_proj.weight.dtype
        pos = grid_encoding(grid, self.cfg.d_model, dtype)
        temb = self.time_mlp(time_encoding(t, self.cfg.time_dim).to(dtype))
        return self.in_proj(seq) + self.role_emb[role] + pos + temb[:, None, :]

    def forward(self, fg_in: torch.Tensor | None, bg_in: torch.Tensor, t: torch.Tensor, grid):
        """Return ``(v_f, v_b)``; ``v_f`` is ``None`` in background-only mode.

        ``t`` has shape ``(B,)`` with values in [0, 1].
        """
        t = torch.as_tensor(t, dtype=self.in_proj.weight.dtype).reshape(-1)
        if t.numel() == 1 and bg_in.shape[0] > 1:
            t = t.expand(bg_in.shape[0])
        if torch.any(t < 0) or torch.any(t > 1):
            raise InvalidInputError("forward: t must lie in [0, 1]")
        n = bg_in.shape[-2]
        parts = [] if fg_in is None else [self.embed(fg_in, FG, t, grid)]
        parts.append(self.embed(bg_in, BG, t, grid))
        h = torch.cat(parts, dim=1)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if not torch.isfinite(h).all():
                raise NonFiniteError(f"non-finite activations after block {i}")
        h = self.ln_out(h)
        v_b = self._velocity(self.heads["bg"](h[:, -n:]), bg_in, t)
        v_f = None if fg_in is None else self._velocity(self.heads["fg"](h[:, :n]), fg_in, t)
        return v_f, v_b

    def _velocity(self, out: torch.Tensor, seq: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if self.cfg.prediction == "v":
            return out
        z = seq[..., : self.cfg.d_state]
        return (z - out) / t.clamp(min=self.cfg.t_floor)[:, None, None]

    # -- adaptation ------------------------------------------------------------

    def extend_input(self, d_extra: int, std: float = 0.0, generator: torch.Generator | None = None) -> None:
        """Widen the input projection by ``d_extra`` columns drawn from N(0, std^2)."""
        old = self.in_proj
        new = nn.Linear(old.in_features + d_extra, old.out_features).to(old.weight.dtype)
        with torch.no_grad():
            new.weight.zero_()
            if std > 0:
                new.weight[:, old.in_features :].normal_(0.0, std, generator=generator)
            new.weight[:, : old.in_features].copy_(old.weight)
            new.bias.copy_(old.bias)
        self.in_proj = new
        self.with_mm = True

    def lora_layers(self) -> dict[str, LoRALinear]:
        return {name: m for name, m in self.named_modules() if isinstance(m, LoRALinear)}


def lora_wrap(
    model: Denoiser,
    rank: int,
    targets: Iterable[str] = LORA_TARGETS,
    alpha: float | None = None,
    seed: int = 0,
) -> Denoiser:
    """Insert LoRA adapters into every block's ``targets`` linears, in place.

    ``targets`` entries are sub-layer kinds (``qkv``, ``proj``, ``fc1``,
    ``fc2``) or full names such as ``blocks.0.qkv``. Afterwards only the
    adapters and the input projection require gradients.
    """
    targets = list(targets)
    kinds = {name for name in targets if name in LORA_TARGETS}
    full = set(targets) - kinds
    known = {f"blocks.{i}.{k}" for i in range(len(model.blocks)) for k in LORA_TARGETS}
    unknown = full - known
    if unknown:
        raise ConfigError(f"lora_wrap: unknown sub-layer(s) {sorted(unknown)}")
    gen = torch.Generator().manual_seed(seed)
    for i, block in enumerate(model.blocks):
        for kind in LORA_TARGETS:
            if kind in kinds or f"blocks.{i}.{kind}" in full:
                layer = getattr(block, kind)
                if isinstance(layer, LoRALinear):
                    raise ConfigError(f"lora_wrap: blocks.{i}.{kind} already wrapped")
                setattr(block, kind, LoRALinear(layer, rank, alpha, gen))
    for name, p in model.named_parameters():
        p.requires_grad_("lora_" in name or name.startswith("in_proj."))
    model._merged = False
    return model


def merge_lora(model: Denoiser) -> Denoiser:
    """Fold every adapter into its base weight and drop the adapters, in place."""
    wrapped = model.lora_layers()
    if not wrapped:
        if model._merged:
            log.warning("merge_lora: adapters already merged; nothing to do")
        return model
    for name, layer in wrapped.items():
        base = layer.base
        with torch.no_grad():
            base.weight.add_(layer.delta_weight())
        parent_name, attr = name.rsplit(".", 1)
        setattr(model.get_submodule(parent_name), attr, base)
    model._merged = True
    return model


def count_lora_trainable(model: Denoiser) -> int:
    """Closed form: sum of ``r * (d_in + d_out)`` plus the input projection size."""
    total = sum(l.rank * (l.base.in_features + l.base.out_features) for l in model.lora_layers().values())
    return total + model.in_proj.weight.numel() + model.in_proj.bias.numel()


# -- frozen-base bookkeeping ------------------------------------------------------------

TRAINABLE_PATTERNS = (r"lora_[AB]$", r"^in_proj\.", r"^heads\.fg\.", r"^role_emb$")


def canonical_name(name: str) -> str:
    """Parameter name with LoRA wrapping removed (``x.qkv.base.weight`` -> ``x.qkv.weight``)."""
    return name.replace(".base.", ".")


def is_adaptation_param(name: str) -> bool:
    return any(re.search(p, name) for p in TRAINABLE_PATTERNS)


def frozen_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Base parameters that adaptation must never touch, keyed by canonical name."""
    return {
        canonical_name(n): p.detach()
        for n, p in model.named_parameters()
        if not is_adaptation_param(n)
    }


def frozen_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(frozen_state(model).items()):
        h.update(name.encode())
        h.update(str(tuple(p.shape)).encode())
        h.update(np.ascontiguousarray(p.cpu().numpy()).tobytes())
    return h.hexdigest()


MM_COLUMN_STD = 0.02


def prepare_for_decomposition(
    base: Denoiser,
    rank: int,
    alpha: float | None = None,
    seed: int = 0,
    targets: Iterable[str] = LORA_TARGETS,
) -> Denoiser:
    """Copy a trained inpainting base into an adaptable decomposition model.

    Widens the input projection for ``c_MM`` with small random columns,
    initialises the foreground head from the background head, wraps LoRA
    adapters, then freezes everything except adapters, input projection,
    foreground head and role embeddings.
    """
    model = copy.deepcopy(base)
    if not model.with_mm:
        # the fusion output starts at zero, so these columns see no signal at step 0;
        # zeroing them too would leave both factors with exactly zero gradient
        gen = torch.Generator().manual_seed(seed)
        model.extend_input(model.cfg.d_mm, std=MM_COLUMN_STD, generator=gen)
    with torch.no_grad():
        model.heads["fg"].load_state_dict(model.heads["bg"].state_dict())
    lora_wrap(model, rank, targets, alpha=alpha, seed=seed)
    for name, p in model.named_parameters():
        p.requires_grad_(is_adaptation_param(name))
    return model


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def parameter_counts(model: nn.Module) -> tuple[int, int]:
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return trainable, total


def embed_lora_rank(layer: LoRALinear, new_rank: int) -> LoRALinear:
    """Return an equivalent adapter of higher rank (zero-padded factors, same delta)."""
    if new_rank < layer.rank:
        raise ConfigError("embed_lora_rank: new rank must be >= current rank")
    out = LoRALinear(layer.base, new_rank, alpha=layer.scale * new_rank)
    with torch.no_grad():
        out.lora_A.zero_()
        out.lora_B.zero_()
        out.lora_A[:, : layer.rank].copy_(layer.lora_A)
        out.lora_B[: layer.rank].copy_(layer.lora_B)
    return out
