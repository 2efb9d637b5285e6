"""Rectified-flow training and Euler sampling; end-to-end ``decompose``.

Convention: ``x_t = (1 - t) x + t eps`` with velocity target ``eps - x``;
sampling integrates from ``t = 1`` (noise) down to ``t = 0`` (data).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import cues as cues_mod
from .backbone import Denoiser, assemble_inputs, build_image_mask_context, trainable_parameters
from .codec import PatchStateCodec, patch_encode
from .curation import TrainingTriplet
from .errors import ConfigError, DivergenceError, InvalidInputError, LayersplitError, NonFiniteError
from .fusion import FusionModel
from .imaging import as_mask, as_rgb

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3


@dataclass
class FlowConfig:
    steps: int = 20
    batch_size: int = 4
    learning_rate: float = 1e-3
    iterations: int = 3000
    lr_schedule: str = "cosine"
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    grad_clip: float = 1.0

    def validate(self):
        if self.steps < 1:
            raise ConfigError("flow: steps must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("flow: learning_rate must be > 0")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("flow: batch_size >= 1 and iterations >= 0 required")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("flow: lr_schedule must be 'constant' or 'cosine'")
        return self


@dataclass
class NoisyState:
    z_f: torch.Tensor | None
    z_b: torch.Tensor
    t: torch.Tensor


def interpolate(x: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    t = t.reshape(-1, *([1] * (x.dim() - 1)))
    return (1 - t) * x + t * eps


def velocity_target(x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return eps - x


# -- model bundle --------------------------------------------------------------

@dataclass
class Decomposer:
    """Everything ``decompose`` needs: denoiser, cue fusion, state codec, cue settings.

    ``use_fg_context=False`` feeds the background context to both streams;
    ``fusion=None`` (or ``use_mm=False``) feeds zeros in place of ``c_MM``.
    """

    denoiser: Denoiser
    fusion: FusionModel | None = None
    codec: PatchStateCodec = field(default_factory=PatchStateCodec)
    cue_cfg: cues_mod.CueConfig = field(default_factory=cues_mod.CueConfig)
    use_fg_context: bool = True
    use_mm: bool = True

    @property
    def patch(self) -> int:
        return self.codec.patch

    @property
    def dtype(self):
        return self.denoiser.in_proj.weight.dtype

    def condition(self, img: np.ndarray, mask: np.ndarray, cue_overrides=None) -> dict:
        """Numpy conditioning for one image: contexts and cue tokens."""
        img = as_rgb(img)
        mask = as_mask(mask)
        H, W = img.shape[:2]
        p = self.patch
        if H % p or W % p:
            raise InvalidInputError(f"image {H}x{W} must be divisible by patch size {p}")
        ctx = build_image_mask_context(img, mask, p)
        stack = cues_mod.cue_stack(img, self.cue_cfg, overrides=cue_overrides)
        cue_tok = np.stack([patch_encode(m, p).tokens for m in stack.maps()])
        return {"ctx_f": ctx.fg.tokens, "ctx_b": ctx.bg.tokens, "cues": cue_tok, "grid": ctx.bg.grid}

    def c_mm(self, cue_tok: torch.Tensor, grid) -> torch.Tensor | None:
        """``cue_tok`` is ``(B, 3, N, d_cue)``; returns ``(B, N, d_mm)`` or ``None`` for the base."""
        if not self.denoiser.with_mm:
            return None
        B, _, N, _ = cue_tok.shape
        if self.fusion is None or not self.use_mm:
            return torch.zeros(B, N, self.denoiser.cfg.d_mm, dtype=self.dtype)
        return self.fusion([cue_tok[:, m] for m in range(cue_tok.shape[1])], grid)

    def velocity(self, z_f, z_b, ctx_f, ctx_b, c_mm, t, grid):
        if not self.use_fg_context:
            ctx_f = ctx_b
        fg_in, bg_in = assemble_inputs(z_f, z_b, ctx_f, ctx_b, c_mm)
        return self.denoiser(fg_in, bg_in, t, grid)

    def parameters(self):
        params = list(trainable_parameters(self.denoiser))
        if self.fusion is not None and self.use_mm and self.denoiser.with_mm:
            params += [p for p in self.fusion.parameters() if p.requires_grad]
        return params

    def train(self, mode: bool = True):
        self.denoiser.train(mode)
        if self.fusion is not None:
            self.fusion.train(mode)
        return self

    def eval(self):
        return self.train(False)


# -- data ----------------------------------------------------------------------

@dataclass
class PreparedData:
    x_f: torch.Tensor
    x_b: torch.Tensor
    ctx_f: torch.Tensor
    ctx_b: torch.Tensor
    cues: torch.Tensor
    grid: tuple[int, int]

    def __len__(self):
        return self.x_b.shape[0]

    def batch(self, idx) -> "PreparedData":
        return PreparedData(self.x_f[idx], self.x_b[idx], self.ctx_f[idx], self.ctx_b[idx], self.cues[idx], self.grid)


def prepare_data(model: Decomposer, triplets: Sequence[TrainingTriplet]) -> PreparedData:
    if not triplets:
        raise InvalidInputError("prepare_data: dataset is empty")
    rows = []
    for tr in triplets:
        cond = model.condition(tr.composite, tr.mask)
        rows.append((model.codec.encode_fg(tr.gt_foreground), model.codec.encode_bg(tr.gt_background), cond))
    grid = rows[0][2]["grid"]
    as_t = lambda arrs: torch.as_tensor(np.stack(arrs), dtype=model.dtype)
    return PreparedData(
        x_f=as_t([r[0] for r in rows]),
        x_b=as_t([r[1] for r in rows]),
        ctx_f=as_t([r[2]["ctx_f"] for r in rows]),
        ctx_b=as_t([r[2]["ctx_b"] for r in rows]),
        cues=as_t([r[2]["cues"] for r in rows]),
        grid=grid,
    )


# -- loss ----------------------------------------------------------------------

def flow_loss(model: Decomposer, x_f, x_b, ctx_f, ctx_b, c_mm, t, eps_f, eps_b, grid) -> torch.Tensor:
    """Mean squared velocity error over both streams (background only when ``x_f`` is None)."""
    if torch.any(t < 0) or torch.any(t > 1):
        raise InvalidInputError("flow_loss: t must lie in [0, 1]")
    z_b = interpolate(x_b, eps_b, t)
    z_f = None if x_f is None else interpolate(x_f, eps_f, t)
    v_f, v_b = model.velocity(z_f, z_b, ctx_f, ctx_b, c_mm, t, grid)
    err = [(v_b - velocity_target(x_b, eps_b)).pow(2).reshape(-1)]
    if x_f is not None:
        err.append((v_f - velocity_target(x_f, eps_f)).pow(2).reshape(-1))
    loss = torch.cat(err).mean()
    if not torch.isfinite(loss):
        raise NonFiniteError(
            f"flow loss is {loss.item()} (t range [{t.min().item():.3f}, {t.max().item():.3f}], "
            f"|x_b| max {x_b.abs().max().item():.3g})"
        )
    return loss


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list[float]
    seconds: float

    def smoothed(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) == 0:
            return x
        w = min(window, len(x))
        return np.convolve(x, np.ones(w) / w, mode="valid")


def train(
    model: Decomposer,
    data: PreparedData,
    cfg: FlowConfig,
    joint: bool = True,
    on_checkpoint: Callable[[int, Decomposer], None] | None = None,
) -> TrainResult:
    """Optimise the model's trainable parameters with the flow-matching loss.

    ``joint=False`` trains the background stream alone (base inpainting
    pre-training). Batches cycle through a per-epoch seeded permutation.
    """
    cfg.validate()
    if len(data) == 0:
        raise InvalidInputError("train: dataset is empty")
    params = model.parameters()
    losses: list[float] = []
    if cfg.iterations == 0:
        return TrainResult(losses, 0.0)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda i: 0.5 * (1 + math.cos(math.pi * min(i, cfg.iterations) / cfg.iterations))
        )
    else:
        sched = None
    model.train()
    order = torch.randperm(len(data), generator=gen)
    cursor = 0
    t0 = time.perf_counter()
    first = None
    for it in range(cfg.iterations):
        if cursor + cfg.batch_size > len(order):
            order = torch.randperm(len(data), generator=gen)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        b = data.batch(idx)
        B = len(idx)
        t = torch.rand(B, generator=gen, dtype=model.dtype)
        eps_b = torch.randn(b.x_b.shape, generator=gen, dtype=model.dtype)
        eps_f = torch.randn(b.x_f.shape, generator=gen, dtype=model.dtype) if joint else None
        c_mm = model.c_mm(b.cues, b.grid)
        loss = flow_loss(model, b.x_f if joint else None, b.x_b, b.ctx_f, b.ctx_b, c_mm, t, eps_f, eps_b, b.grid)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        if sched is not None:
            sched.step()
        val = float(loss.item())
        losses.append(val)
        if first is None:
            first = val
        elif val > DIVERGENCE_FACTOR * first:
            raise DivergenceError(f"loss {val:.4g} at iteration {it} exceeds {DIVERGENCE_FACTOR:g}x initial {first:.4g}")
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.info("iter %d loss %.5f", it + 1, float(np.mean(losses[-cfg.log_every :])))
        if on_checkpoint is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(it + 1, model)
    model.eval()
    return TrainResult(losses, time.perf_counter() - t0)


# -- sampling ------------------------------------------------------------------

@torch.no_grad()
def sample(model: Decomposer, ctx_f, ctx_b, c_mm, grid, steps: int = 20, seed: int = 0, joint: bool = True):
    """Euler-integrate the learned velocity from seeded noise at ``t=1`` to ``t=0``.

    Context tensors are ``(B, N, d)``. Returns ``(z_f, z_b)`` at ``t = 0``.
    """
    if steps < 1:
        raise ConfigError("sample: steps must be >= 1")
    B, N = ctx_b.shape[:2]
    d = model.denoiser.cfg.d_state
    gen = torch.Generator().manual_seed(seed)
    z_f = torch.randn(B, N, d, generator=gen, dtype=model.dtype)
    z_b = torch.randn(B, N, d, generator=gen, dtype=model.dtype)
    if not joint:
        z_f = None
    dt = 1.0 / steps
    for i in range(steps):
        t = torch.full((B,), 1.0 - i * dt, dtype=model.dtype)
        v_f, v_b = model.velocity(z_f, z_b, ctx_f, ctx_b, c_mm, t, grid)
        z_b = z_b - dt * v_b
        if z_f is not None:
            z_f = z_f - dt * v_f
        if not torch.isfinite(z_b).all() or (z_f is not None and not torch.isfinite(z_f).all()):
            raise NonFiniteError(f"sampler state became non-finite at step {i}")
    return z_f, z_b


def decompose(
    model: Decomposer,
    img: np.ndarray,
    mask: np.ndarray,
    steps: int = 20,
    seed: int = 0,
    cue_overrides=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Split ``img`` into an RGBA foreground (object under ``mask``) and an RGB background."""
    img = as_rgb(img)
    try:
        cond = model.condition(img, mask, cue_overrides)
    except LayersplitError as exc:
        raise type(exc)(f"[conditioning] {exc}") from exc
    as_t = lambda a: torch.as_tensor(a, dtype=model.dtype)[None]
    model.eval()
    with torch.no_grad():
        c_mm = model.c_mm(as_t(cond["cues"]), cond["grid"])
        try:
            z_f, z_b = sample(model, as_t(cond["ctx_f"]), as_t(cond["ctx_b"]), c_mm, cond["grid"], steps, seed)
        except LayersplitError as exc:
            raise type(exc)(f"[sampling] {exc}") from exc
    fg = model.codec.decode_fg(z_f[0].double().numpy(), cond["grid"])
    bg = model.codec.decode_bg(z_b[0].double().numpy(), cond["grid"])
    return np.clip(fg, 0, 1), np.clip(bg, 0, 1)


def decompose_batch(model: Decomposer, data: PreparedData, steps: int = 20, seed: int = 0):
    """``decompose`` over prepared conditioning; sample ``i`` uses seed ``seed + i``.

    Per-sample noise matches calling :func:`decompose` one image at a time.
    """
    fgs, bgs = [], []
    model.eval()
    with torch.no_grad():
        for i in range(len(data)):
            b = data.batch(slice(i, i + 1))
            c_mm = model.c_mm(b.cues, b.grid)
            z_f, z_b = sample(model, b.ctx_f, b.ctx_b, c_mm, b.grid, steps, seed + i)
            fgs.append(model.codec.decode_fg(z_f[0].double().numpy(), b.grid))
            bgs.append(model.codec.decode_bg(z_b[0].double().numpy(), b.grid))
    return fgs, bgs
