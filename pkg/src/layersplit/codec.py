"""Image <-> token conversion.

Two codecs are provided:

* the lossless **patch codec** (default): non-overlapping ``patch x patch``
  blocks flattened in ``(row, col, channel)`` order into one token each;
* a small trainable convolutional **autoencoder**, with an RGBA variant
  derived from an RGB model by :func:`adapt_rgba`.

The *state codecs* at the bottom map foreground (RGBA) and background (RGB)
layers into token sequences of one shared width so that both denoising
streams can go through a single input projection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError, NonFiniteError

NOISY_STATE = "noisy-state"
IMAGE_MASK_CONTEXT = "image-mask-context"
MULTIMODAL_CONTEXT = "multimodal-context"


@dataclass
class TokenSequence:
    tokens: np.ndarray
    grid: tuple[int, int]
    channel_tag: str = NOISY_STATE

    def __post_init__(self):
        rows, cols = self.grid
        if self.tokens.ndim != 2 or self.tokens.shape[0] != rows * cols:
            raise InvalidInputError(f"token array {self.tokens.shape} does not fit grid {self.grid}")
        if self.tokens.shape[1] < 1:
            raise InvalidInputError("token dimension must be > 0")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class PatchCodecConfig:
    patch: int = 8
    channels_in: int = 3

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.channels_in


def patch_encode(img: np.ndarray, cfg: PatchCodecConfig | int, tag: str = NOISY_STATE) -> TokenSequence:
    """Flatten ``img`` (``H x W`` or ``H x W x C``) into one token per patch."""
    p = cfg if isinstance(cfg, int) else cfg.patch
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    if not isinstance(cfg, int) and C != cfg.channels_in:
        raise InvalidInputError(f"patch_encode: expected {cfg.channels_in} channels, got {C}")
    if H % p or W % p:
        raise InvalidInputError(f"patch_encode: image {H}x{W} is not divisible by patch {p}")
    rows, cols = H // p, W // p
    tokens = img.reshape(rows, p, cols, p, C).transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * C)
    return TokenSequence(np.ascontiguousarray(tokens), (rows, cols), tag)


def patch_decode(seq: TokenSequence, cfg: PatchCodecConfig | int, channels: int | None = None) -> np.ndarray:
    """Exact inverse of :func:`patch_encode`. Single-channel results are returned as ``H x W``."""
    if isinstance(cfg, int):
        p, C = cfg, channels
        if C is None:
            C = seq.dim // (p * p)
    else:
        p, C = cfg.patch, cfg.channels_in
    if seq.dim != p * p * C:
        raise InvalidInputError(f"patch_decode: token dim {seq.dim} != {p}*{p}*{C}")
    rows, cols = seq.grid
    img = seq.tokens.reshape(rows, cols, p, p, C).transpose(0, 2, 1, 3, 4).reshape(rows * p, cols * p, C)
    return img[..., 0] if C == 1 else img


def flat_index(row: int, col: int, py: int, px: int, ch: int, grid_cols: int, patch: int, channels: int):
    """(token, feature) position of pixel ``(row*patch+py, col*patch+px)`` channel ``ch``."""
    return row * grid_cols + col, (py * patch + px) * channels + ch


# -- autoencoder ----------------------------------------------------------------------

@dataclass
class AutoencoderConfig:
    in_channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 2
    hidden: int = 32
    variational: bool = False
    kl_weight: float = 1e-4

    def validate(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise InvalidInputError(f"downsample_factor must be a power of two, got {f}")
        if self.in_channels not in (3, 4):
            raise InvalidInputError("in_channels must be 3 or 4")
        return self


class AutoencoderModel(nn.Module):
    """Conv encoder/decoder. ``hidden=0`` builds a single 1x1 conv each way.

    For 4-channel inputs alpha enters the encoder as ``alpha - 1`` so that
    opaque pixels contribute nothing through the alpha filters.
    """

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg.validate()
        c_in, c_lat, h = cfg.in_channels, cfg.latent_channels, cfg.hidden
        enc_out = c_lat * (2 if cfg.variational else 1)
        n_down = int(math.log2(cfg.downsample_factor))
        if h == 0:
            if n_down:
                raise InvalidInputError("hidden=0 requires downsample_factor=1")
            self.enc_in = nn.Conv2d(c_in, enc_out, 1)
            self.enc_body = nn.Identity()
            self.enc_out = nn.Identity()
            self.dec_in = nn.Identity()
            self.dec_body = nn.Identity()
            self.dec_out = nn.Conv2d(c_lat, c_in, 1)
            return
        self.enc_in = nn.Conv2d(c_in, h, 3, padding=1)
        body = [nn.SiLU()]
        for _ in range(n_down):
            body += [nn.Conv2d(h, h, 3, stride=2, padding=1), nn.SiLU()]
        body += [nn.Conv2d(h, h, 3, padding=1), nn.SiLU()]
        self.enc_body = nn.Sequential(*body)
        self.enc_out = nn.Conv2d(h, enc_out, 1)
        self.dec_in = nn.Conv2d(c_lat, h, 3, padding=1)
        body = [nn.SiLU()]
        for _ in range(n_down):
            body += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(h, h, 3, padding=1), nn.SiLU()]
        body += [nn.Conv2d(h, h, 3, padding=1), nn.SiLU()]
        self.dec_body = nn.Sequential(*body)
        self.dec_out = nn.Conv2d(h, c_in, 3, padding=1)

    def _prep(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise InvalidInputError(f"autoencoder expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        if self.cfg.in_channels == 4:
            x = torch.cat([x[:, :3], x[:, 3:] - 1.0], dim=1)
        return x

    def encode_stats(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        h = self.enc_out(self.enc_body(self.enc_in(self._prep(x))))
        if self.cfg.variational:
            mu, logvar = h.chunk(2, dim=1)
            return mu, logvar
        return h, None

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic latent (the posterior mean in variational mode)."""
        return self.encode_stats(x)[0]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec_out(self.dec_body(self.dec_in(z)))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.encode_stats(x)
        if logvar is None:
            return self.decode(mu), torch.zeros((), dtype=x.dtype)
        z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar)
        kl = 0.5 * torch.mean(mu.pow(2) + logvar.exp() - 1.0 - logvar)
        return self.decode(z), kl


def ae_train_step(model: AutoencoderModel, batch: torch.Tensor, optimizer: torch.optim.Optimizer) -> float:
    """One optimizer step on MSE reconstruction (+ KL in variational mode)."""
    if batch.shape[1] != model.cfg.in_channels:
        raise InvalidInputError(f"batch has {batch.shape[1]} channels, model expects {model.cfg.in_channels}")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    recon, kl = model(batch)
    loss = torch.mean((recon - batch) ** 2) + model.cfg.kl_weight * kl
    if not torch.isfinite(loss):
        raise NonFiniteError(
            f"autoencoder loss is {loss.item()} (batch range [{batch.min().item()}, {batch.max().item()}])"
        )
    loss.backward()
    optimizer.step()
    return float(loss.item())


def adapt_rgba(rgb_model: AutoencoderModel) -> AutoencoderModel:
    """Derive an RGBA autoencoder from an RGB one.

    RGB weights are copied; the alpha input filters start at the mean of the
    RGB input filters and the alpha output filter at zero with bias 1, so the
    new model predicts opaque alpha until finetuned.
    """
    if rgb_model.cfg.in_channels != 3:
        raise InvalidInputError("adapt_rgba: model is already 4-channel")
    model = AutoencoderModel(replace(rgb_model.cfg, in_channels=4))
    model = model.to(next(rgb_model.parameters()).dtype)
    src = rgb_model.state_dict()
    dst = model.state_dict()
    with torch.no_grad():
        for name, value in src.items():
            if name == "enc_in.weight":
                w = torch.cat([value, value.mean(dim=1, keepdim=True)], dim=1)
                dst[name].copy_(w)
            elif name == "dec_out.weight":
                dst[name].copy_(torch.cat([value, torch.zeros_like(value[:1])], dim=0))
            elif name == "dec_out.bias":
                dst[name].copy_(torch.cat([value, torch.ones_like(value[:1])]))
            else:
                dst[name].copy_(value)
    model.load_state_dict(dst)
    return model


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- state codecs --------------------------------------------------------------

class PatchStateCodec:
    """Lossless patch tokens of RGBA layers, affinely mapped to [-1, 1].

    The background is carried as an opaque RGBA layer (alpha = 1) so that
    foreground and background states share ``token_dim``.
    """

    kind = "patch"

    def __init__(self, patch: int = 8):
        self.patch = patch
        self.cfg = PatchCodecConfig(patch, 4)

    @property
    def token_dim(self) -> int:
        return self.cfg.token_dim

    def grid(self, h: int, w: int) -> tuple[int, int]:
        return h // self.patch, w // self.patch

    def encode_fg(self, rgba: np.ndarray) -> np.ndarray:
        return patch_encode(rgba, self.cfg).tokens * 2.0 - 1.0

    def encode_bg(self, rgb: np.ndarray) -> np.ndarray:
        rgba = np.concatenate([rgb, np.ones(rgb.shape[:2] + (1,))], axis=-1)
        return self.encode_fg(rgba)

    def decode_fg(self, tokens: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
        seq = TokenSequence((np.asarray(tokens, dtype=np.float64) + 1.0) / 2.0, grid)
        return np.clip(patch_decode(seq, self.cfg), 0.0, 1.0)

    def decode_bg(self, tokens: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
        return self.decode_fg(tokens, grid)[..., :3]

    def describe(self) -> dict:
        return {"kind": self.kind, "patch": self.patch}


class AutoencoderStateCodec:
    """Latent tokens from an RGB autoencoder (background) and its RGBA twin (foreground).

    Latent maps are patchified with ``patch // downsample_factor``.
    """

    kind = "autoencoder"

    def __init__(self, rgb_model: AutoencoderModel, rgba_model: AutoencoderModel, patch: int = 8):
        if rgb_model.cfg.latent_channels != rgba_model.cfg.latent_channels:
            raise InvalidInputError("RGB and RGBA autoencoders must share latent_channels")
        f = rgb_model.cfg.downsample_factor
        if patch % f:
            raise InvalidInputError(f"patch {patch} not divisible by downsample factor {f}")
        self.rgb, self.rgba, self.patch = rgb_model.eval(), rgba_model.eval(), patch
        self.latent_patch = patch // f
        self.latent_channels = rgb_model.cfg.latent_channels

    @property
    def token_dim(self) -> int:
        return self.latent_patch**2 * self.latent_channels

    def grid(self, h: int, w: int) -> tuple[int, int]:
        return h // self.patch, w // self.patch

    def _encode(self, model: AutoencoderModel, img: np.ndarray) -> np.ndarray:
        dtype = next(model.parameters()).dtype
        x = torch.as_tensor(img, dtype=dtype).permute(2, 0, 1)[None]
        with torch.no_grad():
            lat = model.encode(x)[0].permute(1, 2, 0).double().numpy()
        return patch_encode(lat, self.latent_patch).tokens

    def _decode(self, model: AutoencoderModel, tokens: np.ndarray, grid) -> np.ndarray:
        seq = TokenSequence(np.asarray(tokens, dtype=np.float64), grid)
        lat = patch_decode(seq, self.latent_patch, self.latent_channels)
        if lat.ndim == 2:
            lat = lat[..., None]
        dtype = next(model.parameters()).dtype
        z = torch.as_tensor(lat, dtype=dtype).permute(2, 0, 1)[None]
        with torch.no_grad():
            out = model.decode(z)[0].permute(1, 2, 0).double().numpy()
        return np.clip(out, 0.0, 1.0)

    def encode_fg(self, rgba):
        return self._encode(self.rgba, rgba)

    def encode_bg(self, rgb):
        return self._encode(self.rgb, rgb)

    def decode_fg(self, tokens, grid):
        return self._decode(self.rgba, tokens, grid)

    def decode_bg(self, tokens, grid):
        return self._decode(self.rgb, tokens, grid)

    def describe(self) -> dict:
        return {"kind": self.kind, "patch": self.patch, "rgb": asdict(self.rgb.cfg), "rgba": asdict(self.rgba.cfg)}
