"""Raster types, straight-alpha compositing and layer stacking.

Images are plain float64 numpy arrays with values in [0, 1]:

* RGB  -> ``(H, W, 3)``
* RGBA -> ``(H, W, 4)``, channel 3 is straight (non-premultiplied) alpha
* mask -> ``(H, W)`` with values exactly 0 or 1
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import InvalidInputError

ALPHA_THRESHOLD = 0.5


@dataclass(frozen=True)
class Placement:
    """Where a foreground layer lands on the canvas.

    ``offset_x``/``offset_y`` anchor the top-left corner of the rescaled layer
    in canvas coordinates; larger ``z_order`` means nearer to the camera.
    """

    scale: float = 1.0
    offset_x: int = 0
    offset_y: int = 0
    z_order: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidInputError(f"placement scale must be > 0, got {self.scale}")


def _check_image(img: np.ndarray, channels: int, name: str) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != channels:
        raise InvalidInputError(f"{name}: expected (H, W, {channels}) array, got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInputError(f"{name}: empty image {img.shape}")
    return img


def as_rgb(img) -> np.ndarray:
    return _check_image(img, 3, "rgb")


def as_rgba(img) -> np.ndarray:
    return _check_image(img, 4, "rgba")


def as_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidInputError(f"mask: expected (H, W) array, got {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise InvalidInputError("mask values must be exactly 0 or 1")
    return mask.astype(np.float64)


def _same_hw(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape[:2] != b.shape[:2]:
        raise InvalidInputError(f"{what}: dimension mismatch {a.shape[:2]} vs {b.shape[:2]}")


def alpha_over(fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Composite a straight-alpha RGBA layer over an opaque RGB image."""
    fg = as_rgba(fg)
    bg = as_rgb(bg)
    _same_hw(fg, bg, "alpha_over")
    a = fg[..., 3:4]
    out = a * fg[..., :3] + (1.0 - a) * bg
    return np.clip(out, 0.0, 1.0)


def over_rgba(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Porter-Duff "over" for two straight-alpha RGBA layers.

    Where ``dst`` is fully transparent the source colour is copied verbatim,
    so compositing a single layer onto an empty canvas is lossless.
    """
    src = as_rgba(src)
    dst = as_rgba(dst)
    _same_hw(src, dst, "over_rgba")
    a_s = src[..., 3:4]
    a_d = dst[..., 3:4]
    a_out = a_s + a_d * (1.0 - a_s)
    premul = src[..., :3] * a_s + dst[..., :3] * a_d * (1.0 - a_s)
    with np.errstate(invalid="ignore", divide="ignore"):
        rgb = np.where(a_out > 0, premul / np.where(a_out > 0, a_out, 1.0), 0.0)
    rgb = np.where(a_d == 0, src[..., :3], rgb)
    return np.clip(np.concatenate([rgb, a_out], axis=-1), 0.0, 1.0)


def _lerp_axis(img: np.ndarray, out_len: int, scale: float, axis: int) -> np.ndarray:
    n = img.shape[axis]
    # half-pixel centres, edge-clamped
    src = (np.arange(out_len) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w = src - i0
    a = np.take(img, i0, axis=axis)
    b = np.take(img, i1, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = out_len
    w = w.reshape(shape)
    return a + w * (b - a)


def resample(img: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear rescale of every channel by ``scale`` (half-pixel centres)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise InvalidInputError(f"resample: unsupported shape {img.shape}")
    if not scale > 0:
        raise InvalidInputError(f"resample: scale must be > 0, got {scale}")
    h, w = img.shape[:2]
    out_h, out_w = int(round(h * scale)), int(round(w * scale))
    if out_h < 1 or out_w < 1:
        raise InvalidInputError(f"resample: result {out_h}x{out_w} is smaller than 1x1")
    if scale == 1.0:
        return img.copy()
    out = _lerp_axis(img, out_h, scale, axis=0)
    out = _lerp_axis(out, out_w, scale, axis=1)
    return np.clip(out, 0.0, 1.0)


def place_layer(fg: np.ndarray, placement: Placement, canvas_hw: tuple[int, int]) -> np.ndarray:
    """Rescale ``fg`` and paste it onto a transparent canvas of size ``canvas_hw``."""
    fg = as_rgba(fg)
    if placement.scale != 1.0:
        fg = resample(fg, placement.scale)
    H, W = canvas_hw
    h, w = fg.shape[:2]
    x0, y0 = placement.offset_x, placement.offset_y
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x0 + w, W), min(y0 + h, H)
    if cx1 <= cx0 or cy1 <= cy0:
        raise InvalidInputError(
            f"placement at ({x0}, {y0}) size {w}x{h} does not intersect the {W}x{H} canvas"
        )
    canvas = np.zeros((H, W, 4))
    canvas[cy0:cy1, cx0:cx1] = fg[cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0]
    return canvas


def stack_layers(
    layers: Sequence[tuple[np.ndarray, Placement]],
    bg: np.ndarray,
    alpha_threshold: float = ALPHA_THRESHOLD,
) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Composite placed layers back-to-front over ``bg``.

    Returns ``(composite, visible_masks, union_alpha)``. ``visible_masks`` are
    in the order of ``layers``; a pixel is visible for a layer when its alpha
    exceeds ``alpha_threshold`` and no nearer layer does so there. Ties in
    ``z_order`` keep list order (later = nearer).
    """
    bg = as_rgb(bg)
    H, W = bg.shape[:2]
    if len(layers) == 0:
        return bg.copy(), [], np.zeros((H, W))

    placed = [place_layer(img, pl, (H, W)) for img, pl in layers]
    order = sorted(range(len(layers)), key=lambda i: layers[i][1].z_order)

    out = bg.copy()
    for i in order:
        a = placed[i][..., 3:4]
        out = a * placed[i][..., :3] + (1.0 - a) * out

    visible: list[np.ndarray] = [None] * len(layers)  # type: ignore[list-item]
    covered = np.zeros((H, W), dtype=bool)
    transmit = np.ones((H, W))
    for i in reversed(order):
        a = placed[i][..., 3]
        solid = a > alpha_threshold
        visible[i] = (solid & ~covered).astype(np.float64)
        covered |= solid
        transmit = transmit * (1.0 - a)
    return np.clip(out, 0.0, 1.0), visible, 1.0 - transmit


def transparent(h: int, w: int) -> np.ndarray:
    return np.zeros((h, w, 4))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# -- PNG I/O ---------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def read_png(path: str | Path, mode: str) -> np.ndarray:
    """Read a PNG as float64 in [0, 1]. ``mode`` is ``"RGB"``, ``"RGBA"`` or ``"L"``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    return arr


def read_rgb(path) -> np.ndarray:
    return read_png(path, "RGB")


def read_rgba(path) -> np.ndarray:
    return read_png(path, "RGBA")


def read_mask(path) -> np.ndarray:
    """Masks are single-channel PNGs; any value >= 128 counts as foreground."""
    return (read_png(path, "L") >= 0.5).astype(np.float64)


def write_png(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        mode = "L"
    else:
        mode = {3: "RGB", 4: "RGBA"}[img.shape[2]]
    Image.fromarray(to_uint8(img), mode=mode).save(path, format="PNG")
